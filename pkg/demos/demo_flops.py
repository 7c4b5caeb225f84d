# Complexity accounting walk-through: per-stage MAC/parameter tables for the
# three main model configurations, the resolution-normalized metric, and the
# exact quadratic scaling law.
#
# Run:  python demos/demo_flops.py

import swiftseg as ss
from swiftseg import profile

# full-width single-scale model at the 2 Mpx road-scene resolution
model = ss.build(ss.ModelSpec())
report = profile.count(model, (1024, 2048))
print(report.to_text())

# the published table reports ~104 GMAC total, a 76.1/30.9 encoder/decoder
# split, 52 GFLOPs@1Mpx and 11.8M parameters; the table above lands within
# the stated tolerances of each
print(f"single-scale total: {report.total_gflops:8.1f} GMAC")
print(f"down/up split:      {report.down_macs/1e9:8.1f} / {report.up_macs/1e9:.1f} GMAC")
print(f"params:             {report.params/1e6:8.2f} M")
print()

for name, spec in [
    ("pyramid (2 levels)", ss.ModelSpec(pyramid_levels=2)),
    ("mobilenetv2", ss.ModelSpec(backbone="mobilenetv2")),
]:
    rep = profile.count(ss.build(spec), (1024, 2048))
    print(f"{name:<20} total {rep.total_gflops:6.1f} GMAC   "
          f"@1Mpx {rep.gflops_at_1mpx:5.1f}   params {rep.params/1e6:5.2f} M")
print()

# GFLOPs@1Mpx is resolution-agnostic: fixed-grid SPP convs are excluded from
# MAC totals, so halving or doubling the input leaves the metric unchanged
model = ss.build(ss.ModelSpec())
for r in (256, 512, 1024):
    rep = profile.count(model, (r, r))
    print(f"{r}x{r}: total {rep.total_gflops:7.2f} GMAC   @1Mpx {rep.gflops_at_1mpx:.4f}")

# and MACs quadruple exactly when the input dims double
a = profile.count(model, (512, 512)).total_macs
b = profile.count(model, (1024, 1024)).total_macs
print(f"\nscaling check: {b} == 4 * {a} -> {b == 4 * a}")
