# Latency harness walk-through: the timed region covers input preparation,
# the forward pass, per-pixel argmax, and result readout, batch size 1 on a
# monotonic clock -- the published measurement protocol. Batch-norm folding
# trims elementwise work, so the fused model should not be slower.
#
# Run:  python demos/demo_benchmark.py

import swiftseg as ss
from swiftseg import profile
from swiftseg.seghead import fuse_bn

# desk-scale model so the demo finishes in seconds; the protocol defaults to
# 1000 passes when measuring for real
spec = ss.ModelSpec(width_mult=0.25, decoder_width=32, spp_grids=(1, 2), num_classes=19)
model = ss.build(spec, seed=0)

report = profile.benchmark(model, (128, 256), passes=20, warmup=5)
print(f"unfused: {report.mean_fps:6.2f} FPS over {report.passes} passes "
      f"at {report.input_dims[1]}x{report.input_dims[0]}")

fused = fuse_bn(model)
report_f = profile.benchmark(fused, (128, 256), passes=20, warmup=5)
print(f"fused:   {report_f.mean_fps:6.2f} FPS (fused={report_f.fused})")
print()

# stage hooks show what sits inside the timed region
events = []
profile.benchmark(model, (64, 64), passes=1, warmup=0, stage_hook=events.append)
print("stages timed per pass:", " -> ".join(events))

# per-pass timings are retained for latency-distribution inspection
print("first five pass timings (ms):",
      [f"{t:.1f}" for t in report.per_pass_ms[:5]])
