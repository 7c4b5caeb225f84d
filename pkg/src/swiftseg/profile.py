"""Per-stage multiply-accumulate/parameter accounting and a wall-clock
latency harness.

Counting convention (stated in every report): one MAC is one fused
multiply-add; conv MACs are N*Cout*(Cin/groups)*kh*kw*Hout*Wout; BN, ReLU,
elementwise sums, pooling, and interpolation count zero; SPP level convs on
fixed gxg pooled grids are resolution-independent and also count zero, which
keeps totals exactly quadratic in linear input scale. 1 Mpx is 2^20 pixels.

Counting is analytic (a structural walk over the model); no tensors are
materialized. The benchmark times input preparation, the forward pass,
per-pixel argmax, and result readout, batch size 1, on a monotonic clock.
Benchmark runs are single-client: one model, sequential passes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .seghead import SegModel
from .tensor import Tensor

CONVENTION = ("MACs: fused multiply-adds of convolutions; BN/ReLU/add/pool/resize "
              "and fixed-grid SPP level convs count zero; 1Mpx = 2^20 px")


@dataclass
class StageRow:
    name: str
    out_dims: tuple  # (C, H, W)
    params: int
    macs: int
    path: str  # "down" | "up"


@dataclass
class FlopReport:
    stages: list[StageRow]
    down_macs: int
    up_macs: int
    total_macs: int
    params: int
    input_dims: tuple
    gflops_at_1mpx: float
    convention: str = CONVENTION

    @property
    def total_gflops(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "stages": [{"name": s.name, "out_dims": list(s.out_dims),
                        "params": s.params, "macs": s.macs, "path": s.path}
                       for s in self.stages],
            "down_macs": self.down_macs,
            "up_macs": self.up_macs,
            "total_macs": self.total_macs,
            "total_gflops": self.total_gflops,
            "gflops_at_1mpx": self.gflops_at_1mpx,
            "params": self.params,
            "convention": self.convention,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_csv(self) -> str:
        lines = ["stage,path,channels,height,width,params,macs"]
        for s in self.stages:
            c, h, w = s.out_dims
            lines.append(f"{s.name},{s.path},{c},{h},{w},{s.params},{s.macs}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = [(s.name, f"{s.out_dims[0]}x{s.out_dims[1]}x{s.out_dims[2]}",
                 f"{s.params:,}", f"{s.macs:,}", s.path) for s in self.stages]
        head = ("stage", "out dims", "params", "MACs", "path")
        widths = [max(len(r[i]) for r in rows + [head]) for i in range(5)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append("")
        lines.append(f"down MACs : {self.down_macs:,}")
        lines.append(f"up MACs   : {self.up_macs:,}")
        lines.append(f"total MACs: {self.total_macs:,}  ({self.total_gflops:.1f} GMAC)")
        lines.append(f"GFLOPs@1Mpx: {self.gflops_at_1mpx:.2f}")
        lines.append(f"params    : {self.params:,}")
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines) + "\n"


def _decoder_rows(model: SegModel, hw, lateral_flags):
    spec = model.spec
    rows = []
    for k, (step, lat) in enumerate(zip(model.decoder.steps, lateral_flags), start=1):
        macs = step.macs(hw, with_lateral=lat)
        hw = (2 * hw[0], 2 * hw[1])
        width = step.blend.conv.cout
        rows.append(StageRow(f"up{k}", (width, *hw), step.parameter_count(), macs, "up"))
    cls = model.decoder.classifier
    rows.append(StageRow("classifier", (spec.num_classes, *hw),
                         cls.parameter_count(), cls.macs(hw), "up"))
    return rows, hw


def count(model: SegModel, input_hw) -> FlopReport:
    """Analytic per-stage MAC/parameter report for one input resolution."""
    h, w = int(input_hw[0]), int(input_hw[1])
    spec = model.spec
    need = 64 if spec.pyramid_levels == 2 else 32
    if h % need or w % need:
        raise ValueError(f"input dims ({h}, {w}) must be divisible by {need}")

    rows: list[StageRow] = []
    for name, c, hw, macs, params in model.backbone.stage_report((h, w)):
        rows.append(StageRow(name, (c, *hw), params, macs, "down"))
    t32_hw = rows[-1].out_dims[1:]

    if spec.pyramid_levels == 2:
        # second shared-parameter pass at half resolution: MACs accrue,
        # parameters are owned by the full-resolution rows
        for name, c, hw, macs, _ in model.backbone.stage_report((h // 2, w // 2)):
            rows.append(StageRow(f"half.{name}", (c, *hw), 0, macs, "down"))
        spp_hw = rows[-1].out_dims[1:]
    else:
        spp_hw = t32_hw

    rows.append(StageRow("spp", (model.spp.out_channels, *spp_hw),
                         model.spp.parameter_count(), model.spp.macs(spp_hw), "down"))

    lateral_flags = [spec.lateral and s.lateral is not None for s in model.decoder.steps]
    up_rows, out_hw = _decoder_rows(model, spp_hw, lateral_flags)
    rows.extend(up_rows)
    rows.append(StageRow("resize", (spec.num_classes, h, w), 0, 0, "up"))

    down = sum(r.macs for r in rows if r.path == "down")
    up = sum(r.macs for r in rows if r.path == "up")
    total = down + up
    return FlopReport(
        stages=rows,
        down_macs=down,
        up_macs=up,
        total_macs=total,
        params=model.parameter_count(),
        input_dims=(h, w),
        gflops_at_1mpx=total * (2 ** 20 / (h * w)) / 1e9,
    )


# ---------------------------------------------------------------------------
# latency harness
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    passes: int
    mean_fps: float
    per_pass_ms: list[float]
    input_dims: tuple
    fused: bool
    warmup: int = 0

    def to_dict(self) -> dict:
        return {"passes": self.passes, "mean_fps": self.mean_fps,
                "per_pass_ms": self.per_pass_ms, "input_dims": list(self.input_dims),
                "fused": self.fused, "warmup": self.warmup}

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _run_pass(model, raw, stage_hook):
    # the timed region covers everything between raw bytes and readout bytes
    if stage_hook:
        stage_hook("prepare")
    x = raw.astype(model.dtype) / np.asarray(255.0, dtype=model.dtype)
    x = np.ascontiguousarray(x.transpose(2, 0, 1))[None]
    if stage_hook:
        stage_hook("forward")
    with T.no_grad():
        logits = model.forward(Tensor(x))
    if stage_hook:
        stage_hook("argmax")
    pred = logits.data.argmax(axis=1)
    if stage_hook:
        stage_hook("readout")
    return pred.astype(np.uint8).tobytes()


def benchmark(model: SegModel, input_hw, passes: int = 1000, warmup: int = 10,
              clock=None, stage_hook=None, seed: int = 0) -> BenchReport:
    """Mean FPS over ``passes`` single-image forward passes.

    ``clock`` is injectable for protocol tests; the default is the monotonic
    ``time.perf_counter``. Warmup passes run before the timed region.
    """
    if passes < 1:
        raise ValueError("benchmark needs passes >= 1")
    clock = clock or time.perf_counter
    h, w = input_hw
    raw = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    out = None
    for _ in range(warmup):
        out = _run_pass(model, raw, None)
    per_pass_ms = []
    t_prev = t0 = clock()
    for _ in range(passes):
        out = _run_pass(model, raw, stage_hook)
        t_now = clock()
        per_pass_ms.append((t_now - t_prev) * 1000.0)
        t_prev = t_now
    elapsed = t_prev - t0
    del out
    return BenchReport(
        passes=passes,
        mean_fps=passes / elapsed,
        per_pass_ms=per_pass_ms,
        input_dims=(h, w),
        fused=model.fused,
        warmup=warmup,
    )
