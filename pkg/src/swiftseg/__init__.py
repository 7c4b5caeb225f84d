"""CPU semantic-segmentation engine with measurement tooling.

Single-scale and interleaved-pyramid encoder/decoder models over a small
numpy autodiff core, plus per-stage MAC/parameter accounting, a latency
benchmark harness, effective-receptive-field estimation, and a desk-scale
training loop.

``SWIFTSEG_THREADS`` caps internal op parallelism: it is forwarded to the
BLAS thread knobs, which only take effect when set before numpy loads, i.e.
in fresh processes such as the CLI.
"""

import os as _os
import sys as _sys

if "SWIFTSEG_THREADS" in _os.environ and "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SWIFTSEG_THREADS"])

from .tensor import Tensor, no_grad, backward
from .graph import ModelSpec, build, save, load, CheckpointError
from .seghead import SegModel, fuse_bn
from .profile import count, benchmark, FlopReport, BenchReport
from .erf import estimate as estimate_erf, ErfReport
from .train import TrainConfig, cosine_lr, Adam, augment, miou, fit

__all__ = [
    "Tensor", "no_grad", "backward",
    "ModelSpec", "build", "save", "load", "CheckpointError",
    "SegModel", "fuse_bn",
    "count", "benchmark", "FlopReport", "BenchReport",
    "estimate_erf", "ErfReport",
    "TrainConfig", "cosine_lr", "Adam", "augment", "miou", "fit",
]
