"""Model specification, deterministic assembly, and the .swft checkpoint format.

Checkpoint layout (little-endian):
    magic "SWFT" | version u32 | entry count u32 | entries...
    entry: name length u32 | UTF-8 name | dtype code u8 | rank u8
           | dims u32 x rank | raw payload
Round trips are bit-exact; tensors are matched by name and dims on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict

import numpy as np

from .layers import Module
from .seghead import SegModel

MAGIC = b"SWFT"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": 1, "float64": 2, "int64": 3, "uint8": 4}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}

BACKBONES = ("resnet18", "mobilenetv2")
INTERP_MODES = ("bilinear", "nearest")


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    """Declarative description of a segmentation model."""

    backbone: str = "resnet18"
    width_mult: float = 1.0
    decoder_width: int = 128
    spp_grids: tuple[int, ...] = (1, 2, 4, 8)
    spp_per_level: int = 0      # 0 means decoder_width
    spp_out: int = 0            # 0 means decoder_width
    pyramid_levels: int = 1
    num_classes: int = 19
    lateral: bool = True
    interp: str = "bilinear"

    def __post_init__(self):
        self.spp_grids = tuple(int(g) for g in self.spp_grids)
        if self.backbone not in BACKBONES:
            raise ValueError(f"unsupported backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.pyramid_levels not in (1, 2):
            raise ValueError(f"pyramid_levels must be 1 or 2, got {self.pyramid_levels}")
        if self.decoder_width <= 0:
            raise ValueError("decoder_width must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.interp not in INTERP_MODES:
            raise ValueError(f"interp must be one of {INTERP_MODES}")
        if any(g < 1 for g in self.spp_grids):
            raise ValueError("spp grids must be >= 1")
        if self.width_mult <= 0:
            raise ValueError("width_mult must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spp_grids"] = list(self.spp_grids)
        return d


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> SegModel:
    """Assemble a runnable model. Deterministic: one seed, one bit pattern."""
    rng = np.random.default_rng(seed)
    model = SegModel(rng, spec, dtype)
    model.requires_grad_(True)
    return model


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def _state_of(obj) -> dict[str, np.ndarray]:
    return obj.state() if isinstance(obj, Module) else dict(obj)


def save(model_or_state, path):
    state = _state_of(model_or_state)
    names = list(state)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in state")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(state[name])
            code = _DTYPE_CODES.get(arr.dtype.name)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_entries(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint file into {name: array} without needing a model."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype.newbyteorder("<"))
        off += nbytes
        if name in entries:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        entries[name] = arr.astype(dtype).reshape(dims)
    return entries


def load(model_or_state, path):
    """Copy checkpoint tensors into the model by name, bit-exactly.

    Mismatches are collected and reported together: unknown names, missing
    names, and dims mismatches each identify the offending tensor.
    """
    state = _state_of(model_or_state)
    entries = read_entries(path)
    problems = []
    for name, arr in entries.items():
        if name not in state:
            problems.append(f"unknown tensor {name!r} in checkpoint")
        elif state[name].shape != arr.shape:
            problems.append(f"dims mismatch for {name!r}: "
                            f"model {tuple(state[name].shape)} vs file {tuple(arr.shape)}")
    for name in state:
        if name not in entries:
            problems.append(f"model tensor {name!r} missing from checkpoint")
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    for name, arr in entries.items():
        dst = state[name]
        dst[...] = arr.astype(dst.dtype, copy=False)
    return model_or_state
