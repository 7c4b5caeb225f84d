"""Binary PPM/PGM image io and the images/ + labels/ directory dataset.

P6 (RGB) and P5 (grayscale) with maxval 255 are the only formats: both are
parseable without codecs and carry one byte per sample. Labels use class ids
with 255 reserved for ignore.
"""

from __future__ import annotations

import os

import numpy as np


class DataError(RuntimeError):
    pass


def _read_header_tokens(blob: bytes, count: int):
    """PNM header tokens after the magic: whitespace separated, # comments."""
    tokens = []
    i = 2
    while len(tokens) < count:
        if i >= len(blob):
            raise DataError("truncated PNM header")
        ch = blob[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # header ends after single whitespace byte


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {blob[:2]!r}")
    tokens, offset = _read_header_tokens(blob, 3)
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * channels
    payload = np.frombuffer(blob[offset:offset + need], dtype=np.uint8)
    if payload.size != need:
        raise DataError(f"{path}: payload truncated ({payload.size} of {need} bytes)")
    if channels == 1:
        return payload.reshape(h, w).copy()
    return payload.reshape(h, w, channels).copy()


def read_ppm(path) -> np.ndarray:
    """[H, W, 3] uint8 from a binary P6 file."""
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """[H, W] uint8 from a binary P5 file."""
    return _read_pnm(path, b"P5", 1)


def write_ppm(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"write_ppm needs [H, W, 3], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def write_pgm(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise DataError(f"write_pgm needs [H, W], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def normalize_image(img: np.ndarray, mean, std) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [3, H, W], scaled to [0,1] then standardized."""
    x = img.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


class SegDataset:
    """Matched image/label pairs: <root>/images/<stem>.ppm + <root>/labels/<stem>.pgm."""

    def __init__(self, root, num_classes: int, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                 ignore_index: int = 255, require_labels: bool = True):
        self.root = str(root)
        self.num_classes = num_classes
        self.mean, self.std = mean, std
        self.ignore_index = ignore_index
        img_dir = os.path.join(self.root, "images")
        lab_dir = os.path.join(self.root, "labels")
        if not os.path.isdir(img_dir):
            raise DataError(f"missing image directory {img_dir}")
        stems = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir)
                       if f.endswith(".ppm"))
        if not stems:
            raise DataError(f"no .ppm images under {img_dir}")
        self.samples = []
        for stem in stems:
            ipath = os.path.join(img_dir, stem + ".ppm")
            lpath = os.path.join(lab_dir, stem + ".pgm")
            if not os.path.isfile(lpath):
                if require_labels:
                    raise DataError(f"no label file for {ipath} (expected {lpath})")
                lpath = None
            self.samples.append((stem, ipath, lpath))

    def __len__(self):
        return len(self.samples)

    def stem(self, i):
        return self.samples[i][0]

    def load_raw(self, i):
        stem, ipath, lpath = self.samples[i]
        img = read_ppm(ipath)
        labels = None
        if lpath is not None:
            labels = read_pgm(lpath)
            if labels.shape != img.shape[:2]:
                raise DataError(f"{lpath}: label dims {labels.shape} do not match "
                                f"image dims {img.shape[:2]}")
            bad = (labels >= self.num_classes) & (labels != self.ignore_index)
            if bad.any():
                raise DataError(f"{lpath}: label value {int(labels[bad][0])} outside "
                                f"[0, {self.num_classes}) and not ignore")
        return img, labels

    def __getitem__(self, i):
        img, labels = self.load_raw(i)
        x = normalize_image(img, self.mean, self.std)
        y = labels.astype(np.int64) if labels is not None else None
        return x, y
