"""Dense NCHW tensors with reverse-mode automatic differentiation.

The engine runs in float32; float64 is available for numerical oracles.
Every op records a backward closure on its output; ``backward(root)``
replays the tape in reverse topological order and accumulates gradients
(summing over fan-out). Tensors are treated as immutable once they have
entered a forward graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "relu",
    "relu6",
    "conv2d",
    "batch_norm",
    "max_pool2d",
    "grid_avg_pool",
    "resize",
    "concat_channels",
    "softmax_cross_entropy",
    "tensor_sum",
    "pick",
    "backward",
    "conv_out_hw",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An ndarray plus an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data, parents, bwd):
    """Wrap an op result; attach tape linkage only when it can carry gradient."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(root: Tensor):
    """Reverse-mode accumulation from a scalar root through the recorded tape."""
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._consumed:
        raise RuntimeError("backward already ran on this graph; re-run forward first")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add requires identical dims, got {a.shape} vs {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bwd)


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6)

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.clip(x.data, 0, 6), (x,), bwd)


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ValueError(f"concat_channels dims mismatch: {tensors[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g):
        for t, gt in zip(tensors, np.split(g, splits, axis=1)):
            _accum(t, gt)

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    def bwd(g):
        _accum(x, np.full_like(x.data, g.item()))

    return _make(x.data.sum(), (x,), bwd)


def pick(x: Tensor, index) -> Tensor:
    """Select a single element as a scalar node (used as a backward root)."""
    index = tuple(index)

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g.item()
            _accum(x, full)

    return _make(x.data[index], (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_out_hw(in_hw, kernel_hw, stride, padding, dilation):
    h, w = in_hw
    kh, kw = kernel_hw
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    return ho, wo


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp, kh, kw, stride, dilation, ho, wo, groups):
    # strided window view, then one materializing reshape to (N, G, Cg*kh*kw, L)
    n, c, _, _ = xp.shape
    sh, sw = stride
    dh, dw = dilation
    sn, sc, srow, scol = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, dh * srow, dw * scol, sh * srow, sw * scol),
        writeable=False,
    )
    cg = c // groups
    return windows.reshape(n, groups, cg * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """2-d convolution over NCHW input, differentiable w.r.t. x, weight, bias."""
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ValueError(f"conv2d channel/groups mismatch: input has {c} channels, "
                         f"kernel expects {cg}x{groups}")
    if cout % groups:
        raise ValueError(f"conv2d: Cout={cout} not divisible by groups={groups}")
    ho, wo = conv_out_hw((h, w), (kh, kw), stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d produces non-positive output dims ({ho}, {wo})")

    ph, pw = padding
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo, groups)
    cog = cout // groups
    wmat = weight.data.reshape(groups, cog, cg * kh * kw)
    out = np.matmul(wmat[None], cols)  # (N, G, Cog, L)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        go = g.reshape(n, groups, cog, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            _accum(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1)[None], go)  # (N, G, Cg*kh*kw, L)
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            gp = np.zeros_like(xp)
            sh, sw = stride
            dh, dw = dilation
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i * dh:i * dh + sh * ho:sh, j * dw:j * dw + sw * wo:sw] += gcols[:, :, i, j]
            if ph or pw:
                gp = gp[:, :, ph:ph + h, pw:pw + w]
            _accum(x, gp)

    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.1, training: bool = False) -> Tensor:
    """Channel batch norm. Training mode uses batch statistics and updates the
    running buffers in place with ``new = (1-momentum)*old + momentum*batch``."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm channel mismatch: x has {c} channels, "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm running buffers must have shape ({c},)")

    if training:
        axes = (0, 2, 3)
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bwd_train(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                scale = (gamma.data * inv_std)[None, :, None, None]
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                gsum = g.sum(axis=(0, 2, 3), keepdims=True)
                gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                _accum(x, scale * (g - gsum / m - xhat * gx_sum / m))

        return _make(out, (x, gamma, beta), bwd_train)

    # inference: affine in the running statistics
    mean = running_mean.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd_eval(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * (gamma.data * inv_std)[None, :, None, None])

    return _make(out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# pooling and resizing
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    padding = _pair(padding)
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_out_hw((h, w), kernel, stride, padding, (1, 1))
    if ho <= 0 or wo <= 0:
        raise ValueError(f"max_pool2d produces non-positive output dims ({ho}, {wo})")
    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    sn, sc, srow, scol = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, srow, scol, sh * srow, sw * scol), writeable=False)
    flat = windows.reshape(n, c, kh * kw, ho, wo)
    am = flat.argmax(axis=2)  # first max wins: deterministic tie-break
    out = np.take_along_axis(flat, am[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        if not x.requires_grad:
            return
        gp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.data.dtype)
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oi[None, None] * sh + am // kw
        cols = oj[None, None] * sw + am % kw
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gp, (ni, ci, rows, cols), g)
        if ph or pw:
            gp = gp[:, :, ph:ph + h, pw:pw + w]
        _accum(x, gp)

    return _make(out, (x,), bwd)


def _grid_edges(size: int, g: int):
    # bin i covers [floor(i*size/g), floor((i+1)*size/g)): full coverage, no overlap
    return [(i * size) // g for i in range(g + 1)]


def grid_avg_pool(x: Tensor, g: int) -> Tensor:
    n, c, h, w = x.shape
    if g < 1:
        raise ValueError("grid_avg_pool: grid must be >= 1")
    if g > h or g > w:
        raise ValueError(f"grid_avg_pool: grid {g} exceeds spatial dims ({h}, {w})")
    re = _grid_edges(h, g)
    ce = _grid_edges(w, g)
    out = np.empty((n, c, g, g), dtype=x.data.dtype)
    for i in range(g):
        for j in range(g):
            block = x.data[:, :, re[i]:re[i + 1], ce[j]:ce[j + 1]]
            # anchored mean: exact for constant fields regardless of bin size
            first = block[:, :, :1, :1]
            out[:, :, i, j] = (first[:, :, 0, 0]
                               + (block - first).mean(axis=(2, 3)))

    def bwd(gr):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        for i in range(g):
            for j in range(g):
                cnt = (re[i + 1] - re[i]) * (ce[j + 1] - ce[j])
                gx[:, :, re[i]:re[i + 1], ce[j]:ce[j + 1]] += \
                    (gr[:, :, i, j] / cnt)[:, :, None, None]
        _accum(x, gx)

    return _make(out, (x,), bwd)


def _half_pixel_coords(out_size: int, in_size: int):
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_size - 1)
    frac = src - lo
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, frac


def resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Spatial resize with half-pixel source coordinates and edge clamping."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"resize output dims must be positive, got ({out_h}, {out_w})")
    n, c, h, w = x.shape
    if mode == "nearest":
        ri = np.minimum(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
        ci = np.minimum(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
        out = x.data[:, :, ri[:, None], ci[None, :]]

        def bwd_nearest(g):
            if not x.requires_grad:
                return
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
            _accum(x, gx)

        return _make(out, (x,), bwd_nearest)

    if mode != "bilinear":
        raise ValueError(f"resize: unknown mode {mode!r}")

    y0, y1, fy = _half_pixel_coords(out_h, h)
    x0, x1, fx = _half_pixel_coords(out_w, w)
    fy = fy.astype(x.dtype)[None, None, :, None]
    fx = fx.astype(x.dtype)[None, None, None, :]
    # separable lerp in the a + f*(b-a) form: constants are preserved exactly
    r0 = x.data[:, :, y0, :]
    rows = r0 + fy * (x.data[:, :, y1, :] - r0)
    c0 = rows[:, :, :, x0]
    out = c0 + fx * (rows[:, :, :, x1] - c0)

    def bwd(g):
        if not x.requires_grad:
            return
        g_c0 = g * (1.0 - fx)
        g_c1 = g * fx
        g_rows = np.zeros((n, c, out_h, w), dtype=x.data.dtype)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x0), g_c0)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x1), g_c1)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), y0), g_rows * (1.0 - fy))
        np.add.at(gx, (slice(None), slice(None), y1), g_rows * fy)
        _accum(x, gx)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    An all-ignored batch yields exactly 0 loss with zero gradient.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    mask = labels != ignore_index
    bad = mask & ((labels < 0) | (labels >= k))
    if bad.any():
        idx = tuple(int(v[0]) for v in np.nonzero(bad))
        raise ValueError(f"label {labels[idx]} out of range [0, {k}) at {idx}")
    count = int(mask.sum())
    if count == 0:
        def bwd_empty(g):
            if logits.requires_grad:
                _accum(logits, np.zeros_like(logits.data))
        return _make(np.asarray(0.0, dtype=logits.dtype), (logits,), bwd_empty)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(mask, labels, 0)
    ni, hi, wi = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    picked = logp[ni, safe, hi, wi]
    loss = -(picked[mask].sum()) / count

    def bwd(g):
        if not logits.requires_grad:
            return
        grad = np.exp(logp)
        grad[ni, safe, hi, wi] -= 1.0
        grad *= mask[:, None, :, :]
        _accum(logits, grad * (g.item() / count))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
