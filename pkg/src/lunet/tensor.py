"""Dense n-d tensors with reverse-mode automatic differentiation.

Implements exactly the operations the segmentation networks need: 2-d/3-d
cross-correlation, ReLU, factor-2 max pooling and nearest-neighbour
upsampling, channel concatenation, sigmoid/softmax heads, channel-wise
dropout, optional per-channel instance normalization, and soft-Dice /
cross-entropy losses.  Values live in contiguous numpy arrays; float64 is
the default so gradient checks can be tight, float32 is opt-in.
"""

from __future__ import annotations

import contextlib
import struct
from math import prod
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class GraphError(RuntimeError):
    """Backward-pass misuse (non-scalar root, or backward on a consumed graph)."""


class TensorFileError(IOError):
    """Malformed or truncated tensor file."""


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    DEFAULT_DTYPE = dt.type


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient and autodiff bookkeeping.

    Data is immutable by convention once the tensor participates in a
    graph; only ``grad`` accumulates.  Leaf tensors created with
    ``requires_grad=True`` receive ``grad`` after ``backward()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` of every reachable leaf with ``requires_grad``.

        The root must be scalar.  The graph is released afterwards; calling
        backward a second time without re-running the forward pass raises
        ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar root, got shape {self.data.shape}")
        if self._consumed:
            raise GraphError("backward called twice on the same graph; rerun the forward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self:
                node._consumed = True
            # release the graph so intermediate values can be collected
            node._parents = ()
            node._backward = None
        self._consumed = True


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _from_op(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise / reduction primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _from_op(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _from_op(a.data * c, (a,), bw, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, float(g)))

    return _from_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bw, "sum")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * y * (1.0 - y))

    return _from_op(y, (a,), bw, "sigmoid")


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax across the channel axis (axis 1)."""
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(a, y * (g - dot))

    return _from_op(y, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution

def _check_spatial(ndim: int) -> int:
    d = ndim - 2
    if d not in (2, 3):
        raise ShapeError(f"expected 2 or 3 spatial dimensions, got {d}")
    return d


def _im2col(x: np.ndarray, k: int, padding: int, stride: int) -> tuple[np.ndarray, tuple]:
    """Unfold (B, C, *S) into (B, C*k^d, P) patch columns; returns (cols, out_spatial)."""
    d = x.ndim - 2
    if padding:
        x = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * d)
    win = sliding_window_view(x, (k,) * d, axis=tuple(range(2, 2 + d)))
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    out_spatial = win.shape[2:2 + d]
    b, c = x.shape[:2]
    p = prod(out_spatial)
    cols = win.reshape(b, c, p, k ** d).transpose(0, 1, 3, 2).reshape(b, c * k ** d, p)
    return np.ascontiguousarray(cols), out_spatial


def _conv_out_spatial(s: int, k: int, padding: int, stride: int) -> int:
    return (s + 2 * padding - k) // stride + 1


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_spatial: tuple,
                     stride: int, padding: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input: dilate, pad, full-correlate with flipped kernels."""
    d = g.ndim - 2
    k = w.shape[2]
    cout, cin = w.shape[:2]
    b = g.shape[0]
    if stride > 1:
        dil = tuple((s - 1) * stride + 1 for s in g.shape[2:])
        gd = np.zeros(g.shape[:2] + dil, dtype=g.dtype)
        gd[(slice(None), slice(None)) + (slice(None, None, stride),) * d] = g
    else:
        gd = g
    rems = tuple((in_spatial[i] + 2 * padding - k) % stride for i in range(d))
    pads = [(0, 0), (0, 0)] + [(k - 1 - padding, k - 1 - padding + rems[i]) for i in range(d)]
    gp = np.pad(gd, pads)
    wf = np.flip(w, axis=tuple(range(2, 2 + d)))
    wf = np.ascontiguousarray(wf.transpose((1, 0) + tuple(range(2, 2 + d))))
    cols, _ = _im2col(gp, k, 0, 1)
    gx = np.matmul(wf.reshape(cin, cout * k ** d), cols)
    return gx.reshape(b, cin, *in_spatial)


def conv(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (B, Cin, *S) with kernels ``w`` (Cout, Cin, *k) plus bias.

    Output spatial extent per axis is ``(S + 2*padding - k) // stride + 1``.
    Differentiable w.r.t. input, weights, and bias.
    """
    d = _check_spatial(x.data.ndim)
    if w.data.ndim != 2 + d:
        raise ShapeError(f"kernel rank {w.data.ndim} does not match {d}-d input")
    k = w.data.shape[2]
    if any(ks != k for ks in w.data.shape[2:]):
        raise ShapeError(f"kernel must be square, got spatial dims {w.data.shape[2:]}")
    cout, cin = w.data.shape[:2]
    if x.data.shape[1] != cin:
        raise ShapeError(f"input channels: got {x.data.shape[1]}, kernel expects {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"bias: got shape {b.data.shape}, expected ({cout},)")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if not 0 <= padding <= k - 1:
        raise ShapeError(f"padding must be in [0, {k - 1}], got {padding}")
    for i, s in enumerate(x.data.shape[2:]):
        if s + 2 * padding - k < 0:
            raise ShapeError(f"spatial axis {i}: extent {s} too small for kernel {k} with padding {padding}")

    cols, out_spatial = _im2col(x.data, k, padding, stride)
    batch = x.data.shape[0]
    w2 = w.data.reshape(cout, cin * k ** d)
    out = np.matmul(w2, cols) + b.data.reshape(1, cout, 1)
    out = out.reshape(batch, cout, *out_spatial)

    def bw(g):
        g2 = g.reshape(batch, cout, -1)
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=(0, 2)))
        if w.requires_grad:
            # recompute columns instead of caching them: keeps memory at O(input)
            c2, _ = _im2col(x.data, k, padding, stride)
            gw = np.matmul(g2, c2.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g, w.data, x.data.shape[2:], stride, padding))

    return _from_op(out, (x, w, b), bw, "conv")


# ---------------------------------------------------------------------------
# pooling / upsampling / concatenation

def maxpool2(x: Tensor) -> Tensor:
    """Halve every spatial extent, taking the max of each 2^d window."""
    d = _check_spatial(x.data.ndim)
    for i, s in enumerate(x.data.shape[2:]):
        if s % 2:
            raise ShapeError(f"maxpool2: spatial axis {i} has odd extent {s}")
    b, c = x.data.shape[:2]
    half = tuple(s // 2 for s in x.data.shape[2:])
    split = (b, c) + tuple(t for s in half for t in (s, 2))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(d)) + tuple(3 + 2 * i for i in range(d))
    win = x.data.reshape(split).transpose(perm).reshape(b, c, *half, 2 ** d)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    inv = np.argsort(perm)

    def bw(g):
        if x.requires_grad:
            wg = np.zeros((b, c) + half + (2 ** d,), dtype=g.dtype)
            np.put_along_axis(wg, idx[..., None], g[..., None], axis=-1)
            gx = wg.reshape((b, c) + half + (2,) * d).transpose(inv).reshape(x.data.shape)
            _accumulate(x, np.ascontiguousarray(gx))

    return _from_op(np.ascontiguousarray(out), (x,), bw, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double every spatial extent by repeating each voxel 2^d times."""
    d = _check_spatial(x.data.ndim)
    out = x.data
    for axis in range(2, 2 + d):
        out = np.repeat(out, 2, axis=axis)
    b, c = x.data.shape[:2]
    split = (b, c) + tuple(t for s in x.data.shape[2:] for t in (s, 2))
    sum_axes = tuple(3 + 2 * i for i in range(d))

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(split).sum(axis=sum_axes))

    return _from_op(out, (x,), bw, "upsample2")


def concat_channels(parts) -> Tensor:
    """Stack tensors along the channel axis, preserving operand order."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_channels: no operands")
    ref = parts[0].data.shape
    for i, p in enumerate(parts[1:], start=1):
        s = p.data.shape
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: operand {i} non-channel dims {s} vs {ref}")
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, np.ascontiguousarray(g[:, lo:hi]))

    return _from_op(out, parts, bw, "concat")


# ---------------------------------------------------------------------------
# normalization / dropout

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial axes, with affine scale/shift."""
    d = _check_spatial(x.data.ndim)
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"instance_norm: affine params must have shape ({c},)")
    axes = tuple(range(2, 2 + d))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x.data - mu) / s
    shape1 = (1, c) + (1,) * d
    out = xhat * gamma.data.reshape(shape1) + beta.data.reshape(shape1)

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0,) + axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0,) + axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(shape1)
            m1 = gh.mean(axis=axes, keepdims=True)
            m2 = (gh * xhat).mean(axis=axes, keepdims=True)
            _accumulate(x, (gh - m1 - xhat * m2) / s)

    return _from_op(out, (x, gamma, beta), bw, "instance_norm")


def channel_dropout(x: Tensor, factor: np.ndarray) -> Tensor:
    """Multiply each (sample, channel) feature map by a fixed factor.

    ``factor`` has shape (B, C): zero for dropped channels, 1/(1-p) for
    survivors.  The factor is a constant w.r.t. differentiation.
    """
    d = _check_spatial(x.data.ndim)
    b, c = x.data.shape[:2]
    if factor.shape != (b, c):
        raise ShapeError(f"channel_dropout: factor shape {factor.shape}, expected ({b}, {c})")
    f = factor.reshape((b, c) + (1,) * d)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g * f)

    return _from_op(x.data * f, (x,), bw, "channel_dropout")


# ---------------------------------------------------------------------------
# losses

def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf values")


def soft_dice_loss(pred: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """1 - soft Dice, averaged over the channel axis.

    Per channel c: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).
    """
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"soft_dice_loss: shapes {pred.data.shape} vs {target.data.shape}")
    _check_finite("prediction", pred.data)
    _check_finite("target", target.data)
    c = pred.data.shape[1]
    axes = (0,) + tuple(range(2, pred.data.ndim))
    inter = (pred.data * target.data).sum(axis=axes)
    num = 2.0 * inter + eps
    den = pred.data.sum(axis=axes) + target.data.sum(axis=axes) + eps
    loss = np.asarray(1.0 - (num / den).mean(), dtype=pred.data.dtype)

    shape1 = (1, c) + (1,) * (pred.data.ndim - 2)

    def bw(g):
        gf = float(g)
        if pred.requires_grad:
            dp = -(2.0 * target.data * den.reshape(shape1) - num.reshape(shape1)) / (c * den.reshape(shape1) ** 2)
            _accumulate(pred, gf * dp)
        if target.requires_grad:
            dt = -(2.0 * pred.data * den.reshape(shape1) - num.reshape(shape1)) / (c * den.reshape(shape1) ** 2)
            _accumulate(target, gf * dt)

    return _from_op(loss, (pred, target), bw, "soft_dice")


def cross_entropy_loss(pred: Tensor, target: Tensor, eps: float = 1e-12) -> Tensor:
    """Cross-entropy against a one-hot target, averaged over batch and voxels.

    ``pred`` holds probabilities (post softmax/sigmoid).  Single-channel
    predictions use the binary form.
    """
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"cross_entropy_loss: shapes {pred.data.shape} vs {target.data.shape}")
    _check_finite("prediction", pred.data)
    _check_finite("target", target.data)
    b = pred.data.shape[0]
    voxels = prod(pred.data.shape[2:])
    n = b * voxels
    p = pred.data
    t = target.data
    if pred.data.shape[1] == 1:
        val = -(t * np.log(p + eps) + (1.0 - t) * np.log(1.0 - p + eps)).sum() / n

        def bw(g):
            if pred.requires_grad:
                _accumulate(pred, float(g) * (-(t / (p + eps)) + (1.0 - t) / (1.0 - p + eps)) / n)
    else:
        val = -(t * np.log(p + eps)).sum() / n

        def bw(g):
            if pred.requires_grad:
                _accumulate(pred, float(g) * (-(t / (p + eps))) / n)

    return _from_op(np.asarray(val, dtype=p.dtype), (pred, target), bw, "cross_entropy")


def loss(pred: Tensor, target: Tensor, kind: str) -> Tensor:
    """Dispatch on loss kind: ``soft_dice`` or ``cross_entropy``."""
    if kind == "soft_dice":
        return soft_dice_loss(pred, target)
    if kind == "cross_entropy":
        return cross_entropy_loss(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# tensor file format: little-endian "LUTN" header + raw values

_MAGIC = b"LUTN"
_DTYPE_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_tensor(path, array: np.ndarray) -> None:
    """Write an array as magic, u8 dtype code, u8 rank, u64 extents, raw values."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODE:
        arr = arr.astype(DEFAULT_DTYPE)
    code = _DTYPE_CODE[arr.dtype]
    head = _MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    le = arr.astype(_CODE_DTYPE[code], copy=False)
    Path(path).write_bytes(head + le.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor file; raises TensorFileError on bad magic or truncation."""
    buf = Path(path).read_bytes()
    if len(buf) < 6:
        raise TensorFileError(f"{path}: truncated header")
    if buf[:4] != _MAGIC:
        raise TensorFileError(f"{path}: bad magic {buf[:4]!r}, expected {_MAGIC!r}")
    code, rank = struct.unpack("<BB", buf[4:6])
    if code not in _CODE_DTYPE:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    need = 6 + 8 * rank
    if len(buf) < need:
        raise TensorFileError(f"{path}: truncated extents")
    extents = struct.unpack(f"<{rank}Q", buf[6:need])
    dt = _CODE_DTYPE[code]
    nbytes = prod(extents) * dt.itemsize if rank else dt.itemsize
    if len(buf) != need + nbytes:
        raise TensorFileError(f"{path}: expected {need + nbytes} bytes, found {len(buf)}")
    arr = np.frombuffer(buf[need:], dtype=dt)
    if rank:
        arr = arr.reshape(extents)
    return arr.astype(dt.newbyteorder("="))
