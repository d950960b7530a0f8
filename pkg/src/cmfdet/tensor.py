"""Minimal dense tensor with reverse-mode automatic differentiation.

The engine stores values in numpy arrays and records a tape of closures so a
scalar loss can be backpropagated to every parameter. The operation set is
deliberately small: exactly what a two-stream convolutional detector with a
token-attention fusion module needs. Broadcasting is restricted to
scalar-with-tensor and bias-row-with-matrix; anything else raises
``DimensionError`` instead of silently expanding.

Training runs in float32 by default; gradient checks construct float64
tensors, which every operation preserves.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_COEF = 0.044715
_SQRT_2_OVER_PI = 0.7978845608028654


class DimensionError(ValueError):
    """Shape or axis mismatch between operands."""


class ContractError(ValueError):
    """An operation precondition was violated (not a shape problem)."""


# ---------------------------------------------------------------------------
# FLOP tracing
# ---------------------------------------------------------------------------

_trace_sink: Optional[list] = None
_trace_scope: list = []


@contextlib.contextmanager
def flop_trace():
    """Collect (scope, macs) entries for every matmul/conv executed inside.

    One multiply-accumulate is one entry unit; callers convert to FLOPs with
    whatever convention they document.
    """
    global _trace_sink
    prev = _trace_sink
    sink: list = []
    _trace_sink = sink
    try:
        yield sink
    finally:
        _trace_sink = prev


@contextlib.contextmanager
def trace_scope(name: str):
    """Label the macs recorded inside this block, e.g. 'attn_core'."""
    _trace_scope.append(name)
    try:
        yield
    finally:
        _trace_scope.pop()


def _record_macs(macs: int) -> None:
    if _trace_sink is not None:
        _trace_sink.append(("/".join(_trace_scope) or "unscoped", int(macs)))


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-d array that optionally participates in the gradient tape.

    ``data`` is a numpy array, ``grad`` (same shape) is populated by
    :func:`backward`. Tensors are treated as immutable once created; only
    parameter updates mutate ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                arr = data
            else:
                arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains NaN/Inf")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.broadcast_to(g, t.data.shape) if g.shape != t.data.shape else g
    else:
        t.grad = t.grad + g


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo the two supported broadcasts: scalar and bias row."""
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # bias row (n,) against (m, n)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    # bias-row-with-matrix, either order
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise DimensionError(f"unsupported broadcast {sa} vs {sb}")


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(g, b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(-g, b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(g * a.data, b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return Tensor._wrap(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product with the standard transpose gradient rule."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    _record_macs(m * k * n)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._wrap(out_data, (a, b), backward)


def tsum(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape))

    return Tensor._wrap(a.data.sum(dtype=a.data.dtype).reshape(()), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old_shape))

    return Tensor._wrap(out_data, (a,), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return Tensor._wrap(out_data, (a,), backward)


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (token rows, feature channels)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat0 of zero tensors")
    tails = {p.data.shape[1:] for p in parts}
    if len(tails) != 1:
        raise DimensionError(f"concat0 trailing shapes differ: {sorted(tails)}")
    sizes = [p.data.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def backward(g):
        ofs = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[ofs:ofs + s])
            ofs += s

    return Tensor._wrap(out_data, tuple(parts), backward)


def slice0(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    a = _as_tensor(a)
    n = a.data.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice0 [{start}:{stop}] out of range for extent {n}")
    out_data = a.data[start:stop].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accum(a, full)

    return Tensor._wrap(out_data, (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("slice_cols expects a 2-D tensor")
    n = a.data.shape[1]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for extent {n}")
    out_data = a.data[:, start:stop].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accum(a, full)

    return Tensor._wrap(out_data, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_cols expects 2-D tensors")
    sizes = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        ofs = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[:, ofs:ofs + s])
            ofs += s

    return Tensor._wrap(out_data, tuple(parts), backward)


def element(a, index: tuple) -> Tensor:
    """Extract one scalar entry as a taped 0-d tensor."""
    a = _as_tensor(a)
    out_data = np.array(a.data[index], dtype=a.data.dtype).reshape(())

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accum(a, full)

    return Tensor._wrap(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return Tensor._wrap(out_data, (a,), backward)


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _as_tensor(a)
    out_data = np.where(a.data > 0, a.data, a.data * np.asarray(slope, a.dtype))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * np.where(a.data > 0, 1.0, slope).astype(g.dtype))

    return Tensor._wrap(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return Tensor._wrap(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return Tensor._wrap(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return Tensor._wrap(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return Tensor._wrap(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """GELU via the tanh approximation 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_COEF * x * x * x)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_COEF * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accum(a, g * local.astype(g.dtype))

    return Tensor._wrap(out_data, (a,), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient routes to the selected operand (ties to a)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    pick_a = a.data >= b.data
    out_data = np.where(pick_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g * pick_a, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(g * ~pick_a, b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    pick_a = a.data <= b.data
    out_data = np.where(pick_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _reduce_to_shape(g * pick_a, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to_shape(g * ~pick_a, b.data.shape))

    return Tensor._wrap(out_data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; each slice sums to 1."""
    a = _as_tensor(a)
    nd = a.data.ndim
    ax = axis if axis >= 0 else axis + nd
    if not (0 <= ax < nd) or a.data.shape[ax] == 0:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=ax, keepdims=True)
            _accum(a, out_data * (g - dot))

    return Tensor._wrap(out_data, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Non-affine normalization over the last axis (ablation aid)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (xc * inv).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            n = x.shape[-1]
            gy = g
            gsum = gy.sum(axis=-1, keepdims=True)
            proj = (gy * out_data).sum(axis=-1, keepdims=True)
            gx = inv * (gy - gsum / n - out_data * proj / n)
            _accum(a, gx.astype(g.dtype))

    return Tensor._wrap(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W input with a C_out x C_in x kh x kw kernel.

    Output extents follow floor((H + 2p - k) / s) + 1; implemented as im2col
    plus one matrix product.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D input and 4-D kernel, got {x.shape}, {kernel.shape}")
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output extent < 1")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {bias.data.shape}, expected ({cout},)")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                    # (cin, ho, wo, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo).copy()
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    _record_macs(cout * cin * kh * kw * ho * wo)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out_data = out.reshape(cout, ho, wo)

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        if kernel.requires_grad:
            _accum(kernel, (g2 @ cols.T).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            if padding:
                gx = gxp[:, padding:padding + h, padding:padding + w]
            else:
                gx = gxp
            _accum(x, gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._wrap(out_data, parents, backward)


def _pool_matrix(extent: int, out: int, dtype) -> np.ndarray:
    """Row i averages source rows floor(i*extent/out) .. floor((i+1)*extent/out)."""
    m = np.zeros((out, extent), dtype=dtype)
    for i in range(out):
        start = (i * extent) // out
        stop = ((i + 1) * extent) // out
        m[i, start:stop] = 1.0 / (stop - start)
    return m


def adaptive_avg_pool(x, out_size: int) -> Tensor:
    """Average over integer partition windows floor(i*H/P)..floor((i+1)*H/P).

    Identity when the input is already P x P. Never upsamples: P must not
    exceed either spatial extent. Implemented separably as Py @ x @ Px^T.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool expects C x H x W, got {x.shape}")
    p = int(out_size)
    c, h, w = x.data.shape
    if p < 1:
        raise DimensionError(f"pool size {p} < 1")
    if p > h or p > w:
        raise DimensionError(f"pool size {p} exceeds input extents {h}x{w}")
    if p == h and p == w:
        out_data = x.data.copy()

        def backward_id(g):
            if x.requires_grad:
                _accum(x, g)

        return Tensor._wrap(out_data, (x,), backward_id)

    py = _pool_matrix(h, p, x.data.dtype)
    px = _pool_matrix(w, p, x.data.dtype)
    out_data = np.matmul(np.matmul(py[None], x.data), px.T)

    def backward(g):
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(py.T[None], g), px))

    return Tensor._wrap(out_data, (x,), backward)


def _bilinear_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Half-pixel-center interpolation: source coord (i+0.5)*src/dst - 0.5, clamped."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src), dtype=dtype)
    np.add.at(m, (np.arange(dst), lo), (1.0 - frac).astype(dtype))
    np.add.at(m, (np.arange(dst), hi), frac.astype(dtype))
    return m


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w); exact identity at same size.

    Separable form By @ x @ Bx^T with two-tap interpolation rows.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_upsample expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise DimensionError(f"target {out_h}x{out_w} smaller than source {h}x{w}")
    if out_h == h and out_w == w:
        out_data = x.data.copy()

        def backward_id(g):
            if x.requires_grad:
                _accum(x, g)

        return Tensor._wrap(out_data, (x,), backward_id)

    by = _bilinear_matrix(h, out_h, x.data.dtype)
    bx = _bilinear_matrix(w, out_w, x.data.dtype)
    out_data = np.matmul(np.matmul(by[None], x.data), bx.T)

    def backward(g):
        if x.requires_grad:
            _accum(x, np.matmul(np.matmul(by.T[None], g), bx))

    return Tensor._wrap(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, registry: Optional["ParameterRegistry"] = None) -> None:
    """Accumulate d(loss)/d(tensor) into every reachable tensor's ``grad``.

    ``loss`` must be scalar. Repeated calls accumulate until grads are
    zeroed. When a registry is given, parameters the loss never touched get
    an explicit zero gradient so optimizer steps stay well-defined.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar tensor loss")
    topo: list = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if registry is not None:
        for param in registry:
            if param.value.grad is None:
                param.value.grad = np.zeros_like(param.value.data)


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable tensor plus its optimizer momentum buffer."""

    __slots__ = ("id", "value", "momentum_buffer")

    def __init__(self, param_id: str, value: Tensor):
        self.id = param_id
        value.requires_grad = True
        self.value = value
        self.momentum_buffer: Optional[np.ndarray] = None


class ParameterRegistry:
    """Insertion-ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param_id: str, value) -> Tensor:
        if param_id in self._params:
            raise ContractError(f"duplicate parameter id {param_id!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._params[param_id] = Parameter(param_id, t)
        return t

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __contains__(self, param_id: str):
        return param_id in self._params

    def get(self, param_id: str) -> Parameter:
        return self._params[param_id]

    def ids(self):
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.grad = None

    def total_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v. Grads untouched."""
    for p in params:
        g = p.value.grad
        if g is None:
            raise ContractError(f"parameter {p.id!r} has no gradient")
        upd = g + weight_decay * p.value.data if weight_decay else g
        if momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = np.zeros_like(p.value.data)
            p.momentum_buffer = (momentum * p.momentum_buffer + upd).astype(p.value.data.dtype)
            upd = p.momentum_buffer
        p.value.data -= (lr * upd).astype(p.value.data.dtype)


# ---------------------------------------------------------------------------
# RNG and initialization
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4B7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic 64-bit generator (splitmix-style recurrence).

    state_{k} = seed + k * 0x9E3779B97F4B7C15 (mod 2^64); each output is the
    standard xor-shift-multiply finalizer of the state. The vectorized fill
    methods produce the same stream as repeated scalar draws.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def fill_u64(self, n: int) -> np.ndarray:
        ks = np.uint64(self.state) + np.uint64(_GAMMA) * np.arange(1, n + 1, dtype=np.uint64)
        self.state = (self.state + n * _GAMMA) & _MASK64
        z = ks
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0 ** -53
        return lo + (hi - lo) * u

    def fill_uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.fill_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return lo + (hi - lo) * u

    def fill_normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u1 = (self.fill_u64(m).astype(np.float64) + 1.0) * 2.0 ** -64  # (0, 1]
        u2 = self.fill_uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        pair = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return mean + std * pair[:n]

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        if hi <= lo:
            raise ContractError(f"empty integer range [{lo}, {hi})")
        return lo + int(self.uniform(0.0, float(hi - lo)))

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def child_seeds(self, n: int) -> list:
        """Independent sub-seeds, e.g. one per dataset sample."""
        return [int(v) for v in self.fill_u64(n)]


def uniform_init(rng: Rng, shape: tuple, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return rng.fill_uniform(n, -a, a).reshape(shape).astype(dtype or DEFAULT_DTYPE)
