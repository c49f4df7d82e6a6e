"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (float32 or float64). Every
operation in this module records its inputs and a backward rule when at least
one input requires gradients, so :func:`backward` can walk the graph from a
scalar root and write ``.grad`` on every reachable leaf.

Only the operations the complex U-Net needs are provided: elementwise math
with broadcasting, reductions, reshapes, concatenation, batched matmul,
softmax, index gathers/scatters (used for STFT framing and overlap-add) and
strided/dilated 2-D convolution plus its transpose.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, NumericalError, UsageError

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, parameter updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-d array node in a differentiable computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise UsageError(f"tensors must have every dimension >= 1, got shape {arr.shape}")
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _scalar_error(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, dtype=np.float64, name: str | None = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``root``.

    Gradients on reachable leaves are overwritten, never accumulated across
    calls. When ``leaves`` is given, any leaf the sweep does not reach gets a
    zero gradient and the list of gradients is returned in ``leaves`` order.
    """
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    order = _topological_order(root) if root.requires_grad else []
    for node in order:
        if node._backward is None:
            node.grad = None
    if order:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if leaves is None:
        return None
    result = []
    reached = {id(n) for n in order}
    for leaf in leaves:
        if leaf.grad is None or id(leaf) not in reached:
            leaf.grad = np.zeros_like(leaf.data)
        result.append(leaf.grad)
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a: Tensor, floor: float) -> Tensor:
    keep = a.data > floor
    return _make(np.where(keep, a.data, a.dtype.type(floor)), (a,), lambda g: (g * keep,))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape),
                _unbroadcast(np.where(mask, 0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


def prelu(x: Tensor, slope: Tensor, axis: int = 1) -> Tensor:
    """Parametric ReLU with one learnable slope per index along ``axis``."""
    shape = [1] * x.ndim
    shape[axis] = slope.size
    s = slope.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, s * x.data)

    def bw(g):
        gx = np.where(pos, g, g * s)
        gs = np.where(pos, 0, g * x.data)
        red = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
        return gx, gs.sum(axis=red).reshape(slope.shape)

    return _make(out, (x, slope), bw)


def hypot(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sqrt(a**2 + b**2) with the subgradient 0 at the origin."""
    r = np.hypot(a.data, b.data)
    safe = np.where(r > 0, r, 1)

    def bw(g):
        scale = np.where(r > 0, g / safe, 0)
        return scale * a.data, scale * b.data

    return _make(r, (a, b), bw)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise phase angle in [-pi, pi]; defined as 0 at the origin."""
    r2 = y.data * y.data + x.data * x.data
    origin = r2 == 0
    out = np.where(origin, 0, np.arctan2(y.data, x.data))
    safe = np.where(origin, 1, r2)

    def bw(g):
        gy = np.where(origin, 0, g * x.data / safe)
        gx = np.where(origin, 0, -g * y.data / safe)
        return gy, gx

    return _make(out.astype(y.dtype, copy=False), (y, x), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.ascontiguousarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % a.ndim
    out, start = [], 0
    for size in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + size)
        out.append(getitem(a, tuple(idx)))
        start += size
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-d)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, D_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(
            f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = matmul(x, transpose(weight))
    return out + bias if bias is not None else out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[..., index]`` for an integer array ``index`` of any shape.

    Repeated indices are allowed; the backward pass sums their contributions.
    """
    index = np.asarray(index, dtype=np.intp)
    length = a.shape[-1]
    lead = a.shape[:-1]
    out = a.data[..., index]

    def bw(g):
        return (_scatter_last(g, index, length, lead),)

    return _make(out, (a,), bw)


def scatter_add_last(a: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Adjoint of :func:`gather_last`: sums ``a[..., j]`` into slot ``index[j]``."""
    index = np.asarray(index, dtype=np.intp)
    lead = a.shape[: a.ndim - index.ndim]
    if a.shape[a.ndim - index.ndim:] != index.shape:
        raise UsageError(f"scatter: trailing shape {a.shape} does not match index {index.shape}")
    out = _scatter_last(a.data, index, length, lead)
    return _make(out, (a,), lambda g: (g[..., index],))


def _scatter_last(values: np.ndarray, index: np.ndarray, length: int, lead: tuple) -> np.ndarray:
    rows = int(np.prod(lead)) if lead else 1
    flat_vals = values.reshape(rows, index.size)
    offsets = (np.arange(rows, dtype=np.intp) * length)[:, None]
    flat_idx = (offsets + index.reshape(1, -1)).ravel()
    out = np.bincount(flat_idx, weights=flat_vals.ravel().astype(np.float64), minlength=rows * length)
    return out.astype(values.dtype, copy=False).reshape(*lead, length)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _int_pair(v, what: str) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    v = tuple(int(i) for i in v)
    if len(v) != 2:
        raise ConfigurationError(f"{what} must be an int or a pair, got {v}")
    return v


def normalize_padding(padding) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right) from an int, a (h, w) pair or a 4-tuple."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return p, p, p, p
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) == 4:
        return padding
    raise ConfigurationError(f"padding must have 1, 2 or 4 entries, got {padding}")


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, pad_total: int) -> int:
    return (size + pad_total - ((kernel - 1) * dilation + 1)) // stride + 1


def _windows(xp: np.ndarray, kh, kw, stride, dilation, out_h, out_w) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, out_h, out_w),
        strides=(sb, sc, sh * dilation[0], sw * dilation[1], sh * stride[0], sw * stride[1]),
        writeable=False,
    )


def _corr(xp: np.ndarray, kernel: np.ndarray, stride, dilation) -> np.ndarray:
    """Valid cross-correlation of a padded batch with (O, C, kh, kw)."""
    _, _, kh, kw = kernel.shape
    out_h = conv_output_size(xp.shape[2], kh, stride[0], dilation[0], 0)
    out_w = conv_output_size(xp.shape[3], kw, stride[1], dilation[1], 0)
    cols = _windows(xp, kh, kw, stride, dilation, out_h, out_w)
    out = np.tensordot(cols, kernel, axes=([1, 2, 3], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_adjoint(g: np.ndarray, kernel: np.ndarray, stride, dilation, full_hw) -> np.ndarray:
    """Adjoint of :func:`_corr` w.r.t. its input: scatter (B, O, Ho, Wo) back to (B, C, H, W)."""
    b, _, out_h, out_w = g.shape
    _, c, kh, kw = kernel.shape
    cols = np.tensordot(g, kernel, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    out = np.zeros((b, c) + tuple(full_hw), dtype=g.dtype)
    span_h = stride[0] * (out_h - 1) + 1
    span_w = stride[1] * (out_w - 1) + 1
    for i in range(kh):
        r0 = i * dilation[0]
        for j in range(kw):
            c0 = j * dilation[1]
            out[:, :, r0:r0 + span_h:stride[0], c0:c0 + span_w:stride[1]] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _kernel_grad(g: np.ndarray, xp: np.ndarray, kshape, stride, dilation) -> np.ndarray:
    _, _, kh, kw = kshape
    cols = _windows(xp, kh, kw, stride, dilation, g.shape[2], g.shape[3])
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O, C, kh, kw)


def _check_4d(x: Tensor, kernel: Tensor, name: str):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride=1, dilation=1, padding=0) -> Tensor:
    """Strided, dilated 2-D cross-correlation.

    ``x`` is (B, C_in, H, W), ``kernel`` is (C_out, C_in, kH, kW), ``padding``
    is an int, an (h, w) pair or per-side (top, bottom, left, right) zeros.
    """
    _check_4d(x, kernel, "conv2d")
    if x.shape[1] != kernel.shape[1]:
        raise ConfigurationError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    stride = _int_pair(stride, "stride")
    dilation = _int_pair(dilation, "dilation")
    if min(stride) < 1 or min(dilation) < 1:
        raise ConfigurationError("conv2d: stride and dilation must be >= 1")
    pt, pb, pl, pr = normalize_padding(padding)
    kh, kw = kernel.shape[2:]
    hp, wp = x.shape[2] + pt + pb, x.shape[3] + pl + pr
    if hp < (kh - 1) * dilation[0] + 1 or wp < (kw - 1) * dilation[1] + 1:
        raise ConfigurationError(
            f"conv2d: padded input {hp}x{wp} smaller than dilated kernel extent")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    out = _corr(xp, kernel.data, stride, dilation)

    def bw(g):
        gx = _corr_adjoint(g, kernel.data, stride, dilation, (hp, wp))
        gx = gx[:, :, pt:hp - pb, pl:wp - pr]
        gk = _kernel_grad(g, xp, kernel.shape, stride, dilation)
        return np.ascontiguousarray(gx), gk

    return _make(out, (x, kernel), bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride=1, padding=0, dilation=1) -> Tensor:
    """Fractionally strided convolution, the input-adjoint of :func:`conv2d`.

    ``x`` is (B, A, H, W) and ``kernel`` is (A, C, kH, kW): the same array a
    forward convolution from C to A channels would use. Output spatial size is
    ``(H - 1) * stride + (kH - 1) * dilation + 1`` minus the per-side crop.
    """
    _check_4d(x, kernel, "conv_transpose2d")
    if x.shape[1] != kernel.shape[0]:
        raise ConfigurationError(
            f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    stride = _int_pair(stride, "stride")
    dilation = _int_pair(dilation, "dilation")
    if min(stride) < 1 or min(dilation) < 1:
        raise ConfigurationError("conv_transpose2d: stride and dilation must be >= 1")
    pt, pb, pl, pr = normalize_padding(padding)
    kh, kw = kernel.shape[2:]
    full_h = (x.shape[2] - 1) * stride[0] + (kh - 1) * dilation[0] + 1
    full_w = (x.shape[3] - 1) * stride[1] + (kw - 1) * dilation[1] + 1
    if full_h - pt - pb < 1 or full_w - pl - pr < 1:
        raise ConfigurationError("conv_transpose2d: padding removes the whole output")
    full = _corr_adjoint(x.data, kernel.data, stride, dilation, (full_h, full_w))
    out = np.ascontiguousarray(full[:, :, pt:full_h - pb, pl:full_w - pr])

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        gx = _corr(gp, kernel.data, stride, dilation)
        gk = _kernel_grad(x.data, gp, kernel.shape, stride, dilation)
        return gx, gk

    return _make(out, (x, kernel), bw)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def _checked_value(out: Tensor) -> float:
    if out.data.size != 1:
        raise UsageError(f"grad_check: function must return a scalar, got shape {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericalError(f"grad_check: function value is not finite ({value})")
    return value


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the backward pass and central differences.

    The error at each coordinate is ``|a - n| / max(1, |a|, |n|)``. ``coords``
    restricts the check to some flat indices (large inputs).
    """
    if eps <= 0:
        raise UsageError("grad_check: eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    _checked_value(out)
    backward(out, [x])
    analytic = x.grad.reshape(-1)
    idx = range(base.size) if coords is None else coords
    errs = []
    flat = base.reshape(-1)
    for i in idx:
        saved = flat[i]
        flat[i] = saved + eps
        fp = _checked_value(f(Tensor(base.copy())))
        flat[i] = saved - eps
        fm = _checked_value(f(Tensor(base.copy())))
        flat[i] = saved
        numeric = (fp - fm) / (2 * eps)
        errs.append(_relative_errors(np.array(analytic[i]), np.array(numeric)))
    return float(np.max(errs)) if errs else 0.0


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Central-difference check of ``f()`` w.r.t. leaves that ``f`` closes over.

    Parameters are perturbed in place and restored. With ``max_coords`` a
    random subset of each tensor's coordinates is checked. Returns the max
    relative error per parameter (keyed by ``name`` or position).
    """
    rng = np.random.default_rng(seed)
    out = f()
    _checked_value(out)
    grads = [g.copy() for g in backward(out, params)]
    report = {}
    for pos, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        errs = []
        for i in idx:
            saved = flat[i]
            flat[i] = saved + eps
            with no_grad():
                fp = _checked_value(f())
            flat[i] = saved - eps
            with no_grad():
                fm = _checked_value(f())
            flat[i] = saved
            numeric = (fp - fm) / (2 * eps)
            errs.append(float(_relative_errors(np.array(g.reshape(-1)[i]), np.array(numeric))))
        report[p.name or str(pos)] = max(errs)
    return report
