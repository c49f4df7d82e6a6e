"""Complex-valued layers built from pairs of real tensors.

A complex activation is a :class:`ComplexTensor` holding a real and an
imaginary plane, each (B, C, H, W). Convolutions follow the two-real-kernel
construction: both output planes are computed from the channel-concatenated
input planes, one kernel per output plane.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .tensor import Tensor


class ComplexTensor:
    __slots__ = ("re", "im")

    def __init__(self, re, im):
        re = T.as_tensor(re)
        im = T.as_tensor(im, like=re)
        if re.shape != im.shape:
            raise UsageError(f"complex planes differ in shape: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def dtype(self):
        return self.re.dtype

    def planes(self) -> tuple[Tensor, Tensor]:
        return self.re, self.im

    def stacked(self) -> Tensor:
        """Channel concatenation [re | im] along axis 1."""
        return T.concat([self.re, self.im], axis=1)

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"


def cat(xs: list[ComplexTensor], axis: int = 1) -> ComplexTensor:
    return ComplexTensor(T.concat([x.re for x in xs], axis), T.concat([x.im for x in xs], axis))


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container with deterministic traversal order.

    Attributes that are trainable tensors, sub-modules, or lists of
    sub-modules are discovered in assignment order. Non-trainable state
    (batch-norm running statistics) is declared in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                    isinstance(v, Module) or v is None for v in value):
                for i, v in enumerate(value):
                    if v is not None:
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            else:
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in expected]
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        params = dict(self.named_parameters())
        for name, arr in state.items():
            arr = np.asarray(arr)
            if arr.shape != expected[name].shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != {expected[name].shape}")
            if name in params:
                params[name].data = np.ascontiguousarray(arr.astype(params[name].dtype))
            else:
                owner, attr = self._resolve(name)
                setattr(owner, attr, np.ascontiguousarray(arr.astype(getattr(owner, attr).dtype)))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        i = 0
        while i < len(parts) - 1:
            nxt = getattr(obj, parts[i])
            if isinstance(nxt, (list, tuple)):
                nxt = nxt[int(parts[i + 1])]
                i += 1
            obj = nxt
            i += 1
        return obj, parts[-1]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    kind = np.float32 if np.dtype(dtype) == np.float32 else np.float64
    u = rng.random(shape, dtype=kind)
    return ((2 * u - 1) * bound).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# complex convolution
# ---------------------------------------------------------------------------

def _plane_pair(out: Tensor, channels: int) -> ComplexTensor:
    re, im = T.split(out, [channels, channels], axis=1)
    return ComplexTensor(re, im)


def complex_conv(x: ComplexTensor, kernel_re: Tensor, kernel_im: Tensor, stride=1, dilation=1,
                 padding=0, bias_re: Tensor | None = None, bias_im: Tensor | None = None
                 ) -> ComplexTensor:
    """Both output planes are real convolutions of the stacked input planes.

    Kernels are (C_out, 2*C_in, kH, kW).
    """
    if kernel_re.shape != kernel_im.shape:
        raise ConfigurationError("complex_conv: real/imaginary kernels differ in shape")
    if kernel_re.shape[1] != 2 * x.shape[1]:
        raise ConfigurationError(
            f"complex_conv: input has {x.shape[1]} complex channels, kernel expects "
            f"{kernel_re.shape[1] // 2}")
    c_out = kernel_re.shape[0]
    kernel = T.concat([kernel_re, kernel_im], axis=0)
    out = _plane_pair(T.conv2d(x.stacked(), kernel, stride, dilation, padding), c_out)
    return _add_bias(out, bias_re, bias_im)


def complex_conv_transpose(x: ComplexTensor, kernel_re: Tensor, kernel_im: Tensor, stride=1,
                           padding=0, dilation=1, bias_re: Tensor | None = None,
                           bias_im: Tensor | None = None) -> ComplexTensor:
    """Transposed counterpart of :func:`complex_conv`; kernels are (2*C_in, C_out, kH, kW)."""
    if kernel_re.shape != kernel_im.shape:
        raise ConfigurationError("complex_conv_transpose: kernels differ in shape")
    if kernel_re.shape[0] != 2 * x.shape[1]:
        raise ConfigurationError(
            f"complex_conv_transpose: input has {x.shape[1]} complex channels, kernel expects "
            f"{kernel_re.shape[0] // 2}")
    c_out = kernel_re.shape[1]
    kernel = T.concat([kernel_re, kernel_im], axis=1)
    out = T.conv_transpose2d(x.stacked(), kernel, stride, padding, dilation)
    return _add_bias(_plane_pair(out, c_out), bias_re, bias_im)


def _add_bias(x: ComplexTensor, bias_re, bias_im) -> ComplexTensor:
    if bias_re is None:
        return x
    shape = (1, -1, 1, 1)
    return ComplexTensor(x.re + T.reshape(bias_re, shape), x.im + T.reshape(bias_im, shape))


def same_halving_padding(size_kernel: int, dilation: int) -> tuple[int, int]:
    """Per-side padding making a stride-2 conv output exactly half the input."""
    total = (size_kernel - 1) * dilation - 1
    return total // 2, total - total // 2


class ComplexConv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size=1, stride=1, dilation=1,
                 padding=0, bias: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kh, kw = T._int_pair(kernel_size, "kernel_size")
        shape = (out_channels, 2 * in_channels, kh, kw)
        fan_in = 2 * in_channels * kh * kw
        self.kernel_re = T.parameter(he_uniform(rng, shape, fan_in, dtype), dtype)
        self.kernel_im = T.parameter(he_uniform(rng, shape, fan_in, dtype), dtype)
        if bias:
            self.bias_re = T.parameter(np.zeros(out_channels), dtype)
            self.bias_im = T.parameter(np.zeros(out_channels), dtype)
        else:
            self.bias_re = self.bias_im = None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv(x, self.kernel_re, self.kernel_im, self.stride, self.dilation,
                            self.padding, self.bias_re, self.bias_im)


class ComplexConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size=4, stride=2, padding=1,
                 bias: bool = False, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kh, kw = T._int_pair(kernel_size, "kernel_size")
        sh, sw = T._int_pair(stride, "stride")
        shape = (2 * in_channels, out_channels, kh, kw)
        # each output sees about (kh/sh)*(kw/sw) taps per input channel
        fan_in = max(1, 2 * in_channels * kh * kw // (sh * sw))
        self.kernel_re = T.parameter(he_uniform(rng, shape, fan_in, dtype), dtype)
        self.kernel_im = T.parameter(he_uniform(rng, shape, fan_in, dtype), dtype)
        if bias:
            self.bias_re = T.parameter(np.zeros(out_channels), dtype)
            self.bias_im = T.parameter(np.zeros(out_channels), dtype)
        else:
            self.bias_re = self.bias_im = None
        self.stride, self.padding = stride, padding

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv_transpose(x, self.kernel_re, self.kernel_im, self.stride,
                                      self.padding, 1, self.bias_re, self.bias_im)


# ---------------------------------------------------------------------------
# complex batch normalisation
# ---------------------------------------------------------------------------

class ComplexBatchNorm2d(Module):
    """Per-channel whitening of the joint (re, im) distribution.

    ``mode="whiten"`` uses the inverse square root of the 2x2 covariance;
    ``mode="split"`` normalises each plane independently.
    """

    _buffers = ("running_mean", "running_cov")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 mode: str = "whiten", dtype=np.float64):
        super().__init__()
        if mode not in ("whiten", "split"):
            raise ConfigurationError(f"unknown batch-norm mode {mode!r}")
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        self.gamma_rr = T.parameter(np.ones(channels), dtype)
        self.gamma_ri = T.parameter(np.zeros(channels), dtype)
        self.gamma_ir = T.parameter(np.zeros(channels), dtype)
        self.gamma_ii = T.parameter(np.ones(channels), dtype)
        self.beta_re = T.parameter(np.zeros(channels), dtype)
        self.beta_im = T.parameter(np.zeros(channels), dtype)
        self.running_mean = np.zeros((2, channels), dtype=dtype)
        # rows: V_rr, V_ii, V_ri
        self.running_cov = np.stack([np.ones(channels), np.ones(channels),
                                     np.zeros(channels)]).astype(dtype)

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return complex_batchnorm(x, self, self.training)


def _per_channel(v) -> Tensor:
    return T.reshape(T.as_tensor(v), (1, -1, 1, 1))


def complex_batchnorm(x: ComplexTensor, state: ComplexBatchNorm2d, training: bool) -> ComplexTensor:
    if x.shape[0] == 0:
        raise UsageError("complex_batchnorm: empty batch")
    axes = (0, 2, 3)
    eps = state.eps
    if training:
        mu_r = T.mean(x.re, axes, keepdims=True)
        mu_i = T.mean(x.im, axes, keepdims=True)
        cr, ci = x.re - mu_r, x.im - mu_i
        v_rr = T.mean(cr * cr, axes, keepdims=True)
        v_ii = T.mean(ci * ci, axes, keepdims=True)
        v_ri = T.mean(cr * ci, axes, keepdims=True)
        m = state.momentum
        with T.no_grad():
            state.running_mean = ((1 - m) * state.running_mean + m * np.stack(
                [mu_r.data.reshape(-1), mu_i.data.reshape(-1)])).astype(state.running_mean.dtype)
            state.running_cov = ((1 - m) * state.running_cov + m * np.stack(
                [v_rr.data.reshape(-1), v_ii.data.reshape(-1), v_ri.data.reshape(-1)])
            ).astype(state.running_cov.dtype)
    else:
        dt = x.dtype
        mu_r = _per_channel(state.running_mean[0].astype(dt))
        mu_i = _per_channel(state.running_mean[1].astype(dt))
        cr, ci = x.re - mu_r, x.im - mu_i
        v_rr = _per_channel(state.running_cov[0].astype(dt))
        v_ii = _per_channel(state.running_cov[1].astype(dt))
        v_ri = _per_channel(state.running_cov[2].astype(dt))

    v_rr = v_rr + eps
    v_ii = v_ii + eps
    if state.mode == "split":
        nr = cr / T.sqrt(v_rr)
        ni = ci / T.sqrt(v_ii)
    else:
        # closed-form inverse square root of [[v_rr, v_ri], [v_ri, v_ii]]
        s = T.sqrt(v_rr * v_ii - v_ri * v_ri)
        t = T.sqrt(v_rr + v_ii + 2.0 * s)
        inv = 1.0 / (s * t)
        w_rr = (v_ii + s) * inv
        w_ii = (v_rr + s) * inv
        w_ri = -v_ri * inv
        nr = w_rr * cr + w_ri * ci
        ni = w_ri * cr + w_ii * ci
    g = state
    out_r = _per_channel(g.gamma_rr) * nr + _per_channel(g.gamma_ri) * ni + _per_channel(g.beta_re)
    out_i = _per_channel(g.gamma_ir) * nr + _per_channel(g.gamma_ii) * ni + _per_channel(g.beta_im)
    return ComplexTensor(out_r, out_i)


# ---------------------------------------------------------------------------
# activation and attention
# ---------------------------------------------------------------------------

class CPReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, dtype=np.float64):
        super().__init__()
        self.slope_re = T.parameter(np.full(channels, init), dtype)
        self.slope_im = T.parameter(np.full(channels, init), dtype)

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return cprelu(x, self.slope_re, self.slope_im)


def cprelu(x: ComplexTensor, slope_re: Tensor, slope_im: Tensor) -> ComplexTensor:
    return ComplexTensor(T.prelu(x.re, slope_re, axis=1), T.prelu(x.im, slope_im, axis=1))


class PlaneAttention(Module):
    """Single-head scaled dot-product self-attention over the H*W positions of one plane."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        qk = max(1, channels // 8)
        bound = 1.0 / math.sqrt(channels)
        self.wq = T.parameter(rng.uniform(-bound, bound, (qk, channels)), dtype)
        self.bq = T.parameter(np.zeros(qk), dtype)
        self.wk = T.parameter(rng.uniform(-bound, bound, (qk, channels)), dtype)
        self.bk = T.parameter(np.zeros(qk), dtype)
        self.wv = T.parameter(rng.uniform(-bound, bound, (channels, channels)), dtype)
        self.bv = T.parameter(np.zeros(channels), dtype)
        self.gamma = T.parameter(np.zeros(1), dtype)

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, c, h, w = x.shape
        flat = T.reshape(x, (b, c, h * w))
        q = T.matmul(self.wq, flat) + T.reshape(self.bq, (-1, 1))  # (B, qk, N)
        k = T.matmul(self.wk, flat) + T.reshape(self.bk, (-1, 1))
        v = T.matmul(self.wv, flat) + T.reshape(self.bv, (-1, 1))  # (B, C, N)
        scores = T.matmul(T.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(q.shape[1]))
        attn = T.softmax(scores, axis=-1)  # rows: query positions
        attended = T.matmul(v, T.transpose(attn, (0, 2, 1)))  # (B, C, N)
        out = x + self.gamma * T.reshape(attended, (b, c, h, w))
        return (out, attn) if return_weights else out


class ComplexSelfAttention(Module):
    """Independent attention on the real and the imaginary plane."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.re = PlaneAttention(channels, rng, dtype)
        self.im = PlaneAttention(channels, rng, dtype)

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return complex_self_attention(x, self)


def complex_self_attention(x: ComplexTensor, attn: ComplexSelfAttention) -> ComplexTensor:
    return ComplexTensor(attn.re(x.re), attn.im(x.im))
