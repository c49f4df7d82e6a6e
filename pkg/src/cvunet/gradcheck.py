"""Finite-difference gradient checks for every layer and the reduced model.

Each check contracts the layer output with a fixed random tensor, so the
scalar under test depends on every output element, and compares the
backward pass against central differences in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import complex_nn as cnn
from . import tensor as T
from .complex_nn import ComplexTensor
from .dsp import EncodedInput, StftConfig, decode, encode, istft, stft
from .model import ModelConfig, build
from .objective import LossWeights, composite_loss

LAYER_TOL = 1e-4
MODEL_TOL = 5e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<32} max rel err {self.error:.2e}  (tol {self.tolerance:.0e}, {self.seconds:.1f}s)"


def _complex_input(rng, shape) -> ComplexTensor:
    return ComplexTensor(T.Tensor(rng.standard_normal(shape)), T.Tensor(rng.standard_normal(shape)))


def _projection(rng, like: ComplexTensor):
    r_re = rng.standard_normal(like.shape)
    r_im = rng.standard_normal(like.shape)
    return lambda out: T.tsum(out.re * r_re) + T.tsum(out.im * r_im)


def _check_layer(name: str, layer: Callable[[ComplexTensor], ComplexTensor], params, x: ComplexTensor,
                 rng, max_coords: int = 64) -> CheckResult:
    """Check input and parameter gradients of one complex layer."""
    t0 = time.time()
    x.re.requires_grad = x.im.requires_grad = True
    project = _projection(rng, layer(x))
    leaves = list(params) + [x.re, x.im]
    for i, p in enumerate(leaves):
        p.name = p.name or f"leaf{i}"
    errs = T.grad_check_params(lambda: project(layer(x)), leaves, max_coords=max_coords, seed=1)
    return CheckResult(name, max(errs.values()), LAYER_TOL, time.time() - t0)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    dt = np.float64
    results = []

    conv = cnn.ComplexConv2d(2, 3, 4, stride=2, dilation=2, padding=(2, 3, 2, 3), bias=True, rng=rng, dtype=dt)
    conv.bias_re.data = rng.standard_normal(3)
    results.append(_check_layer("ComplexConv2d", conv, conv.parameters(), _complex_input(rng, (2, 2, 8, 8)), rng))

    convt = cnn.ComplexConvTranspose2d(3, 2, 4, stride=2, padding=1, bias=True, rng=rng, dtype=dt)
    results.append(_check_layer("ComplexConvTranspose2d", convt, convt.parameters(),
                                _complex_input(rng, (2, 3, 4, 4)), rng))

    for mode in ("whiten", "split"):
        bn = cnn.ComplexBatchNorm2d(3, mode=mode, dtype=dt)
        for p in bn.parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        x = _complex_input(rng, (3, 3, 4, 4))
        # correlated planes exercise the off-diagonal covariance terms
        x.im = T.Tensor(x.im.data + 0.5 * x.re.data)
        results.append(_check_layer(f"ComplexBatchNorm2d[{mode}]", bn, bn.parameters(), x, rng))
        bn.eval()
        results.append(_check_layer(f"ComplexBatchNorm2d[{mode},eval]", bn, bn.parameters(),
                                    _complex_input(rng, (2, 3, 4, 4)), rng))

    act = cnn.CPReLU(3, dtype=dt)
    act.slope_re.data = rng.uniform(0.1, 0.5, 3)
    x = _complex_input(rng, (2, 3, 4, 4))
    # keep inputs away from the kink at zero
    x.re.data += np.sign(x.re.data) * 0.1
    x.im.data += np.sign(x.im.data) * 0.1
    results.append(_check_layer("CPReLU", act, act.parameters(), x, rng))

    sa = cnn.ComplexSelfAttention(8, rng, dt)
    # nonzero residual gain so the projections receive gradient
    sa.re.gamma.data = np.array([0.7])
    sa.im.gamma.data = np.array([-0.4])
    for p in sa.parameters():
        if p.size > 1:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    results.append(_check_layer("ComplexSelfAttention", sa, sa.parameters(),
                                _complex_input(rng, (2, 8, 3, 4)), rng))
    return results


def dsp_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = StftConfig(64, 16, 16)
    results = []
    r = rng.standard_normal((2, cfg.n_frames, cfg.n_bins))

    t0 = time.time()
    err = T.grad_check(lambda x: T.tsum(stft(x, cfg).real * r) + T.tsum(stft(x, cfg).imag * r[::-1]),
                       rng.standard_normal(cfg.segment_length), coords=range(0, cfg.segment_length, 7))
    results.append(CheckResult("stft", err, LAYER_TOL, time.time() - t0))

    t0 = time.time()
    w = rng.standard_normal(cfg.segment_length)
    planes = rng.standard_normal((2, cfg.n_frames, cfg.n_bins))

    def synth(p):
        from .dsp import ComplexSpectrogram
        return T.tsum(istft(ComplexSpectrogram(p[0], p[1], cfg)) * w)

    err = T.grad_check(synth, planes, coords=range(0, planes.size, 11))
    results.append(CheckResult("istft", err, LAYER_TOL, time.time() - t0))

    for mode in ("ReIm", "MaPh"):
        t0 = time.time()
        q = rng.standard_normal((2, cfg.n_frames, cfg.n_bins))

        def roundtrip(p, mode=mode):
            from .dsp import ComplexSpectrogram
            enc = encode(ComplexSpectrogram(p[0], p[1], cfg), mode)
            dec = decode(EncodedInput(enc.channels * 1.0, mode), cfg)
            return T.tsum(enc.channels * np.stack([q[0], q[1]])) + T.tsum(dec.real * q[1])

        err = T.grad_check(roundtrip, planes, coords=range(0, planes.size, 13))
        results.append(CheckResult(f"encode/decode[{mode}]", err, LAYER_TOL, time.time() - t0))
    return results


def model_check(seed: int = 0, coords_per_param: int = 2, variational: bool = True,
                self_attention: bool = True, encoding: str = "MaPh") -> CheckResult:
    """End-to-end check of the reduced model under the composite loss."""
    t0 = time.time()
    cfg = ModelConfig.reduced(variational=variational, self_attention=self_attention, encoding=encoding)
    model = build(cfg, seed, np.float64)
    rng = np.random.default_rng(seed + 5)
    for p in model.parameters():
        if p.size == 1:  # attention gains start at zero
            p.data = np.full(1, 0.3)
    model.train()
    stft_cfg = cfg.stft
    clean = 0.3 * rng.standard_normal((2, stft_cfg.segment_length))
    noisy = clean + 0.1 * rng.standard_normal(clean.shape)
    with T.no_grad():
        x = encode(stft(T.Tensor(noisy), stft_cfg), cfg.encoding).channels
        target = stft(T.Tensor(clean), stft_cfg)
    weights = LossWeights(beta=1.0)

    def loss():
        out, latent = model(x, np.random.default_rng(123))
        return composite_loss(EncodedInput(out, cfg.encoding), target, clean, latent, weights).total_tensor

    params = model.parameters()
    for name, p in model.named_parameters():
        p.name = name
    errs = T.grad_check_params(loss, params, eps=1e-6, max_coords=coords_per_param, seed=seed)
    return CheckResult(f"reduced CVU-Net end-to-end[{cfg.variant_name}]", max(errs.values()),
                       MODEL_TOL, time.time() - t0)


SUITES = {
    "complex_nn": layer_checks,
    "dsp": dsp_checks,
    "model": lambda seed=0: [model_check(seed)],
}


def run(module: str | None = None, seed: int = 0) -> list[CheckResult]:
    names = list(SUITES) if module is None else [module]
    results = []
    for n in names:
        results.extend(SUITES[n](seed))
    return results
