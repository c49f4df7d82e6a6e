"""Training objective and the SI-SDR metric.

The composite loss adds three spectral MSE terms (magnitude, real and
imaginary planes), ``beta`` times the KL divergence of the two latent
Gaussians, and subtracts the waveform SI-SDR in dB.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dsp import ComplexSpectrogram, EncodedInput, decode, istft
from .errors import ConfigurationError, UsageError
from .model import LatentGaussianPair
from .tensor import Tensor

SISDR_CAP_DB = 100.0


@dataclass(frozen=True)
class LossWeights:
    w_mag: float = 1.0
    w_real: float = 1.0
    w_imag: float = 1.0
    w_sisdr: float = 1.0
    beta: float = 10.0
    mag_loss_scale: str = "linear"

    def __post_init__(self):
        for name in ("w_mag", "w_real", "w_imag", "w_sisdr", "beta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.mag_loss_scale not in ("linear", "log"):
            raise ConfigurationError("mag_loss_scale must be 'linear' or 'log'")


@dataclass
class LossBreakdown:
    mse_mag: float
    mse_real: float
    mse_imag: float
    kl: float
    sisdr_db: float
    total: float
    total_tensor: Tensor | None = None

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("mse_mag", "mse_real", "mse_imag", "kl", "sisdr_db", "total")}


def mse(y_hat, y) -> Tensor:
    y_hat, y = T.as_tensor(y_hat), T.as_tensor(y)
    if y_hat.shape != y.shape:
        raise UsageError(f"mse: shapes differ {y_hat.shape} vs {y.shape}")
    d = y_hat - y
    return T.mean(d * d)


def _plane_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    # per sample: 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)
    return 0.5 * T.tsum(mu * mu + T.exp(logvar) - logvar - 1.0, axis=-1)


def kl_divergence(g: LatentGaussianPair) -> Tensor:
    """Mean over both planes (and over the batch) of KL(N(mu, sigma^2) || N(0, I))."""
    per_sample = 0.5 * (_plane_kl(g.mu_re, g.logvar_re) + _plane_kl(g.mu_im, g.logvar_im))
    return T.mean(per_sample)


def si_sdr(y_hat, y) -> Tensor:
    """Scale-invariant SDR in dB over the last axis, averaged over leading axes.

    Values are capped to +-100 dB; a capped entry contributes no gradient.
    """
    y_hat, y = T.as_tensor(y_hat), T.as_tensor(y)
    if y_hat.shape != y.shape:
        raise UsageError(f"si_sdr: shapes differ {y_hat.shape} vs {y.shape}")
    ref_energy = T.tsum(y * y, axis=-1, keepdims=True)
    if np.any(ref_energy.data == 0):
        raise UsageError("si_sdr: reference signal has zero energy")
    alpha = T.tsum(y_hat * y, axis=-1, keepdims=True) / ref_energy
    target = alpha * y
    residual = target - y_hat
    num = T.tsum(target * target, axis=-1)
    den = T.tsum(residual * residual, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = 10 * np.log10(num.data.astype(np.float64)) - 10 * np.log10(den.data.astype(np.float64))
    raw = np.where(np.isnan(raw), -np.inf, raw)
    ok = np.abs(raw) < SISDR_CAP_DB
    capped = np.clip(raw, -SISDR_CAP_DB, SISDR_CAP_DB).astype(num.dtype)
    safe_num = T.where(ok, num, 1.0)
    safe_den = T.where(ok, den, 1.0)
    db = (10.0 / np.log(10.0)) * (T.log(safe_num) - T.log(safe_den))
    return T.mean(T.where(ok, db, capped))


def si_sdr_score(y_hat: np.ndarray, y: np.ndarray) -> float:
    """SI-SDR of one signal pair as a float (evaluation helper)."""
    with T.no_grad():
        return float(si_sdr(np.asarray(y_hat, np.float64), np.asarray(y, np.float64)).data)


def composite_loss(output: EncodedInput, target: ComplexSpectrogram, target_wave,
                   g: LatentGaussianPair | None, w: LossWeights = LossWeights()) -> LossBreakdown:
    est = decode(output, target.config)
    if est.shape != target.shape:
        raise UsageError(f"composite_loss: output spectrogram {est.shape} vs target {target.shape}")
    mag_hat = T.hypot(est.real, est.imag)
    mag = T.hypot(target.real, target.imag)
    if w.mag_loss_scale == "log":
        mag_hat, mag = T.log(mag_hat + 1e-7), T.log(mag + 1e-7)
    mse_mag = mse(mag_hat, mag)
    mse_real = mse(est.real, target.real)
    mse_imag = mse(est.imag, target.imag)
    wave = istft(est)
    sisdr = si_sdr(wave, T.as_tensor(target_wave, like=wave))
    kl = kl_divergence(g) if g is not None else T.Tensor(np.zeros((), dtype=mse_mag.dtype))
    total = (w.w_mag * mse_mag + w.w_real * mse_real + w.w_imag * mse_imag
             + w.beta * kl - w.w_sisdr * sisdr)
    return LossBreakdown(float(mse_mag.data), float(mse_real.data), float(mse_imag.data),
                         float(kl.data), float(sisdr.data), float(total.data), total)
