"""STFT analysis/synthesis and the two network input encodings.

The transform is written as gather (framing with reflection padding),
window multiply and dense DFT-basis matrix products, so spectra and
waveforms stay inside the autodiff graph.

Frames are centred: frame ``t`` covers samples ``[t*hop - N/2, t*hop + N/2)``
of the signal, i.e. ``[t*hop, t*hop + N)`` of the reflection-padded signal.
Only the first ``N/2`` bins are kept (the Nyquist bin is dropped). Synthesis
is the least-squares inverse of that truncated analysis operator, which is
exact for any consistent spectrogram: weighted overlap-add followed by a
rank-``T`` Woodbury correction that restores the Nyquist component.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, UsageError
from .tensor import Tensor

SAMPLE_RATE = 16000
LOG_EPS = 1e-7


class Encoding(str, enum.Enum):
    REIM = "ReIm"
    MAPH = "MaPh"


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 100
    n_frames: int = 256

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2

    @property
    def segment_length(self) -> int:
        return self.n_frames * self.hop

    def __post_init__(self):
        if self.fft_size < 4 or self.fft_size % 2:
            raise ConfigurationError(f"fft_size must be even and >= 4, got {self.fft_size}")
        if self.hop < 1 or self.n_frames < 1:
            raise ConfigurationError("hop and n_frames must be positive")
        if self.fft_size // 2 >= self.segment_length:
            raise ConfigurationError("segment too short for reflection padding")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class ComplexSpectrogram:
    """Real and imaginary planes of shape (..., n_frames, n_bins)."""

    real: Tensor
    imag: Tensor
    config: StftConfig = StftConfig()

    def __post_init__(self):
        self.real = T.as_tensor(self.real)
        self.imag = T.as_tensor(self.imag, like=self.real)
        if self.real.shape != self.imag.shape:
            raise UsageError(f"real/imag planes differ: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


@dataclass
class EncodedInput:
    """Two-channel network representation, channels on axis -3."""

    channels: Tensor
    encoding: Encoding

    def __post_init__(self):
        self.channels = T.as_tensor(self.channels)
        self.encoding = Encoding(self.encoding)
        if self.channels.ndim < 3 or self.channels.shape[-3] != 2:
            raise UsageError(f"encoded input needs 2 channels on axis -3, got {self.channels.shape}")


class _Operators:
    """Precomputed index maps and bases for one StftConfig (float64)."""

    def __init__(self, cfg: StftConfig):
        n, f, length = cfg.fft_size, cfg.n_bins, cfg.segment_length
        t = np.arange(cfg.n_frames)[:, None]
        padded = t * cfg.hop + np.arange(n)[None, :] - n // 2
        # single reflection (edge sample not repeated), as in numpy 'reflect' padding
        idx = np.abs(padded)
        idx = np.where(idx > length - 1, 2 * (length - 1) - idx, idx)
        if idx.min() < 0 or idx.max() >= length:
            raise ConfigurationError("reflection padding wider than the segment")
        self.index = idx.astype(np.intp)
        self.window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)  # periodic Hann
        k = np.arange(f)
        phase = 2 * np.pi * np.outer(np.arange(n), k) / n  # (N, F)
        self.ana_re = np.cos(phase)
        self.ana_im = -np.sin(phase)
        weight = np.where(k == 0, 1.0, 2.0) / n
        self.syn_re = (weight[:, None] * np.cos(phase.T))  # (F, N)
        self.syn_im = (-weight[:, None] * np.sin(phase.T))

        frames_flat = np.broadcast_to(self.window ** 2, idx.shape)
        envelope = np.bincount(idx.ravel(), weights=frames_flat.ravel(), minlength=length)
        if np.any(envelope <= 0):
            raise ConfigurationError(
                f"window/hop pair leaves samples uncovered (fft_size={n}, hop={cfg.hop})")
        self.envelope = envelope
        # Nyquist atom per frame, seen through the window: w[n] * (-1)^n / sqrt(N)
        self.nyq_atom = self.window * ((-1.0) ** np.arange(n)) / np.sqrt(n)
        rows = np.repeat(np.arange(cfg.n_frames), n)
        u = np.zeros((cfg.n_frames, length))
        np.add.at(u, (rows, idx.ravel()), np.tile(self.nyq_atom, cfg.n_frames))
        capacitance = np.eye(cfg.n_frames) - (u / envelope) @ u.T
        self.cap_inv = np.linalg.inv(capacitance)
        self._cast: dict = {}

    def get(self, name: str, dtype) -> np.ndarray:
        key = (name, np.dtype(dtype))
        if key not in self._cast:
            self._cast[key] = np.ascontiguousarray(getattr(self, name).astype(dtype))
        return self._cast[key]


@functools.lru_cache(maxsize=8)
def operators(cfg: StftConfig) -> _Operators:
    return _Operators(cfg)


def _samples(w) -> Tensor:
    if isinstance(w, Waveform):
        if w.sample_rate != SAMPLE_RATE:
            raise UsageError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
        return Tensor(w.samples)
    return T.as_tensor(w)


def stft(w, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Analyse a segment (or a batch of segments on the last axis)."""
    x = _samples(w)
    if x.shape[-1] != config.segment_length:
        raise UsageError(
            f"stft expects segments of {config.segment_length} samples, got {x.shape[-1]}")
    ops = operators(config)
    dt = x.dtype
    frames = T.gather_last(x, ops.index) * Tensor(ops.get("window", dt))
    re = T.matmul(frames, Tensor(ops.get("ana_re", dt)))
    im = T.matmul(frames, Tensor(ops.get("ana_im", dt)))
    return ComplexSpectrogram(re, im, config)


def istft(spec: ComplexSpectrogram) -> Tensor:
    """Least-squares inverse of :func:`stft` with the Nyquist bin taken as zero."""
    cfg = spec.config
    if spec.shape[-2:] != (cfg.n_frames, cfg.n_bins):
        raise UsageError(
            f"spectrogram shape {spec.shape} does not match frame config {cfg}")
    ops = operators(cfg)
    dt = spec.real.dtype
    length = cfg.segment_length
    frames = T.matmul(spec.real, Tensor(ops.get("syn_re", dt))) + \
        T.matmul(spec.imag, Tensor(ops.get("syn_im", dt)))
    ola = T.scatter_add_last(frames * Tensor(ops.get("window", dt)), ops.index, length)
    inv_env = Tensor(1.0 / ops.get("envelope", dt))
    y = ola * inv_env
    atom = Tensor(ops.get("nyq_atom", dt))
    coeff = (T.gather_last(y, ops.index) * atom).sum(axis=-1)  # (..., n_frames)
    corr = T.matmul(T.reshape(coeff, coeff.shape[:-1] + (1, cfg.n_frames)),
                    Tensor(ops.get("cap_inv", dt).T.copy()))
    corr = T.reshape(corr, coeff.shape + (1,)) * atom
    return y + T.scatter_add_last(corr, ops.index, length) * inv_env


def _stack_channels(a: Tensor, b: Tensor) -> Tensor:
    shape = a.shape[:-2] + (1,) + a.shape[-2:]
    return T.concat([T.reshape(a, shape), T.reshape(b, shape)], axis=-3)


def encode(spec: ComplexSpectrogram, mode: Encoding | str) -> EncodedInput:
    mode = Encoding(mode)
    if mode is Encoding.REIM:
        return EncodedInput(_stack_channels(spec.real, spec.imag), mode)
    mag = T.hypot(spec.real, spec.imag)
    logmag = T.log(mag + LOG_EPS)
    phase = T.atan2(spec.imag, spec.real)
    return EncodedInput(_stack_channels(logmag, phase), mode)


def decode(enc: EncodedInput, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    ch = enc.channels
    first = ch[(Ellipsis, 0, slice(None), slice(None))]
    second = ch[(Ellipsis, 1, slice(None), slice(None))]
    if enc.encoding is Encoding.REIM:
        return ComplexSpectrogram(first, second, config)
    amp = T.maximum(T.exp(first) - LOG_EPS, 0.0)
    return ComplexSpectrogram(amp * T.cos(second), amp * T.sin(second), config)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Map angles onto [-pi, pi]."""
    return np.arctan2(np.sin(phase), np.cos(phase))
