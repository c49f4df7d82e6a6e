"""Complex variational U-Net: encoder, dual-Gaussian bottleneck, decoder.

Encoder level ``i`` is a dilated stride-2 complex convolution, complex batch
norm and cPReLU; its output (optionally passed through split-plane self
attention) is kept as the lateral connection for decoder level ``i``. The
bottleneck squeezes channels with a 1x1 complex convolution, flattens each
plane and fits one diagonal Gaussian per plane (or a deterministic linear
code for the CU-Net ablation). Decoder levels concatenate the lateral with
the upsampled features and apply a stride-2 transposed complex convolution.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .complex_nn import (
    ComplexBatchNorm2d,
    ComplexConv2d,
    ComplexConvTranspose2d,
    ComplexSelfAttention,
    ComplexTensor,
    CPReLU,
    Module,
    cat,
    same_halving_padding,
)
from .dsp import Encoding, StftConfig
from .errors import ConfigurationError, DataError, UsageError
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -20.0, 10.0
CHECKPOINT_MAGIC = b"CVUN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 7
    channels: tuple[int, ...] = (64, 128, 256, 512, 512, 512, 512)
    dilations: tuple[int, ...] = (16, 8, 4, 2, 1, 1, 1)
    input_size: tuple[int, int, int] = (2, 256, 256)
    latent_dim: int = 256
    variational: bool = True
    self_attention: bool = True
    encoding: str = "MaPh"
    bn_mode: str = "whiten"
    dilation_axes: str = "both"
    stft_hop: int = 100

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(self, "encoding", Encoding(self.encoding).value)
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if len(self.channels) != self.levels or len(self.dilations) != self.levels:
            raise ConfigurationError(
                f"need {self.levels} channel and dilation entries, got "
                f"{len(self.channels)} and {len(self.dilations)}")
        if min(self.channels) < 2 or min(self.dilations) < 1:
            raise ConfigurationError("channels must be >= 2 and dilations >= 1")
        if len(self.input_size) != 3 or self.input_size[0] != 2:
            raise ConfigurationError(f"input_size must be (2, T, F), got {self.input_size}")
        step = 2 ** self.levels
        if self.input_size[1] % step or self.input_size[2] % step:
            raise ConfigurationError(
                f"input spatial size {self.input_size[1:]} not divisible by 2^{self.levels}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be positive")
        if self.bn_mode not in ("whiten", "split"):
            raise ConfigurationError(f"bn_mode must be 'whiten' or 'split', got {self.bn_mode!r}")
        if self.dilation_axes not in ("both", "time", "freq"):
            raise ConfigurationError(f"dilation_axes must be both/time/freq, got {self.dilation_axes!r}")

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Four-level desk-scale variant on 2x64x64 inputs."""
        base = dict(levels=4, channels=(8, 16, 32, 64), dilations=(4, 2, 1, 1),
                    input_size=(2, 64, 64), latent_dim=64, stft_hop=32)
        base.update(overrides)
        return cls(**base)

    @property
    def stft(self) -> StftConfig:
        return StftConfig(fft_size=2 * self.input_size[2], hop=self.stft_hop,
                          n_frames=self.input_size[1])

    @property
    def variant_name(self) -> str:
        if not self.variational:
            name = "SA-CU-Net" if self.self_attention else "CU-Net"
        else:
            name = "SA-CVU-Net" if self.self_attention else "CVU-Net"
        return f"{name} ({'Re/Im' if self.encoding == 'ReIm' else 'Ma/Ph'})"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channels", "dilations", "input_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class LatentGaussianPair:
    mu_re: Tensor
    logvar_re: Tensor
    mu_im: Tensor
    logvar_im: Tensor


def _dilation(d: int, axes: str) -> tuple[int, int]:
    return {"both": (d, d), "time": (d, 1), "freq": (1, d)}[axes]


class EncoderBlock(Module):
    def __init__(self, c_in, c_out, dilation, axes, bn_mode, rng, dtype):
        super().__init__()
        dh, dw = _dilation(dilation, axes)
        pad = same_halving_padding(4, dh) + same_halving_padding(4, dw)
        self.conv = ComplexConv2d(c_in, c_out, 4, stride=2, dilation=(dh, dw), padding=pad,
                                  rng=rng, dtype=dtype)
        self.bn = ComplexBatchNorm2d(c_out, mode=bn_mode, dtype=dtype)
        self.act = CPReLU(c_out, dtype=dtype)

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return self.act(self.bn(self.conv(x)))


class DecoderBlock(Module):
    def __init__(self, c_in, c_out, bn_mode, rng, dtype):
        super().__init__()
        self.conv = ComplexConvTranspose2d(c_in, c_out, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bn = ComplexBatchNorm2d(c_out, mode=bn_mode, dtype=dtype)
        self.act = CPReLU(c_out, dtype=dtype)

    def __call__(self, x: ComplexTensor) -> ComplexTensor:
        return self.act(self.bn(self.conv(x)))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype):
        super().__init__()
        bound = np.sqrt(3.0 / d_in)
        self.weight = T.parameter(rng.uniform(-bound, bound, (d_out, d_in)), dtype)
        self.bias = T.parameter(np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Bottleneck(Module):
    def __init__(self, channels, spatial, latent_dim, variational, rng, dtype):
        super().__init__()
        half = channels // 2
        self.shape = (half,) + tuple(spatial)
        flat = half * spatial[0] * spatial[1]
        self.variational = variational
        self.conv_in = ComplexConv2d(channels, half, 1, bias=True, rng=rng, dtype=dtype)
        self.act_in = CPReLU(half, dtype=dtype)
        if variational:
            self.mu_re = Linear(flat, latent_dim, rng, dtype)
            self.logvar_re = Linear(flat, latent_dim, rng, dtype)
            self.mu_im = Linear(flat, latent_dim, rng, dtype)
            self.logvar_im = Linear(flat, latent_dim, rng, dtype)
        else:
            self.code_re = Linear(flat, latent_dim, rng, dtype)
            self.code_im = Linear(flat, latent_dim, rng, dtype)
        self.proj_re = Linear(latent_dim, flat, rng, dtype)
        self.proj_im = Linear(latent_dim, flat, rng, dtype)
        self.conv_out = ComplexConv2d(half, channels, 1, bias=True, rng=rng, dtype=dtype)
        self.act_out = CPReLU(channels, dtype=dtype)

    def __call__(self, b: ComplexTensor, rng: np.random.Generator | None = None):
        h = self.act_in(self.conv_in(b))
        batch = h.shape[0]
        flat_re = T.reshape(h.re, (batch, -1))
        flat_im = T.reshape(h.im, (batch, -1))
        latent = None
        if self.variational:
            latent = LatentGaussianPair(
                self.mu_re(flat_re), T.clip(self.logvar_re(flat_re), LOGVAR_MIN, LOGVAR_MAX),
                self.mu_im(flat_im), T.clip(self.logvar_im(flat_im), LOGVAR_MIN, LOGVAR_MAX))
            if self.training:
                if rng is None:
                    raise UsageError("variational bottleneck in train mode needs an rng")
                z_re = _reparameterize(latent.mu_re, latent.logvar_re, rng)
                z_im = _reparameterize(latent.mu_im, latent.logvar_im, rng)
            else:
                z_re, z_im = latent.mu_re, latent.mu_im
        else:
            z_re, z_im = self.code_re(flat_re), self.code_im(flat_im)
        shape = (batch,) + self.shape
        up = ComplexTensor(T.reshape(self.proj_re(z_re), shape), T.reshape(self.proj_im(z_im), shape))
        return self.act_out(self.conv_out(up)), latent


def _reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + T.exp(logvar * 0.5) * Tensor(eps)


class CVUNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        ch = config.channels
        self.encoder = [EncoderBlock(1 if i == 0 else ch[i - 1], ch[i], config.dilations[i],
                                     config.dilation_axes, config.bn_mode, rng, dtype)
                        for i in range(config.levels)]
        self.attention = [ComplexSelfAttention(ch[i], rng, dtype) if config.self_attention else None
                          for i in range(config.levels)]
        spatial = tuple(s // 2 ** config.levels for s in config.input_size[1:])
        self.bottleneck = Bottleneck(ch[-1], spatial, config.latent_dim, config.variational, rng, dtype)
        # decoder.i mirrors encoder level i; listed top level first
        self.decoder = [DecoderBlock(2 * ch[i], ch[i - 1] if i > 0 else ch[0], config.bn_mode, rng, dtype)
                        for i in range(config.levels)]
        self.output = ComplexConv2d(ch[0], 1, 1, bias=True, rng=rng, dtype=dtype)
        self.sample_rng = np.random.default_rng(seed + 1)

    def encode_path(self, x: ComplexTensor) -> tuple[ComplexTensor, list[ComplexTensor]]:
        expected = tuple(self.config.input_size[1:])
        if x.shape[1] != 1 or tuple(x.shape[2:]) != expected:
            raise UsageError(f"expected complex input (B, 1, {expected[0]}, {expected[1]}), got {x.shape}")
        laterals = []
        h = x
        for block, attn in zip(self.encoder, self.attention):
            h = block(h)
            laterals.append(attn(h) if attn is not None else h)
        return h, laterals

    def decode_path(self, feat: ComplexTensor, laterals: list[ComplexTensor]) -> Tensor:
        if len(laterals) != self.config.levels:
            raise UsageError(f"expected {self.config.levels} laterals, got {len(laterals)}")
        h = feat
        for i in reversed(range(self.config.levels)):
            lat = laterals[i]
            if lat.shape[0] != h.shape[0] or lat.shape[2:] != h.shape[2:]:
                raise UsageError(f"lateral {i} shape {lat.shape} does not match features {h.shape}")
            h = self.decoder[i](cat([lat, h]))
        out = self.output(h)
        return T.concat([out.re, out.im], axis=1)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None):
        """Map encoded input (B, 2, T, F) to encoded output of the same shape."""
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        c = ComplexTensor(x[:, 0:1], x[:, 1:2])
        bottom, laterals = self.encode_path(c)
        feat, latent = self.bottleneck(bottom, rng if rng is not None else self.sample_rng)
        return self.decode_path(feat, laterals), latent


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> CVUNet:
    """Deterministically initialise a model from ``seed``."""
    config.validate()
    return CVUNet(config, seed, dtype)


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars, computed from the config alone."""
    ch, lv = config.channels, config.levels
    n = 0
    for i in range(lv):
        c_in = 1 if i == 0 else ch[i - 1]
        n += 2 * ch[i] * 2 * c_in * 16 + 6 * ch[i] + 2 * ch[i]  # conv, bn, cprelu
        if config.self_attention:
            qk = max(1, ch[i] // 8)
            n += 2 * (2 * (qk * ch[i] + qk) + ch[i] * ch[i] + ch[i] + 1)
        c_out = ch[i - 1] if i > 0 else ch[0]
        n += 2 * 2 * (2 * ch[i]) * c_out * 16 + 6 * c_out + 2 * c_out
    half = ch[-1] // 2
    flat = half * (config.input_size[1] // 2 ** lv) * (config.input_size[2] // 2 ** lv)
    heads = 4 if config.variational else 2
    n += 2 * half * 2 * ch[-1] + 2 * half + 2 * half  # conv_in + bias + cprelu
    n += heads * (flat * config.latent_dim + config.latent_dim)
    n += 2 * (config.latent_dim * flat + flat)
    n += 2 * ch[-1] * 2 * half + 2 * ch[-1] + 2 * ch[-1]  # conv_out + bias + cprelu
    n += 2 * 1 * 2 * ch[0] + 2  # output conv + bias
    return n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: CVUNet) -> bytes:
    """Serialise config and state.

    Layout (little endian): magic ``CVUN``, u32 version, 32-byte config digest,
    u32 config-json length + json, u32 entry count, then per entry: u32 name
    length, name, u32 rank, u32 dims, raw float32 payload.
    """
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(model.config.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: CVUNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise DataError("checkpoint truncated")
    return data


def load_checkpoint(path, dtype=np.float32) -> CVUNet:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = io.BytesIO(blob)
    if _read(buf, 4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a CVUN checkpoint")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    digest = _read(buf, 32)
    (n,) = struct.unpack("<I", _read(buf, 4))
    config = ModelConfig.from_dict(json.loads(_read(buf, n)))
    if config.digest() != digest:
        raise DataError(f"{path}: config digest mismatch")
    (count,) = struct.unpack("<I", _read(buf, 4))
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read(buf, 4))
        name = _read(buf, ln).decode()
        (rank,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(_read(buf, 4 * size), dtype="<f4").reshape(shape)
    if buf.read(1):
        raise DataError(f"{path}: trailing bytes after last entry")
    model = CVUNet(config, 0, dtype)
    model.load_state_dict(state)
    return model

