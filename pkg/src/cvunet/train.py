"""Training loop, Adam, enhancement of waveforms and corpus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .datapipe import Manifest, MixtureRecord, read_manifest, segment
from .dsp import EncodedInput, StftConfig, decode, encode, istft, operators, stft
from .errors import ConfigurationError, DataError, NumericalError
from .model import CVUNet, ModelConfig, build, save_checkpoint
from .objective import LossBreakdown, LossWeights, composite_loss, si_sdr_score

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "mse_mag", "mse_real", "mse_imag", "kl", "sisdr_db", "total")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    batch_size: int = 4
    steps: int = 1000
    grad_clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 500
    manifest: str = "manifest.jsonl"
    out_dir: str = "run"
    dtype: str = "float32"
    remix_snr: tuple[float, float] | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("betas must be two values in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and steps >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        if self.remix_snr is not None:
            self.remix_snr = tuple(float(v) for v in self.remix_snr)
            if len(self.remix_snr) != 2 or self.remix_snr[0] > self.remix_snr[1]:
                raise ConfigurationError("remix_snr must be (lo, hi) with lo <= hi")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        # relative paths in a config file are relative to that file
        if not Path(cfg.manifest).is_absolute():
            cfg.manifest = str(path.parent / cfg.manifest)
        if not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str(path.parent / cfg.out_dir)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        if self.remix_snr is not None:
            d["remix_snr"] = list(self.remix_snr)
        return d


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0


def global_norm(grads) -> float:
    return float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return [g * g.dtype.type(scale) for g in grads], norm


def adam_step(params, grads, state: AdamState, hyper: AdamHyper) -> bool:
    """One bias-corrected Adam update in place; returns False if skipped.

    Steps with any non-finite gradient are skipped and counted in
    ``state.skipped``. Gradients are clipped to ``hyper.clip_norm`` first.
    """
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, skipping step (%d skipped so far)", state.skipped)
        return False
    if hyper.clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, hyper.clip_norm)
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p.data = p.data - update.astype(p.dtype, copy=False)
    return True


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def level_gain(segment_samples: np.ndarray, stft_cfg: StftConfig) -> float:
    """Scale that brings a segment to RMS 1/sqrt(sum(window^2)).

    At that level a white signal has unit expected power per STFT bin.
    """
    level = float(np.sqrt(np.mean(np.square(segment_samples, dtype=np.float64))))
    if level == 0:
        return 1.0
    target = 1.0 / np.sqrt(np.sum(operators(stft_cfg).window ** 2))
    return target / level


def features(segments: np.ndarray, config: ModelConfig, dtype) -> EncodedInput:
    with T.no_grad():
        spec = stft(T.Tensor(np.asarray(segments, dtype=dtype)), config.stft)
        return encode(spec, config.encoding)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class SegmentSampler:
    """Random fixed-length training segments from in-memory records.

    With ``remix_snr`` set, each segment pairs the clean speech of one record
    with the noise of another (random offsets in both) at an SNR drawn
    uniformly from that range, instead of using the stored mixtures.
    """

    def __init__(self, records: list[MixtureRecord], seg_len: int, seed: int,
                 remix_snr: tuple[float, float] | None = None):
        if not records:
            raise DataError("no training records")
        self.records = records
        self.seg_len = seg_len
        self.remix_snr = remix_snr
        self.rng = np.random.default_rng(seed)

    def _start(self, n: int) -> int:
        return int(self.rng.integers(0, max(1, n - self.seg_len + 1)))

    def _remixed(self) -> tuple[np.ndarray, np.ndarray]:
        while True:
            a = self.records[int(self.rng.integers(len(self.records)))]
            b = self.records[int(self.rng.integers(len(self.records)))]
            c = self._cut(a.clean.samples, self._start(len(a.clean)))
            n = self._cut(b.noise.samples, self._start(len(b.noise)))
            snr = self.rng.uniform(*self.remix_snr)
            c_rms, n_rms = np.sqrt(np.mean(c ** 2)), np.sqrt(np.mean(n ** 2))
            if c_rms > 0 and n_rms > 0:
                return c + (c_rms / n_rms) * 10 ** (-snr / 20) * n, c

    def _cut(self, x: np.ndarray, start: int) -> np.ndarray:
        piece = x[start:start + self.seg_len]
        if len(piece) < self.seg_len:
            piece = np.concatenate([piece, np.zeros(self.seg_len - len(piece))])
        return piece

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        mix, clean = [], []
        for _ in range(size):
            if self.remix_snr is not None:
                m, c = self._remixed()
                mix.append(m)
                clean.append(c)
                continue
            rec = self.records[int(self.rng.integers(len(self.records)))]
            n = len(rec.mixture)
            start = self._start(n)
            m, c = self._cut(rec.mixture.samples, start), self._cut(rec.clean.samples, start)
            if not np.any(c):
                # silent clean target: resample (SI-SDR undefined)
                return self.batch(size)
            mix.append(m)
            clean.append(c)
        return np.stack(mix), np.stack(clean)


def load_split(manifest: Manifest, split: str) -> list[MixtureRecord]:
    records = []
    for e in manifest.split(split):
        try:
            records.append(manifest.load_record(e))
        except DataError as exc:
            raise DataError(f"record {e.record_id}: {exc}") from exc
    return records


def training_step(model: CVUNet, mix: np.ndarray, clean: np.ndarray, weights: LossWeights,
                  rng: np.random.Generator) -> tuple[LossBreakdown, list[np.ndarray]]:
    cfg = model.config
    dt = model.dtype
    gains = np.array([level_gain(m, cfg.stft) for m in mix])[:, None]
    mix, clean = mix * gains, clean * gains
    x = features(mix, cfg, dt)
    with T.no_grad():
        target = stft(T.Tensor(clean.astype(dt)), cfg.stft)
    model.train()
    out, latent = model(x.channels, rng)
    loss = composite_loss(EncodedInput(out, cfg.encoding), target, clean.astype(dt), latent, weights)
    if not np.isfinite(loss.total):
        raise NumericalError(f"non-finite loss: {loss.as_row()}")
    grads = T.backward(loss.total_tensor, model.parameters())
    return loss, grads


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    history: list[dict]
    model: CVUNet
    skipped_steps: int = 0


def train(cfg: TrainConfig, records: list[MixtureRecord] | None = None,
          progress: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Minimise the composite loss with Adam; logs a CSV and writes checkpoints."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if records is None:
        manifest = read_manifest(cfg.manifest)
        manifest.validate()
        records = load_split(manifest, "train")
    dtype = np.dtype(cfg.dtype)
    model = build(cfg.model, cfg.seed, dtype)
    params = model.parameters()
    sampler = SegmentSampler(records, cfg.model.stft.segment_length, cfg.seed + 17, cfg.remix_snr)
    noise_rng = np.random.default_rng(cfg.seed + 29)
    state = AdamState.zeros_like(params)
    hyper = AdamHyper(cfg.lr, cfg.betas[0], cfg.betas[1], cfg.eps_opt, cfg.grad_clip_norm)
    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "model.ckpt"
    history = []
    t0 = time.time()
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for step in range(1, cfg.steps + 1):
            mix, clean = sampler.batch(cfg.batch_size)
            loss, grads = training_step(model, mix, clean, cfg.loss, noise_rng)
            adam_step(params, grads, state, hyper)
            row = {"step": step, **loss.as_row()}
            history.append(row)
            writer.writerow([step] + [repr(row[k]) for k in LOG_COLUMNS[1:]])
            if progress is not None:
                progress(step, loss)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_path)
                log.info("step %d  total %.4f  si-sdr %.2f dB  (%.1fs)", step, loss.total,
                         loss.sisdr_db, time.time() - t0)
    save_checkpoint(model, ckpt_path)
    return TrainResult(ckpt_path, metrics_path, history, model, state.skipped)


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------

def enhance_waveform(model: CVUNet, samples: np.ndarray, batch: int = 8) -> np.ndarray:
    """Denoise a waveform of any length with 50%-overlap segments.

    Segments are cross-faded with a periodic Hann window, which sums to one
    at half overlap; the signal is padded by half a segment on both sides so
    every sample is covered by exactly two segments. Each segment is brought
    to the training level before the forward pass and scaled back after.
    """
    cfg = model.config
    seg = cfg.stft.segment_length
    hop = seg // 2
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n == 0:
        return x.copy()
    padded = np.concatenate([np.zeros(hop), x, np.zeros(hop + seg)])
    pieces = np.stack(segment(padded, seg, hop)[: (n + hop) // hop + 1])
    gains = np.array([level_gain(p, cfg.stft) for p in pieces])[:, None]
    out_pieces = np.zeros_like(pieces)
    model.eval()
    with T.no_grad():
        for i in range(0, len(pieces), batch):
            chunk = pieces[i:i + batch] * gains[i:i + batch]
            enc = features(chunk, cfg, model.dtype)
            out, _ = model(enc.channels)
            wave = istft(decode(EncodedInput(out, cfg.encoding), cfg.stft)).data
            out_pieces[i:i + batch] = wave.astype(np.float64) / gains[i:i + batch]
    # all-zero segments carry nothing to denoise and stay silent
    out_pieces[~np.any(pieces, axis=1)] = 0.0
    fade = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(seg) / seg)
    acc = np.zeros(len(padded))
    for i, piece in enumerate(out_pieces):
        acc[i * hop:i * hop + seg] += fade * piece
    return acc[hop:hop + n]


def enhance(checkpoint, in_wav, out_wav) -> np.ndarray:
    """Load a checkpoint and denoise ``in_wav`` into ``out_wav``."""
    from .model import load_checkpoint

    return enhance_file(load_checkpoint(checkpoint), in_wav, out_wav)


def enhance_file(model: CVUNet, in_wav, out_wav) -> np.ndarray:
    from .datapipe import load_wav, save_wav

    w = load_wav(in_wav)
    y = enhance_waveform(model, w.samples)
    save_wav(y, out_wav)
    return y


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    model_name: str
    rows: list[dict]
    missing: list[str] = field(default_factory=list)

    COLUMNS = ("id", "snr_in", "sisdr_noisy", "sisdr_enhanced", "pesq", "stoi")

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        agg = {}
        for col in ("snr_in", "sisdr_noisy", "sisdr_enhanced"):
            vals = np.array([r[col] for r in self.rows], dtype=np.float64)
            agg[col] = {"mean": float(np.mean(vals)), "median": float(np.median(vals)),
                        "std": float(np.std(vals))}
        return agg

    @property
    def improvement_db(self) -> float:
        a = self.aggregates
        return a["sisdr_enhanced"]["mean"] - a["sisdr_noisy"]["mean"]

    def table(self) -> str:
        """Aligned text table in the Model / PESQ / STOI / SI-SDR layout."""
        a = self.aggregates
        name_w = max(24, len(self.model_name) + 2)
        lines = [f"{'Model':<{name_w}}{'PESQ':>8}{'STOI':>8}{'SI-SDR [dB]':>14}",
                 "-" * (name_w + 30)]
        for label, col in (("Noisy input", "sisdr_noisy"), (self.model_name, "sisdr_enhanced")):
            lines.append(f"{label:<{name_w}}{'-':>8}{'-':>8}{a[col]['mean']:>14.2f}")
        lines.append("")
        lines.append(f"records: {len(self.rows)}   missing: {len(self.missing)}")
        for col in ("sisdr_noisy", "sisdr_enhanced"):
            s = a[col]
            lines.append(f"{col:<16} mean {s['mean']:8.3f}  median {s['median']:8.3f}  std {s['std']:8.3f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "eval.csv", "table": out / "eval_table.txt",
                 "scores": out / "sisdr_scores.csv", "summary": out / "eval_summary.json"}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["id"], repr(r["snr_in"]), repr(r["sisdr_noisy"]),
                            repr(r["sisdr_enhanced"]), "", ""])
        paths["table"].write_text(self.table())
        with open(paths["scores"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id", "condition", "sisdr_db"))
            for r in self.rows:
                w.writerow((r["id"], "noisy", repr(r["sisdr_noisy"])))
                w.writerow((r["id"], "enhanced", repr(r["sisdr_enhanced"])))
        paths["summary"].write_text(json.dumps(
            {"model": self.model_name, "aggregates": self.aggregates,
             "missing": self.missing, "pesq": None, "stoi": None}, indent=2))
        return paths


def read_eval_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"id": r["id"], "snr_in": float(r["snr_in"]),
                         "sisdr_noisy": float(r["sisdr_noisy"]),
                         "sisdr_enhanced": float(r["sisdr_enhanced"])})
    return rows


def evaluate(enhance_fn: Callable[[MixtureRecord], np.ndarray], manifest: Manifest,
             split: str = "test", model_name: str = "model") -> EvalReport:
    """Score SI-SDR of noisy and enhanced signals against clean, per record.

    Unreadable records are listed in ``missing`` and skipped.
    """
    entries = sorted(manifest.split(split), key=lambda e: e.record_id)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    rows, missing = [], []
    for e in entries:
        try:
            rec = manifest.load_record(e)
        except DataError as exc:
            log.warning("skipping %s: %s", e.record_id, exc)
            missing.append(e.record_id)
            continue
        enhanced = np.asarray(enhance_fn(rec), dtype=np.float64)
        clean = rec.clean.samples
        rows.append({"id": e.record_id, "snr_in": float(e.snr_db),
                     "sisdr_noisy": si_sdr_score(rec.mixture.samples, clean),
                     "sisdr_enhanced": si_sdr_score(enhanced, clean)})
    if missing:
        log.warning("%d record(s) missing from split %s", len(missing), split)
    if not rows:
        raise DataError(f"no readable records in split {split!r}")
    return EvalReport(model_name, rows, missing)


def model_enhancer(model: CVUNet) -> Callable[[MixtureRecord], np.ndarray]:
    return lambda rec: enhance_waveform(model, rec.mixture.samples)
