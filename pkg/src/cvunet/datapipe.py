"""Corpus handling: WAV I/O, SNR-controlled mixing, segmentation, manifests.

Also generates a deterministic synthetic corpus (harmonic "speech" plus
white, pink and band-limited babble-like noise) so the whole toolkit can be
exercised without external data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE, Waveform
from .errors import DataError, UsageError, WavFormatError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_KEYS = ("clean", "noise", "mixture", "snr_db", "split", "speaker_id", "noise_id")


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono 16 kHz PCM16 or float32 RIFF/WAVE file into [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    except (ValueError, OSError) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if data.ndim != 1:
        raise WavFormatError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        samples = np.clip(data.astype(np.float64) / 32767.0, -1.0, 1.0)
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: sample format {data.dtype}, expected PCM16 or float32")
    return Waveform(samples, rate)


def save_wav(w: Waveform | np.ndarray, path, float32: bool = False) -> None:
    """Write mono 16 kHz audio, clipped to [-1, 1]; PCM16 unless ``float32``."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w)
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if float32:
        wavfile.write(path, SAMPLE_RATE, samples.astype(np.float32))
    else:
        wavfile.write(path, SAMPLE_RATE, np.round(samples * 32767.0).astype(np.int16))


# ---------------------------------------------------------------------------
# mixing and segmentation
# ---------------------------------------------------------------------------

@dataclass
class MixtureRecord:
    clean: Waveform
    noise: Waveform
    mixture: Waveform
    snr_db: float
    gain: float = 1.0
    speaker_id: str = ""
    noise_id: str = ""
    split: str = "train"
    record_id: str = ""


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Tile (with a random circular offset) or crop noise to ``length`` samples."""
    rng = rng or np.random.default_rng(0)
    n = len(noise)
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return noise[start:start + length].copy()
    offset = int(rng.integers(0, n))
    reps = math.ceil((length + offset) / n)
    return np.tile(noise, reps)[offset:offset + length]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator | None = None) -> MixtureRecord:
    c = np.asarray(clean.samples, dtype=np.float64)
    n = fit_noise(np.asarray(noise.samples, dtype=np.float64), len(c), rng)
    rc, rn = rms(c), rms(n)
    if rc == 0:
        raise DataError("mix_at_snr: clean signal is silent")
    if rn == 0:
        raise DataError("mix_at_snr: noise signal is silent")
    gain = (rc / rn) * 10.0 ** (-snr_db / 20.0)
    return MixtureRecord(Waveform(c), Waveform(n), Waveform(c + gain * n), float(snr_db), gain)


def segment(w: Waveform | np.ndarray, seg_len: int = 25600, hop: int = 25600) -> list[np.ndarray]:
    """Cut into windows every ``hop`` samples, zero-padding the last one."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w)
    if hop <= 0:
        raise UsageError("segment: hop must be positive")
    if len(x) == 0:
        raise UsageError("segment: empty waveform")
    count = 1 if len(x) <= seg_len else math.ceil((len(x) - seg_len) / hop) + 1
    out = []
    for i in range(count):
        piece = x[i * hop:i * hop + seg_len]
        if len(piece) < seg_len:
            piece = np.concatenate([piece, np.zeros(seg_len - len(piece), dtype=x.dtype)])
        out.append(piece)
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    clean: str
    noise: str
    mixture: str
    snr_db: float
    split: str
    speaker_id: str
    noise_id: str

    @property
    def record_id(self) -> str:
        return Path(self.mixture).stem


@dataclass
class Manifest:
    path: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_record(self, e: ManifestEntry) -> MixtureRecord:
        clean = load_wav(self.resolve(e.clean))
        noise = load_wav(self.resolve(e.noise))
        mixture = load_wav(self.resolve(e.mixture))
        if not (len(clean) == len(noise) == len(mixture)):
            raise DataError(f"record {e.record_id}: clean/noise/mixture lengths differ")
        return MixtureRecord(clean, noise, mixture, e.snr_db, 1.0, e.speaker_id, e.noise_id,
                             e.split, e.record_id)

    @property
    def digest(self) -> str:
        """SHA-256 over the manifest lines and every referenced file."""
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(_entry_dict(e), sort_keys=True).encode())
            for rel in (e.clean, e.noise, e.mixture):
                h.update(self.resolve(rel).read_bytes())
        return h.hexdigest()

    def validate(self) -> None:
        """Check files exist, ids are unique per split and splits share no speaker/noise."""
        problems = []
        seen: dict[str, set] = {s: set() for s in SPLITS}
        for e in self.entries:
            for rel in (e.clean, e.noise, e.mixture):
                if not self.resolve(rel).is_file():
                    problems.append(f"{e.record_id}: missing {rel}")
            if e.record_id in seen.setdefault(e.split, set()):
                problems.append(f"duplicate record id {e.record_id} in split {e.split}")
            seen[e.split].add(e.record_id)
        for kind in ("speaker_id", "noise_id"):
            by_split = {s: {getattr(e, kind) for e in self.split(s)} for s in SPLITS}
            for i, a in enumerate(SPLITS):
                for b in SPLITS[i + 1:]:
                    shared = by_split[a] & by_split[b]
                    if shared:
                        problems.append(f"{kind} shared between {a} and {b}: {sorted(shared)[:3]}")
        if problems:
            raise DataError("invalid manifest:\n  " + "\n  ".join(problems[:20]))


def _entry_dict(e: ManifestEntry) -> dict:
    return {k: getattr(e, k) for k in MANIFEST_KEYS}


def write_manifest(manifest: Manifest) -> None:
    manifest.path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest.path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(_entry_dict(e)) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    entries = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(ManifestEntry(**{k: obj[k] for k in MANIFEST_KEYS}))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return Manifest(path, entries)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _formant_gain(freq: np.ndarray, formants: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    g = np.zeros_like(freq)
    for f, bw in zip(formants, bandwidths):
        g += 1.0 / (1.0 + ((freq - f[None, :]) / bw) ** 2)
    return g


def synth_speech(rng: np.random.Generator, voice: dict, duration: float) -> np.ndarray:
    """Harmonic complex with drifting pitch and formants and syllabic envelope."""
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t)
    f0 = voice["f0"] * drift * vibrato
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(4000 // voice["f0"])
    h = np.arange(1, n_harm + 1)[:, None]
    formants = np.stack([f * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t
                                                  + rng.uniform(0, 2 * np.pi)))
                         for f in voice["formants"]])
    gains = _formant_gain(h * f0[None, :], formants, voice["bandwidths"]) / h ** 0.5
    x = np.sum(gains * np.sin(h * phase[None, :] + rng.uniform(0, 2 * np.pi, (n_harm, 1))), axis=0)
    rate = rng.uniform(3.0, 5.0)
    env = np.clip(np.sin(np.pi * rate * t + rng.uniform(0, np.pi)), 0, None) ** 0.7
    x = x * env
    return x / (np.max(np.abs(x)) + 1e-12)


def _shaped_noise(rng: np.random.Generator, n: int, exponent: float, band=None) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    shape = np.where(f > 0, np.maximum(f, 20.0) ** (-exponent / 2), 0.0)
    if band is not None:
        lo, hi = band
        shape = shape * ((f >= lo) & (f <= hi))
    x = np.fft.irfft(spec * shape, n)
    return x / (np.max(np.abs(x)) + 1e-12)


def synth_noise(rng: np.random.Generator, kind: str, params: dict, duration: float) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    if kind == "white":
        x = rng.standard_normal(n)
        return x / np.max(np.abs(x))
    if kind == "pink":
        return _shaped_noise(rng, n, params["exponent"])
    if kind == "babble":
        t = np.arange(n) / SAMPLE_RATE
        out = np.zeros(n)
        for _ in range(params["talkers"]):
            band = _shaped_noise(rng, n, 0.5, band=params["band"])
            am = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
            out += band * am
        return out / (np.max(np.abs(out)) + 1e-12)
    raise UsageError(f"unknown noise kind {kind!r}")


def _voice(rng: np.random.Generator) -> dict:
    return {
        "f0": float(rng.uniform(90, 240)),
        "formants": np.array([rng.uniform(300, 900), rng.uniform(900, 2300), rng.uniform(2300, 3400)]),
        "bandwidths": np.array([80.0, 120.0, 180.0]) * rng.uniform(0.8, 1.3),
    }


def _noise_source(rng: np.random.Generator, index: int) -> tuple[str, dict]:
    kind = ("white", "pink", "babble")[index % 3]
    if kind == "white":
        return kind, {}
    if kind == "pink":
        return kind, {"exponent": float(rng.uniform(0.7, 1.5))}
    lo = float(rng.uniform(150, 400))
    return kind, {"talkers": int(rng.integers(3, 7)), "band": (lo, float(rng.uniform(2500, 4500)))}


def _split_counts(n: int) -> dict[str, int]:
    if n < 3:
        return {"train": n, "val": 0, "test": 0}
    n_test = max(1, round(0.2 * n))
    n_val = max(1, round(0.1 * n))
    return {"train": n - n_test - n_val, "val": n_val, "test": n_test}


def synth_corpus(seed: int, n_utterances: int, snr_range=(0.0, 20.0), out_dir=".",
                 duration: float = 2.0) -> Manifest:
    """Generate clean/noise/mixture WAVs plus ``manifest.jsonl`` under ``out_dir``.

    Each split draws its speakers (voice generators) and noise generators
    from its own pool, so test speakers and noises are unseen in training.
    Files are float32 so the stored SNRs survive the round trip exactly.
    """
    if n_utterances < 1:
        raise UsageError("synth_corpus: need at least one utterance")
    lo, hi = snr_range
    if hi < lo:
        raise UsageError("synth_corpus: snr range must be (lo, hi) with lo <= hi")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = _split_counts(n_utterances)
    manifest = Manifest(out / "manifest.jsonl")
    uid = 0
    for split in SPLITS:
        count = counts[split]
        if count == 0:
            continue
        n_spk = max(1, math.ceil(count / 3))
        voices = [_voice(rng) for _ in range(n_spk)]
        noises = [_noise_source(rng, i) for i in range(max(3, n_spk))]
        for j in range(count):
            spk, nz = j % n_spk, (j * 7 + uid) % len(noises)
            clean = synth_speech(rng, voices[spk], duration)
            kind, params = noises[nz]
            noise = synth_noise(rng, kind, params, duration)
            snr = float(rng.uniform(lo, hi))
            rec = mix_at_snr(Waveform(clean), Waveform(noise), snr, rng)
            peak = max(np.max(np.abs(rec.mixture.samples)), np.max(np.abs(rec.clean.samples)),
                       np.max(np.abs(rec.gain * rec.noise.samples)))
            scale = 0.9 / peak
            name = f"{split}_{uid:04d}"
            paths = {k: f"{k}/{name}.wav" for k in ("clean", "noise", "mixture")}
            save_wav(rec.clean.samples * scale, out / paths["clean"], float32=True)
            save_wav(rec.gain * rec.noise.samples * scale, out / paths["noise"], float32=True)
            save_wav(rec.mixture.samples * scale, out / paths["mixture"], float32=True)
            manifest.entries.append(ManifestEntry(
                paths["clean"], paths["noise"], paths["mixture"], snr, split,
                f"{split}-spk{spk}", f"{split}-{kind}{nz}"))
            uid += 1
    write_manifest(manifest)
    log.info("wrote %d records to %s", len(manifest.entries), manifest.path)
    return manifest
