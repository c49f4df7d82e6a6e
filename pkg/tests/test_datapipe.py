import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from cvunet.datapipe import (Manifest, ManifestEntry, fit_noise, load_wav, mix_at_snr, read_manifest, rms,
                             save_wav, segment, synth_corpus, synth_noise, synth_speech, write_manifest)
from cvunet.dsp import Waveform
from cvunet.errors import DataError, UsageError, WavFormatError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return synth_corpus(7, 12, (0.0, 20.0), out, duration=1.0)


def test_wav_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 4000)
    save_wav(x, tmp_path / "a.wav")
    y = load_wav(tmp_path / "a.wav").samples
    assert np.max(np.abs(x - y)) <= 1 / 32768


def test_wav_full_scale_sine(tmp_path):
    x = np.sin(2 * np.pi * 1000 * np.arange(1600) / 16000 + np.pi / 2)
    save_wav(x, tmp_path / "s.wav")
    _, raw = wavfile.read(tmp_path / "s.wav")
    assert raw.dtype == np.int16 and raw.max() == 32767 and raw.min() == -32767


def test_wav_clips(tmp_path):
    save_wav(np.array([2.0, -3.0, 0.5]), tmp_path / "c.wav")
    y = load_wav(tmp_path / "c.wav").samples
    assert y[0] == 1.0 and y[1] == -1.0


def test_wav_float32_exact(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 1, 100).astype(np.float32)
    save_wav(x.astype(np.float64), tmp_path / "f.wav", float32=True)
    assert np.array_equal(load_wav(tmp_path / "f.wav").samples, x.astype(np.float64))


def test_wav_wrong_rate(tmp_path):
    wavfile.write(tmp_path / "r.wav", 44100, np.zeros(10, dtype=np.int16))
    with pytest.raises(WavFormatError, match="44100"):
        load_wav(tmp_path / "r.wav")


def test_wav_stereo_and_codec(tmp_path):
    wavfile.write(tmp_path / "st.wav", 16000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(WavFormatError, match="mono"):
        load_wav(tmp_path / "st.wav")
    wavfile.write(tmp_path / "i32.wav", 16000, np.zeros(10, dtype=np.int32))
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "i32.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "junk.wav")
    with pytest.raises(DataError):
        load_wav(tmp_path / "missing.wav")


def test_mix_gain_examples():
    rng = np.random.default_rng(2)
    c = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= rms(c) / rms(n)
    assert mix_at_snr(Waveform(c), Waveform(n), 0.0).gain == pytest.approx(1.0, abs=1e-12)
    assert mix_at_snr(Waveform(c), Waveform(n), 20.0).gain == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(DataError):
        mix_at_snr(Waveform(c), Waveform(np.zeros(1000)), 5.0)
    with pytest.raises(DataError):
        mix_at_snr(Waveform(np.zeros(1000)), Waveform(n), 5.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 30), st.integers(50, 3000), st.integers(0, 10**6))
def test_mix_realises_snr(snr, noise_len, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(1000)
    rec = mix_at_snr(Waveform(c), Waveform(rng.standard_normal(noise_len)), snr, rng)
    scaled = rec.gain * rec.noise.samples
    assert len(rec.clean) == len(rec.noise) == len(rec.mixture) == 1000
    assert abs(20 * np.log10(rms(c) / rms(scaled)) - snr) < 0.01
    np.testing.assert_allclose(rec.mixture.samples, c + scaled, atol=1e-12)


def test_fit_noise_tiles_with_offset():
    noise = np.arange(10.0)
    out = fit_noise(noise, 25, np.random.default_rng(0))
    assert len(out) == 25
    offset = int(out[0])
    np.testing.assert_array_equal(out, np.roll(np.tile(noise, 4), -offset)[:25])


def test_segment_examples():
    x = np.arange(25600.0)
    segs = segment(x, 25600, 25600)
    assert len(segs) == 1 and np.array_equal(segs[0], x)
    segs = segment(np.ones(32000), 25600, 12800)
    assert len(segs) == 2
    assert np.all(segs[1][:19200] == 1) and np.all(segs[1][19200:] == 0)
    assert len(segs[1]) - 19200 == 6400
    segs = segment(np.ones(1000))
    assert len(segs) == 1 and np.sum(segs[0] == 0) == 24600
    with pytest.raises(UsageError):
        segment(np.zeros(0))
    with pytest.raises(UsageError):
        segment(np.ones(10), 5, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(8, 64), st.integers(1, 64))
def test_segment_properties(n, seg_len, hop):
    hop = min(hop, seg_len)
    x = np.arange(1, n + 1, dtype=float)
    segs = segment(x, seg_len, hop)
    assert len(segs) == max(1, int(np.ceil((n - seg_len) / hop)) + 1)
    covered = set()
    for i, s in enumerate(segs):
        assert len(s) == seg_len
        covered.update(int(v) for v in s if v > 0)
    assert covered == set(range(1, n + 1))
    tiled = np.concatenate(segment(x, seg_len, seg_len))
    assert np.array_equal(tiled[:n], x) and np.all(tiled[n:] == 0)


def test_synth_signals_bounded():
    rng = np.random.default_rng(3)
    voice = {"f0": 120.0, "formants": np.array([500.0, 1500.0, 2500.0]), "bandwidths": np.array([80.0, 120.0, 180.0])}
    s = synth_speech(rng, voice, 0.5)
    assert len(s) == 8000 and np.max(np.abs(s)) == pytest.approx(1.0)
    for kind, params in (("white", {}), ("pink", {"exponent": 1.0}), ("babble", {"talkers": 3, "band": (200, 3000)})):
        n = synth_noise(rng, kind, params, 0.5)
        assert len(n) == 8000 and rms(n) > 0
    with pytest.raises(UsageError):
        synth_noise(rng, "brown", {}, 0.5)


def test_corpus_snrs_match_files(corpus):
    assert len(corpus.entries) == 12
    for e in corpus.entries:
        assert 0.0 <= e.snr_db <= 20.0
        rec = corpus.load_record(e)
        achieved = 20 * np.log10(rms(rec.clean.samples) / rms(rec.noise.samples))
        assert abs(achieved - e.snr_db) < 0.01
        np.testing.assert_allclose(rec.mixture.samples, rec.clean.samples + rec.noise.samples, atol=1e-6)


def test_corpus_deterministic(corpus, tmp_path):
    again = synth_corpus(7, 12, (0.0, 20.0), tmp_path, duration=1.0)
    assert again.digest == corpus.digest
    other = synth_corpus(8, 12, (0.0, 20.0), tmp_path / "o", duration=1.0)
    assert other.digest != corpus.digest


def test_corpus_splits_disjoint(corpus):
    corpus.validate()
    splits = {s: corpus.split(s) for s in ("train", "val", "test")}
    assert all(splits.values())
    for kind in ("speaker_id", "noise_id"):
        ids = [{getattr(e, kind) for e in v} for v in splits.values()]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])


def test_manifest_roundtrip_and_relative_paths(corpus):
    m = read_manifest(corpus.path)
    assert m.digest == corpus.digest
    for line in corpus.path.read_text().splitlines():
        obj = json.loads(line)
        assert set(obj) == {"clean", "noise", "mixture", "snr_db", "split", "speaker_id", "noise_id"}
        assert not obj["clean"].startswith("/")


def test_manifest_validation_errors(tmp_path, corpus):
    e = corpus.entries[0]
    dup = Manifest(tmp_path / "m.jsonl", [e, e])
    with pytest.raises(DataError):
        dup.validate()
    ghost = ManifestEntry("clean/x.wav", "noise/x.wav", "mixture/x.wav", 5.0, "train", "s", "n")
    with pytest.raises(DataError, match="missing"):
        Manifest(tmp_path / "m.jsonl", [ghost]).validate()
    a = ManifestEntry(e.clean, e.noise, e.mixture, 1.0, "train", "spk", "n1")
    b = ManifestEntry(e.clean, e.noise, "mixture/other.wav", 1.0, "test", "spk", "n2")
    m = Manifest(corpus.path.parent / "tmp.jsonl", [a, b])
    with pytest.raises(DataError, match="speaker_id"):
        m.validate()


def test_bad_manifest_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"clean": "a.wav"}\n')
    with pytest.raises(DataError, match=":1:"):
        read_manifest(p)
    with pytest.raises(DataError):
        read_manifest(tmp_path / "none.jsonl")


def test_write_manifest(tmp_path, corpus):
    m = Manifest(tmp_path / "sub" / "m.jsonl", corpus.entries[:2])
    write_manifest(m)
    assert len(read_manifest(m.path).entries) == 2
