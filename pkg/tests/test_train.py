import csv
import json

import numpy as np
import pytest

from cvunet import tensor as T
from cvunet.datapipe import MixtureRecord, read_manifest, save_wav, synth_corpus
from cvunet.dsp import Waveform, operators
from cvunet.errors import ConfigurationError, DataError
from cvunet.model import ModelConfig, build
from cvunet.objective import SISDR_CAP_DB
from cvunet.train import (AdamHyper, AdamState, EvalReport, SegmentSampler, TrainConfig, adam_step,
                          clip_by_global_norm, enhance_waveform, evaluate, global_norm, level_gain,
                          read_eval_csv, train)

TINY = ModelConfig(levels=2, channels=(4, 8), dilations=(1, 1), input_size=(2, 16, 16), latent_dim=8,
                   stft_hop=8)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return synth_corpus(3, 10, (0.0, 20.0), tmp_path_factory.mktemp("c"), duration=0.5)


def tiny_cfg(tmp_path, corpus, **kw):
    base = dict(model=TINY, lr=1e-3, steps=50, batch_size=2, seed=1, checkpoint_every=0,
                manifest=str(corpus.path), out_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


def test_adam_first_step():
    p = T.parameter(np.array([0.0]))
    state = AdamState.zeros_like([p])
    assert adam_step([p], [np.array([1.0])], state, AdamHyper(lr=1e-3, clip_norm=None))
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(-1e-3 * 1 / (1 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(-9.99999995e-4, abs=1e-11)


def test_adam_zero_gradient_decays_moments():
    p = T.parameter(np.array([1.0, 2.0]))
    state = AdamState.zeros_like([p])
    adam_step([p], [np.array([1.0, -1.0])], state, AdamHyper(clip_norm=None))
    first = p.data - np.array([1.0, 2.0])
    before = p.data.copy()
    m, v = state.m[0].copy(), state.v[0].copy()
    adam_step([p], [np.zeros(2)], state, AdamHyper(clip_norm=None))
    np.testing.assert_allclose(state.m[0], 0.9 * m)
    np.testing.assert_allclose(state.v[0], 0.999 * v)
    # the momentum keeps moving parameters in the same direction
    assert np.all(np.sign(p.data - before) == np.sign(first))


def test_adam_skips_non_finite():
    p = T.parameter(np.array([1.0]))
    state = AdamState.zeros_like([p])
    assert not adam_step([p], [np.array([np.nan])], state, AdamHyper())
    assert not adam_step([p], [np.array([np.inf])], state, AdamHyper())
    assert p.data[0] == 1.0 and state.skipped == 2 and state.step == 0


@pytest.mark.parametrize("scale", [0.1, 1.0, 10.0, 1e4])
def test_clip_global_norm(scale):
    grads = [scale * np.ones((3, 3)), -scale * np.ones(4)]
    clipped, norm = clip_by_global_norm(grads, 5.0)
    assert norm == pytest.approx(scale * np.sqrt(13))
    assert global_norm(clipped) <= 5.0 + 1e-6
    if norm <= 5.0:
        assert all(np.array_equal(a, b) for a, b in zip(grads, clipped))


def test_level_gain_unit_bin_power():
    cfg = TINY.stft
    x = np.random.default_rng(0).standard_normal(cfg.segment_length)
    y = x * level_gain(x, cfg)
    assert np.sqrt(np.mean(y ** 2)) == pytest.approx(1 / np.sqrt(np.sum(operators(cfg).window ** 2)))
    assert level_gain(np.zeros(10), cfg) == 1.0


def test_sampler_skips_silent_targets():
    n = 2000
    silent = MixtureRecord(Waveform(np.zeros(n)), Waveform(np.ones(n)), Waveform(np.ones(n)), 0.0, 1.0)
    live = MixtureRecord(Waveform(np.ones(n)), Waveform(np.ones(n)), Waveform(2 * np.ones(n)), 0.0, 1.0)
    mix, clean = SegmentSampler([silent, live], 128, 0).batch(6)
    assert mix.shape == clean.shape == (6, 128)
    assert np.all(clean == 1)


def test_config_json(tmp_path):
    cfg = TrainConfig(model=TINY, steps=3, manifest="data/m.jsonl", out_dir="out")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_json(p)
    assert back.model == TINY and back.steps == 3
    assert back.manifest == str(tmp_path / "data/m.jsonl") and back.out_dir == str(tmp_path / "out")
    p.write_text(json.dumps({**cfg.to_dict(), "learning_rate": 1}))
    with pytest.raises(ConfigurationError, match="learning_rate"):
        TrainConfig.from_json(p)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(betas=(0.9, 1.0))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory, corpus):
    tmp = tmp_path_factory.mktemp("smoke")
    a = train(tiny_cfg(tmp / "a", corpus))
    b = train(tiny_cfg(tmp / "b", corpus))
    return a, b


def test_smoke_loss_decreases(smoke):
    res, _ = smoke
    assert len(res.history) == 50 and res.skipped_steps == 0
    first = np.mean([h["total"] for h in res.history[:5]])
    last = np.mean([h["total"] for h in res.history[-5:]])
    assert last < first


def test_metrics_csv(smoke):
    res, _ = smoke
    with open(res.metrics) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "mse_mag", "mse_real", "mse_imag", "kl", "sisdr_db", "total"]
    assert len(rows) == 50 and float(rows[-1]["total"]) == res.history[-1]["total"]


def test_training_bit_exact(smoke):
    a, b = smoke
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.metrics.read_bytes() == b.metrics.read_bytes()


def test_deterministic_variant_logs_zero_kl(tmp_path, corpus):
    res = train(tiny_cfg(tmp_path, corpus, steps=3, model=ModelConfig(**{**TINY.to_dict(), "variational": False})))
    assert all(h["kl"] == 0.0 for h in res.history)


def test_train_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        train(TrainConfig(model=TINY, steps=1, manifest=str(tmp_path / "none.jsonl"), out_dir=str(tmp_path)))


@pytest.mark.parametrize("n", [1, 100, 135, 1000, 3001])
def test_enhance_preserves_length(n, smoke):
    model = smoke[0].model
    x = np.random.default_rng(n).standard_normal(n) * 0.1
    y = enhance_waveform(model, x)
    assert y.shape == (n,) and np.all(np.isfinite(y))


def test_enhance_idempotent_and_silence(smoke):
    model = smoke[0].model
    x = np.random.default_rng(0).standard_normal(700) * 0.1
    assert np.array_equal(enhance_waveform(model, x), enhance_waveform(model, x))
    assert np.all(enhance_waveform(model, np.zeros(900)) == 0)
    assert enhance_waveform(model, np.zeros(0)).shape == (0,)


def test_enhance_scale_equivariant(smoke):
    # every segment is level-normalised, so loudness only scales the output
    model = smoke[0].model
    x = np.random.default_rng(1).standard_normal(500) * 0.1
    np.testing.assert_allclose(enhance_waveform(model, 3 * x), 3 * enhance_waveform(model, x), rtol=1e-4,
                               atol=1e-7)


def test_evaluate_oracle_and_identity(corpus, tmp_path):
    oracle = evaluate(lambda rec: rec.clean.samples, corpus, "test", "oracle")
    assert all(r["sisdr_enhanced"] == SISDR_CAP_DB for r in oracle.rows)
    ident = evaluate(lambda rec: rec.mixture.samples, corpus, "test", "identity")
    assert all(r["sisdr_enhanced"] == r["sisdr_noisy"] for r in ident.rows)
    assert ident.improvement_db == 0.0
    paths = ident.write(tmp_path)
    rows = read_eval_csv(paths["csv"])
    recomputed = EvalReport("identity", rows)
    assert recomputed.aggregates == ident.aggregates
    assert "identity" in paths["table"].read_text()
    summary = json.loads(paths["summary"].read_text())
    assert summary["pesq"] is None and summary["missing"] == []


def test_evaluate_reports_missing(tmp_path):
    m = synth_corpus(4, 10, (0.0, 20.0), tmp_path, duration=0.5)
    victim = m.split("test")[0]
    m.resolve(victim.mixture).unlink()
    rep = evaluate(lambda rec: rec.mixture.samples, read_manifest(m.path), "test")
    assert rep.missing == [victim.record_id]
    assert len(rep.rows) == len(m.split("test")) - 1
    with pytest.raises(DataError):
        evaluate(lambda rec: rec.mixture.samples, m, "nonexistent")


def test_enhance_file_roundtrip(tmp_path, smoke):
    from cvunet.train import enhance_file
    x = 0.1 * np.random.default_rng(2).standard_normal(800)
    save_wav(x, tmp_path / "in.wav")
    y = enhance_file(smoke[0].model, tmp_path / "in.wav", tmp_path / "out.wav")
    assert len(y) == 800 and (tmp_path / "out.wav").exists()


def test_sampler_remix_snr():
    rng = np.random.default_rng(0)
    recs = [MixtureRecord(Waveform(rng.standard_normal(3000)), Waveform(rng.standard_normal(3000)),
                          Waveform(np.zeros(3000)), 0.0, 1.0) for _ in range(3)]
    mix, clean = SegmentSampler(recs, 512, 1, remix_snr=(5.0, 5.0)).batch(8)
    noise = mix - clean
    snr = 20 * np.log10(np.sqrt(np.mean(clean ** 2, axis=1)) / np.sqrt(np.mean(noise ** 2, axis=1)))
    np.testing.assert_allclose(snr, 5.0, atol=1e-9)
    with pytest.raises(ConfigurationError):
        TrainConfig(remix_snr=(10, 0))
