import numpy as np
import pytest

from cvunet import tensor as T
from cvunet.complex_nn import ComplexTensor
from cvunet.errors import ConfigurationError, DataError, UsageError
from cvunet.model import (LOGVAR_MAX, LOGVAR_MIN, ModelConfig, _reparameterize, build, checkpoint_bytes,
                          load_checkpoint, parameter_count, save_checkpoint)
from cvunet.tensor import Tensor

RED = ModelConfig.reduced()


def rand_input(rng, cfg, batch=2):
    return rng.standard_normal((batch,) + cfg.input_size)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(levels=3, channels=(8, 16), dilations=(1, 1, 1))
    with pytest.raises(ConfigurationError):
        ModelConfig.reduced(input_size=(2, 60, 64))
    with pytest.raises(ConfigurationError):
        ModelConfig.reduced(bn_mode="layer")
    with pytest.raises(ValueError):
        ModelConfig.reduced(encoding="polar")


def test_config_dict_roundtrip():
    cfg = ModelConfig.reduced(variational=False, encoding="ReIm")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == ModelConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != RED.digest()
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({**cfg.to_dict(), "extra": 1})


def test_same_seed_identical():
    a, b = build(RED, 3), build(RED, 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = build(RED, 4)
    assert not np.array_equal(a.encoder[0].conv.kernel_re.data, c.encoder[0].conv.kernel_re.data)


def test_initialisation_rules():
    m = build(RED, 0)
    for name, p in m.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("bias") or leaf.startswith("beta") or leaf in ("bq", "bk", "bv", "gamma_ri", "gamma_ir"):
            assert np.all(p.data == 0), name
        elif leaf in ("gamma_rr", "gamma_ii"):
            assert np.all(p.data == 1), name
        elif leaf.startswith("slope"):
            assert np.all(p.data == np.float32(0.25)), name
        elif leaf == "gamma":
            assert np.all(p.data == 0), name


@pytest.mark.parametrize("sa", [True, False])
@pytest.mark.parametrize("variational", [True, False])
def test_parameter_count_matches_build(sa, variational):
    cfg = ModelConfig.reduced(self_attention=sa, variational=variational)
    assert build(cfg).num_parameters() == parameter_count(cfg)


def test_attention_adds_parameters():
    assert parameter_count(ModelConfig()) > parameter_count(ModelConfig(self_attention=False))
    assert parameter_count(RED) > parameter_count(ModelConfig.reduced(self_attention=False))


def test_parameter_names_unique_and_ordered():
    m = build(RED)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in build(RED).named_parameters()]
    assert len({id(p) for p in m.parameters()}) == len(names)


def test_reduced_forward_shapes():
    rng = np.random.default_rng(0)
    m = build(RED)
    bottom, laterals = m.encode_path(ComplexTensor(Tensor(rng.standard_normal((2, 1, 64, 64)), dtype=np.float32),
                                                   Tensor(rng.standard_normal((2, 1, 64, 64)), dtype=np.float32)))
    assert [lat.shape for lat in laterals] == [(2, 8, 32, 32), (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]
    assert bottom.shape == (2, 64, 4, 4)
    out, latent = m(rand_input(rng, RED).astype(np.float32), np.random.default_rng(1))
    assert out.shape == (2, 2, 64, 64)
    assert latent.mu_re.shape == (2, 64) and latent.logvar_im.shape == (2, 64)


def test_single_example_input():
    m = build(RED)
    out, _ = m(np.zeros(RED.input_size, dtype=np.float32))
    assert out.shape == (1, 2, 64, 64)


def test_wrong_input_shape():
    m = build(RED)
    with pytest.raises(UsageError):
        m(np.zeros((1, 2, 32, 64), dtype=np.float32))


def test_shape_preserving_other_sizes():
    cfg = ModelConfig.reduced(input_size=(2, 32, 48), self_attention=False)
    m = build(cfg)
    out, _ = m(np.random.default_rng(0).standard_normal((1, 2, 32, 48)).astype(np.float32))
    assert out.shape == (1, 2, 32, 48)


def test_sa_disabled_laterals_are_block_outputs():
    rng = np.random.default_rng(2)
    cfg = ModelConfig.reduced(self_attention=False)
    m = build(cfg)
    x = ComplexTensor(Tensor(rng.standard_normal((2, 1, 64, 64))), Tensor(rng.standard_normal((2, 1, 64, 64))))
    _, laterals = m.encode_path(x)
    h = x
    for block, lat in zip(m.encoder, laterals):
        h = block(h)
        assert np.array_equal(h.re.data, lat.re.data)


def test_zero_input_zero_laterals():
    m = build(RED)
    z = Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32))
    _, laterals = m.encode_path(ComplexTensor(z, z))
    for lat in laterals:
        assert np.all(lat.re.data == 0) and np.all(lat.im.data == 0)


def test_inference_is_deterministic():
    rng = np.random.default_rng(3)
    m = build(RED)
    x = rand_input(rng, RED).astype(np.float32)
    m(x, np.random.default_rng(0))  # populate running statistics
    m.eval()
    with T.no_grad():
        a, _ = m(x)
        b, _ = m(x)
    assert np.array_equal(a.data, b.data)


def test_train_mode_reproducible_with_seeded_rng():
    x = rand_input(np.random.default_rng(4), RED).astype(np.float32)
    a, _ = build(RED)(x, np.random.default_rng(9))
    b, _ = build(RED)(x, np.random.default_rng(9))
    c, _ = build(RED)(x, np.random.default_rng(10))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_deterministic_bottleneck_train_mode():
    cfg = ModelConfig.reduced(variational=False)
    x = rand_input(np.random.default_rng(5), cfg).astype(np.float32)
    m = build(cfg)
    a, la = m(x, np.random.default_rng(1))
    b, _ = m(x, np.random.default_rng(2))
    assert la is None
    assert np.array_equal(a.data, b.data)


def test_reparameterisation_monte_carlo():
    rng = np.random.default_rng(6)
    n = 100_000
    mu = rng.standard_normal(8)
    logvar = rng.uniform(-1, 1, 8)
    z = _reparameterize(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(logvar, (n, 1))), rng).data
    sigma = np.exp(logvar / 2)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * sigma / np.sqrt(n) + 1e-12)


def test_logvar_clamped():
    m = build(RED, dtype=np.float64)
    m.bottleneck.logvar_re.bias.data = np.full(64, 1e3)
    m.bottleneck.logvar_im.bias.data = np.full(64, -1e3)
    _, g = m(rand_input(np.random.default_rng(7), RED), np.random.default_rng(0))
    assert np.all(g.logvar_re.data == LOGVAR_MAX) and np.all(g.logvar_im.data == LOGVAR_MIN)


def test_gradient_reaches_every_parameter():
    m = build(RED, dtype=np.float64)
    x = rand_input(np.random.default_rng(8), RED)
    out, _ = m(x, np.random.default_rng(0))
    grads = T.backward(T.tsum(out), m.parameters())
    for (name, _), g in zip(m.named_parameters(), grads):
        # with the residual gain at zero only the gain itself sees gradient
        if ".re." in name and "attention" in name or ".im." in name and "attention" in name:
            if not name.endswith("gamma"):
                continue
        assert np.any(g != 0), name


def test_checkpoint_roundtrip(tmp_path):
    m = build(RED, 11)
    m(rand_input(np.random.default_rng(9), RED).astype(np.float32), np.random.default_rng(0))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(m, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == m.config
    for (na, a), (nb, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert na == nb and np.array_equal(a, b)


def test_checkpoint_header(tmp_path):
    blob = checkpoint_bytes(build(RED))
    assert blob[:4] == b"CVUN"
    assert blob[8:40] == RED.digest()


def test_checkpoint_corruption(tmp_path):
    blob = checkpoint_bytes(build(RED))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        load_checkpoint(bad)
    bad.write_bytes(blob[:-10])
    with pytest.raises(DataError):
        load_checkpoint(bad)
    tampered = bytearray(blob)
    tampered[10] ^= 0xFF  # inside the digest
    bad.write_bytes(bytes(tampered))
    with pytest.raises(DataError):
        load_checkpoint(bad)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
