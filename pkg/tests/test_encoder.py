import numpy as np
import pytest

from neatmol import tensor as T
from neatmol.encoder import (
    EncoderConfig,
    embed_atoms,
    encode,
    encode_batch,
    fourier_features,
    fourier_frequencies,
    init_encoder_params,
)
from neatmol.tensor import Tensor, grad_check

CFG = EncoderConfig(layers=2, heads=4, hidden=32, fourier_bands=8, dropout=0.1)


@pytest.fixture(scope="module")
def params():
    return init_encoder_params(CFG, 4, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(layers=0)


def test_fourier_layout():
    f = fourier_features(np.zeros((1, 3)), 8, 0.1, 10.0)
    assert f.shape == (1, 48)
    np.testing.assert_array_equal(f[0, :24], 0.0)
    np.testing.assert_array_equal(f[0, 24:], 1.0)
    freqs = fourier_frequencies(8, 0.1, 10.0)
    assert freqs[0] == pytest.approx(0.1) and freqs[-1] == pytest.approx(10.0)
    np.testing.assert_allclose(freqs[1:] / freqs[:-1], freqs[1] / freqs[0])
    x = np.array([[0.3, -1.2, 2.0]])
    # coordinate-major within each block: index d * bands + k
    assert f.dtype == np.float32
    g = fourier_features(x, 8, 0.1, 10.0)
    assert g[0, 1 * 8 + 3] == pytest.approx(np.sin(2 * np.pi * freqs[3] * -1.2), abs=1e-6)
    r = fourier_features(x, 8, 0.1, 10.0, raw=True)
    assert r.shape == (1, 51) and EncoderConfig(fourier_bands=8, fourier_raw=True).fourier_dim == 51
    np.testing.assert_array_equal(r[:, :48], g)
    np.testing.assert_allclose(r[0, 48:], x[0], rtol=1e-7)


def test_embed_examples(params):
    a = embed_atoms(np.array([1, 1]), np.array([[0, 0, 0], [0, 0, 0.5]]), CFG, params).data
    assert not np.allclose(a[0], a[1])
    with pytest.raises(ValueError):
        embed_atoms(np.array([4]), np.zeros((1, 3)), CFG, params)


def test_embed_permutation_equivariant(params, rng):
    types, pos = rng.integers(0, 4, size=7), rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    a = embed_atoms(types, pos, CFG, params).data
    b = embed_atoms(types[perm], pos[perm], CFG, params).data
    np.testing.assert_allclose(b, a[perm], atol=1e-6)


def test_encode_permutation_invariant(params, rng):
    for _ in range(20):
        n = int(rng.integers(1, 15))
        types, pos = rng.integers(0, 4, size=n), rng.normal(size=(n, 3)) * 2
        perm = rng.permutation(n)
        za = encode(types, pos, CFG, params)
        zb = encode(types[perm], pos[perm], CFG, params)
        assert np.abs(za - zb).max() < 1e-4


def test_single_atom_and_duplicate(params):
    z1 = encode(np.array([2]), np.zeros((1, 3)), CFG, params)
    z2 = encode(np.array([2, 2]), np.zeros((2, 3)), CFG, params)
    assert not np.allclose(z1, z2)
    with pytest.raises(ValueError):
        encode(np.array([], dtype=np.int64), np.zeros((0, 3)), CFG, params)


def test_padding_does_not_leak(params, rng):
    small = (rng.integers(0, 4, size=2), rng.normal(size=(2, 3)))
    big = (rng.integers(0, 4, size=9), rng.normal(size=(9, 3)))
    alone = encode(*small, CFG, params)
    batched = encode_batch([small, big], CFG, params).data[0]
    np.testing.assert_allclose(batched, alone, atol=1e-5)


def test_not_translation_invariant(params, rng):
    types, pos = rng.integers(0, 4, size=4), rng.normal(size=(4, 3))
    assert not np.allclose(encode(types, pos, CFG, params), encode(types, pos + 1.0, CFG, params))


def test_eval_is_deterministic_and_dropout_is_not(params, rng):
    s = [(rng.integers(0, 4, size=5), rng.normal(size=(5, 3)))]
    e1, e2 = encode_batch(s, CFG, params).data, encode_batch(s, CFG, params).data
    np.testing.assert_array_equal(e1, e2)
    d1 = encode_batch(s, CFG, params, np.random.default_rng(1)).data
    assert not np.allclose(d1, e1)


def test_no_bias_in_norms_and_mlp(params):
    names = set(params)
    assert "encoder.block0.mlp.fc_w" in names and not any(n.endswith("mlp.fc_b") for n in names)
    assert not any(n.startswith("encoder.block0.ln1_b") for n in names)


def test_encoder_gradients():
    cfg = EncoderConfig(layers=1, heads=2, hidden=8, mlp_ratio=2, fourier_bands=2, dropout=0.0)
    p = init_encoder_params(cfg, 4, np.random.default_rng(3))
    for v in p.values():  # move off the init point so every parameter matters
        v.data += np.random.default_rng(4).normal(0, 0.3, size=v.shape).astype(np.float32)
    rng = np.random.default_rng(5)
    sets = [(rng.integers(0, 4, size=3), rng.normal(size=(3, 3))), (rng.integers(0, 4, size=2), rng.normal(size=(2, 3)))]
    w = Tensor(rng.normal(size=(2, 8)))
    rep = grad_check(lambda: T.sum(T.mul(encode_batch(sets, cfg, p), w)), list(p.values()), max_entries=8)
    assert rep.passed, rep
