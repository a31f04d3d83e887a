import json
import math

import numpy as np
import pytest

from neatmol.encoder import EncoderConfig
from neatmol.generator import (
    GenConfig,
    IntegrationError,
    complete_prefix,
    diffusion_coefficient,
    generate,
    integrate_euler,
    integrate_euler_maruyama,
    velocity_to_score,
    write_results,
)
from neatmol.heads import FlowConfig
from neatmol.model import ModelConfig, NeatModel


def gaussian_flow(mu, std):
    """Exact marginal velocity of the linear path from N(0, I) to N(mu, diag(std^2))."""
    mu, std = np.asarray(mu, float), np.asarray(std, float)

    def v(x, t):
        s_t = np.sqrt((1 - t) ** 2 + (t * std) ** 2)
        ds = (-(1 - t) + t * std**2) / s_t
        return mu + ds / s_t * (x - t * mu)

    return v


def tiny_model(seed=0, zero_init=True, **kw):
    cfg = ModelConfig(("H", "C", "N", "O"), EncoderConfig(layers=1, heads=2, hidden=16, fourier_bands=4, dropout=0.0),
                      FlowConfig(hidden=16, blocks=1, time_dim=8, fourier_bands=4), sigma=1.0)
    return NeatModel.init(cfg, seed=seed, zero_init=zero_init, **kw)


def test_euler_examples():
    assert integrate_euler(np.array([0.0]), lambda x, t: np.ones_like(x), 1)[0] == 1.0
    assert integrate_euler(np.array([0.0]), lambda x, t: np.full_like(x, t), 2)[0] == 0.25
    out = integrate_euler(np.array([1.0]), lambda x, t: -x, 60)[0]
    assert out == pytest.approx((1 - 1 / 60) ** 60, abs=1e-12)


def test_euler_first_order_convergence():
    # error halves when the step count doubles
    errs = [abs(integrate_euler(np.array([1.0]), lambda x, t: -x, n)[0] - math.exp(-1)) for n in (60, 120)]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)


def test_euler_rejects_nonfinite():
    with pytest.raises(IntegrationError, match="step 3"):
        integrate_euler(np.zeros(2), lambda x, t: np.full_like(x, np.nan) if t >= 0.3 else x, 10)
    with pytest.raises(ValueError):
        integrate_euler(np.zeros(2), lambda x, t: x, 0)


def test_score_conversion():
    np.testing.assert_allclose(velocity_to_score([1.0, 1.0], [0.5, 0.5], 0.5), [0.0, 0.0])
    np.testing.assert_allclose(velocity_to_score([0.0], [1.0], 0.0), [-1.0])
    with pytest.raises(ValueError):
        velocity_to_score([0.0], [0.0], 1.0)
    # Gaussian oracle: the exact flow velocity maps to the exact score
    mu, std = np.array([1.0, -2.0]), np.array([0.5, 1.5])
    v = gaussian_flow(mu, std)
    x = np.random.default_rng(0).normal(size=(5, 2))
    t = 0.3
    s_t = np.sqrt((1 - t) ** 2 + (t * std) ** 2)
    np.testing.assert_allclose(velocity_to_score(v(x, t), x, t), -(x - t * mu) / s_t**2, rtol=1e-10)


def test_diffusion_coefficient():
    assert diffusion_coefficient(0.0) == pytest.approx(2000.0)
    assert diffusion_coefficient(1.0) == 0.0
    assert diffusion_coefficient(0.5, eta=0.0) == pytest.approx(2.0)


def test_em_without_noise_or_score_is_euler():
    v = gaussian_flow([1, 2, 3], [1, 2, 0.5])
    x0 = np.random.default_rng(0).normal(size=(7, 3))
    a = integrate_euler(x0, v, 30)
    b = integrate_euler_maruyama(x0, v, 30, 0.0, 1e-3, np.random.default_rng(0), use_score=False)
    np.testing.assert_array_equal(a, b)


def test_em_reaches_gaussian_target():
    mu, std = np.array([1.0, -2.0, 0.5]), np.array([0.5, 1.5, 1.0])
    rng = np.random.default_rng(3)
    x = integrate_euler_maruyama(rng.standard_normal((20000, 3)), gaussian_flow(mu, std), 60, 1.0, 1e-3, rng)
    np.testing.assert_allclose(x.mean(0), mu, atol=0.05 * np.abs(mu).max())
    np.testing.assert_allclose(x.std(0), std, rtol=0.05)


def test_em_deterministic_per_row_streams():
    v = gaussian_flow([0, 0, 0], [1, 1, 1])
    x0 = np.zeros((3, 3))
    a = integrate_euler_maruyama(x0, v, 10, 0.3, 1e-3, [np.random.default_rng(i) for i in range(3)])
    b = integrate_euler_maruyama(x0, v, 10, 0.3, 1e-3, [np.random.default_rng(i) for i in range(3)])
    np.testing.assert_array_equal(a, b)
    # a row's draws do not depend on its neighbours
    c = integrate_euler_maruyama(x0[:1], v, 10, 0.3, 1e-3, [np.random.default_rng(0)])
    np.testing.assert_array_equal(a[:1], c)


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(integrator="rk4")
    with pytest.raises(ValueError):
        GenConfig(max_atoms=0)
    with pytest.raises(ValueError):
        GenConfig(tau=-1)


def never_stop(model):
    model.params["type_head.b"].data[-1] = -1e4
    return model


def always_stop(model):
    model.params["type_head.b"].data[-1] = 1e4
    return model


def test_max_atoms_cap():
    model = never_stop(tiny_model())
    res = generate(model, GenConfig(max_atoms=1, seed=0), 5)
    assert all(r.n_atoms == 1 and r.stop_reason == "max_atoms" for r in res)
    res = generate(model, GenConfig(max_atoms=4, seed=0), 3)
    assert all(r.n_atoms == 4 for r in res)


def test_stop_token_and_first_type():
    model = always_stop(tiny_model(type_marginal=[0, 1, 0, 0]))
    res = generate(model, GenConfig(seed=0, first_type="marginal"), 10)
    assert all(r.n_atoms == 1 and r.stop_reason == "stop_token" and r.types[0] == 1 for r in res)
    # default: uniform over the element vocabulary, never the stop token
    firsts = [r.types[0] for r in generate(model, GenConfig(seed=0), 400)]
    counts = np.bincount(firsts, minlength=4)
    assert len(counts) == 4 and counts.min() > 60


def test_generation_deterministic_and_batch_independent():
    model = tiny_model(zero_init=False, max_train_atoms=8)
    cfg = GenConfig(integrator="euler_maruyama", steps=10, seed=4)
    a = generate(model, cfg, 6, batch_size=6)
    b = generate(model, cfg, 6, batch_size=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.types, y.types)
        np.testing.assert_allclose(x.positions, y.positions, atol=1e-5)
    assert max(r.n_atoms for r in a) <= math.ceil(1.1 * 8)


def test_prefix_completion_contract():
    model = never_stop(tiny_model(zero_init=False))
    rng = np.random.default_rng(0)
    pt, pp = np.array([1, 1, 3]), rng.normal(size=(3, 3))
    res = complete_prefix(model, pt, pp, GenConfig(steps=5, max_atoms=6, seed=1), 4)
    gram = lambda p: (p - p.mean(0)) @ (p - p.mean(0)).T
    for r in res:
        np.testing.assert_array_equal(r.types[:3], pt)
        np.testing.assert_allclose(gram(r.positions[:3]), gram(pp), atol=1e-9)
        assert r.n_atoms == 6
    assert not np.allclose(res[0].positions[:3], res[1].positions[:3])
    with pytest.raises(ValueError):
        complete_prefix(model, [1, model.vocab.stop_index], pp[:2], GenConfig(), 1)
    with pytest.raises(ValueError):
        complete_prefix(model, [], np.zeros((0, 3)), GenConfig(), 1)


def test_next_type_distribution_is_permutation_invariant():
    model = tiny_model(zero_init=False)
    rng = np.random.default_rng(2)
    types, pos = rng.integers(0, 4, size=7), rng.normal(size=(7, 3))
    perm = rng.permutation(7)
    p = model.type_probs(model.encode([(types, pos), (types[perm], pos[perm])])).data
    np.testing.assert_allclose(p[0], p[1], atol=1e-6)


def test_write_results(tmp_path):
    model = always_stop(tiny_model())
    res = generate(model, GenConfig(seed=0), 3)
    manifest = write_results(res, tmp_path, model)
    rows = [json.loads(l) for l in manifest.read_text().splitlines()]
    assert [r["file"] for r in rows] == ["sample_00000.xyz", "sample_00001.xyz", "sample_00002.xyz"]
    assert rows[1]["seed"] == [0, 1] and rows[0]["stop_reason"] == "stop_token"
    assert (tmp_path / "sample_00000.xyz").read_text().startswith("1\n")
