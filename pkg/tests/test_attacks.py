import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatlab.attacks import (AttackConfig, AttackError, PriorState, fgsm_step, input_gradient, margin_config,
                            margin_loss, margin_pgd, pgd, pgd_config, project, sample_init, update_prior_state)
from fatlab.models import ModelSpec, init_params, model_forward

import oracles

EPS = 8 / 255


def small_problem(seed=0, n=6, d=5, k=3, hidden=(4,)):
    rng = np.random.default_rng(seed)
    params = init_params(ModelSpec(d, hidden, k), seed)
    return params, rng.uniform(size=(n, d)), rng.integers(0, k, n), rng


def test_zero_init_is_zero():
    assert not sample_init("zero", EPS, (3, 4)).any()


def test_bernoulli_half_values():
    eta = sample_init("bernoulli_half", EPS, (50, 20), rng=np.random.default_rng(0))
    assert set(np.unique(eta)) == {-4 / 255, 4 / 255}


def test_random_inits_stay_in_ball():
    rng = np.random.default_rng(1)
    for scheme in ("normal_half", "uniform_full", "bernoulli_half"):
        eta = sample_init(scheme, EPS, (200, 10), rng=rng)
        assert np.abs(eta).max() <= EPS


def test_unknown_scheme_and_missing_prior_rejected():
    with pytest.raises(AttackError):
        sample_init("gaussian", EPS, (1, 2), rng=np.random.default_rng(0))
    with pytest.raises(AttackError, match="prior"):
        sample_init("atta_prior", EPS, (1, 2))
    with pytest.raises(ValueError):
        AttackConfig(EPS, init_scheme="gaussian")


def test_default_step_sizes():
    assert AttackConfig(EPS, init_scheme="uniform_full").alpha == 1.25 * EPS
    assert AttackConfig(EPS, init_scheme="bernoulli_half").alpha == EPS
    assert pgd_config(EPS).alpha == EPS / 4


def test_project_respects_ball_and_box():
    x = np.array([0.0, 0.5, 1.0])
    d = project(x, np.array([-0.3, 0.3, 0.3]), 0.1)
    assert d.tolist() == [0.0, 0.1, 0.0]


def test_fgsm_matches_linear_closed_form():
    for seed in range(20):
        params, x, y, rng = small_problem(seed, hidden=())
        eta = sample_init("uniform_full", EPS, x.shape, rng=rng)
        w, b = params.layers[0]
        expected = oracles.linear_fgsm(w, b, x, y, eta, 1.25 * EPS, EPS)
        np.testing.assert_array_equal(fgsm_step(params, x, y, eta, 1.25 * EPS, EPS), expected)


def test_input_gradient_matches_finite_differences():
    params, x, y, _ = small_problem(3)
    g = input_gradient(params, x, y)

    def loss(z):
        logits, _ = oracles.mlp_forward(params.layers, z)
        return oracles.mean_ce(logits, y) * len(y)

    np.testing.assert_allclose(g, oracles.central_difference(loss, x), rtol=1e-5, atol=1e-8)


def test_pgd_single_step_equals_fgsm():
    params, x, y, _ = small_problem(4)
    cfg = AttackConfig(EPS, EPS, 1, "zero")
    a = pgd(params, x, y, cfg)
    b = fgsm_step(params, x, y, np.zeros_like(x), EPS, EPS)
    assert a.tobytes() == b.tobytes()


def test_epsilon_zero_gives_zero_perturbation():
    params, x, y, _ = small_problem(5)
    assert not pgd(params, x, y, AttackConfig(0.0, 0.0, 3, "zero")).any()


def test_pgd_increases_loss_on_average():
    params, x, y, rng = small_problem(6, n=40, d=8)
    delta = pgd(params, x, y, pgd_config(0.1, 10), rng=rng)
    clean = oracles.mean_ce(oracles.mlp_forward(params.layers, x)[0], y)
    adv = oracles.mean_ce(oracles.mlp_forward(params.layers, x + delta)[0], y)
    assert adv > clean


def test_margin_loss_definition():
    logits = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, -1.0]])
    assert margin_loss(logits, np.array([0, 0])).tolist() == [-1.0, 5.0]


def test_margin_pgd_reduces_margin():
    params, x, y, rng = small_problem(7, n=30, d=8)
    cfg = margin_config(0.1, 10)
    delta = margin_pgd(params, x, y, cfg)
    before = margin_loss(model_forward(params, x)[0].data, y).mean()
    after = margin_loss(model_forward(params, x + delta)[0].data, y).mean()
    assert after > before


def test_non_finite_gradient_rejected():
    params, x, y, _ = small_problem(8)
    with pytest.raises(AttackError, match="non-finite"):
        fgsm_step(params, x, y, np.zeros_like(x), EPS, EPS, grad_fn=lambda p: np.full_like(p, np.nan))


def test_atta_prior_keeps_last_perturbation():
    prior = PriorState(5, 3, EPS)
    delta = np.full((2, 3), EPS / 2)
    update_prior_state(prior, [1, 4], delta, np.ones((2, 3)), "atta_prior", EPS)
    np.testing.assert_array_equal(sample_init("atta_prior", EPS, (2, 3), prior, [4, 1]), delta)
    assert not prior.eta[[0, 2, 3]].any()


def test_pgi_momentum_update():
    prior = PriorState(2, 2, EPS, momentum=0.3)
    g1 = np.array([[1.0, -1.0]])
    update_prior_state(prior, [0], None, g1, "pgi_momentum", EPS / 2)
    np.testing.assert_array_equal(prior.eta[0], [EPS / 2, -EPS / 2])
    update_prior_state(prior, [0], None, -g1, "pgi_momentum", EPS / 2)
    # momentum 0.3*g1 - g1 = -0.7*g1 flips the direction
    np.testing.assert_array_equal(prior.eta[0], [0.0, 0.0])
    with pytest.raises(AttackError):
        prior.lookup([2])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5), st.sampled_from(["fgsm", "pgd", "margin"]))
def test_perturbations_respect_ball_and_box(seed, eps, kind):
    params, x, y, rng = small_problem(seed % 1000, n=4, d=6)
    x = np.where(rng.uniform(size=x.shape) < 0.3, np.round(x), x)  # saturated pixels
    if kind == "fgsm":
        eta = sample_init("uniform_full", eps, x.shape, rng=rng)
        d = fgsm_step(params, x, y, eta, 1.25 * eps, eps)
    elif kind == "pgd":
        d = pgd(params, x, y, AttackConfig(eps, eps / 4, 3, "uniform_full"), rng=rng)
    else:
        d = margin_pgd(params, x, y, AttackConfig(eps, eps / 4, 3, "zero", "margin"))
    assert np.abs(d).max() <= eps + 1e-12
    assert (x + d).min() >= 0.0 and (x + d).max() <= 1.0
