import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linrl.critic import (
    LMC_C,
    CriticConfig,
    CriticState,
    Dataset,
    chain_rngs,
    critic_gradient,
    critic_update,
    elliptical_potential,
    lmc_step,
    model_prediction_error,
    num_chains_for,
    posterior_moments,
    power_lambda_max,
    regression_targets,
    ridge_solve,
    run_chains,
    sample_chains,
    theory_hyperparams,
    validate_posterior,
)
from linrl.linear_mdp import exact_policy_value, fit_linear_mdp, make_random_mdp, sample_episodes, uniform_policy

# --- gradient / ridge / LMC step -------------------------------------------------------------


def test_gradient_examples():
    lam = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -1.0])
    np.testing.assert_allclose(critic_gradient(ridge_solve(lam, b), lam, b), 0.0, atol=1e-14)
    w = np.array([0.3, -0.7])
    np.testing.assert_allclose(critic_gradient(w, np.eye(2), np.zeros(2)), w)
    assert critic_gradient(np.array([0.0]), np.array([[2.0]]), np.array([1.0]))[0] == -1.0


def test_ridge_examples():
    np.testing.assert_array_equal(ridge_solve(np.eye(3), np.zeros(3)), 0.0)
    assert ridge_solve(np.array([[2.0]]), np.array([1.0]))[0] == 0.5
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3))
    lam = X.T @ X + np.eye(3)
    b = X.T @ rng.normal(size=20)
    w = np.zeros(3)
    lr = 1 / (2 * np.linalg.eigvalsh(lam)[-1])
    for _ in range(20_000):
        w = lmc_step(w, lam, b, lr, 0.0)
    np.testing.assert_allclose(w, ridge_solve(lam, b), atol=1e-10)


def test_lmc_noise_off_affine_contraction():
    w = 3.0
    for _ in range(60):
        new = lmc_step(np.array([w]), np.array([[2.0]]), np.array([1.0]), 0.25, 0.0)[0]
        assert new == pytest.approx(w / 2 + 0.25)
        w = new
    assert w == pytest.approx(0.5)


def test_lmc_noise_statistics():
    lr, zeta_inv = 0.1, 0.5
    w = np.array([1.0, -2.0])
    lam = np.eye(2)
    b = w.copy()  # zero gradient at w
    rng = np.random.default_rng(0)
    n = 100_000
    steps = lmc_step(np.tile(w, (n, 1)).T, lam, b[:, None], lr, zeta_inv, rng).T - w
    var = lr * zeta_inv
    assert np.all(np.abs(steps.mean(0)) <= 3 * math.sqrt(var / n))
    se_var = var * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(steps.var(0, ddof=1) - var) <= 3 * se_var)


def test_lmc_seeded_reproducible():
    a = lmc_step(np.zeros(3), np.eye(3), np.ones(3), 0.1, 1.0, np.random.default_rng(5))
    b = lmc_step(np.zeros(3), np.eye(3), np.ones(3), 0.1, 1.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_power_iteration():
    mat = np.diag([3.0, 1.0, 0.5])
    assert power_lambda_max(mat) == pytest.approx(3.0, rel=1e-8)
    assert 1 / (2 * power_lambda_max(2 * np.eye(2))) == pytest.approx(0.25)


# --- chains ----------------------------------------------------------------------------------


def test_chain_streams_do_not_depend_on_chain_count():
    small, big = chain_rngs(7, 3, 2), chain_rngs(7, 3, 5)
    for h in range(3):
        for m in range(2):
            assert small[h][m].standard_normal() == big[h][m].standard_normal()


def test_gaussian_sampler_matches_iterates_in_distribution():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(15, 2))
    lam = X.T @ X + np.eye(2)
    b = X.T @ rng.normal(size=15)
    lr = 1 / (2 * np.linalg.eigvalsh(lam)[-1])
    n = 4000
    w0 = np.tile([0.5, -0.5], (n, 1))
    it = run_chains(w0, lam, b, lr, 7, 0.2, chain_rngs(0, 1, n)[0])
    gs = sample_chains(w0, lam, b, lr, 7, 0.2, chain_rngs(1, 1, n)[0])
    mean, cov = posterior_moments([(lam, b, lr, 7)], 0.2, w0=w0[0])
    for w in (it, gs):
        se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(w.mean(0) - mean) <= 4 * se)
        np.testing.assert_allclose(np.cov(w, rowvar=False), cov, rtol=0.15, atol=1e-4)


def test_gaussian_sampler_rejects_large_step():
    with pytest.raises(FloatingPointError):
        sample_chains(np.zeros((1, 1)), np.array([[2.0]]), np.zeros(1), 1.5, 3, 0.1, chain_rngs(0, 1, 1)[0])


# --- critic_update ---------------------------------------------------------------------------


def _tiny_mdp():
    """2 states, 1 action, 1 step, one-hot features, deterministic reward."""
    P = np.zeros((1, 2, 1, 2))
    P[0, :, 0, 0] = 1.0
    r = np.array([[[0.3], [0.9]]])
    return fit_linear_mdp(P, r, np.eye(2).reshape(2, 1, 2))


def test_noise_off_critic_equals_ridge_oracle_on_tiny_mdp():
    mdp = _tiny_mdp()
    data = Dataset(np.array([[0, 0], [1, 0], [1, 0]]), np.zeros((3, 1), int), np.array([[0.3], [0.9], [0.9]]))
    cfg = CriticConfig(noise=False, steps=2000)
    out = critic_update(mdp.features, data, np.ones((1, 2, 1)), CriticState.zeros(1, 1, 2), cfg, chain_rngs(0, 1, 1))
    # ridge with lambda = 1: state 0 has 1 sample, state 1 has 2
    expected = np.clip(np.array([0.3 / 2, 1.8 / 3]), 0, 1)
    np.testing.assert_allclose(out.q_hat[0, :, 0], expected, atol=1e-8)
    exact_cfg = CriticConfig(exact=True)
    exact = critic_update(mdp.features, data, np.ones((1, 2, 1)), CriticState.zeros(1, 1, 2), exact_cfg,
                          chain_rngs(0, 1, 1))
    np.testing.assert_allclose(exact.q_hat, out.q_hat, atol=1e-8)


def _random_setup(n=30, seed=0):
    mdp = make_random_mdp(seed=0, d_c=10, horizon=5)
    s, a, r = sample_episodes(mdp, uniform_policy(mdp), np.random.default_rng(seed), n)
    return mdp, Dataset(s, a, r)


def test_noise_off_long_chains_are_lsvi():
    mdp, data = _random_setup()
    pi = uniform_policy(mdp)
    lsvi = critic_update(mdp.features, data, pi, CriticState.zeros(5, 1, 10), CriticConfig(exact=True),
                         chain_rngs(0, 5, 1))
    lmc = critic_update(mdp.features, data, pi, CriticState.zeros(5, 1, 10),
                        CriticConfig(noise=False, steps=20_000, sampler="gaussian"), chain_rngs(0, 5, 1))
    np.testing.assert_allclose(lmc.q_hat, lsvi.q_hat, atol=1e-8)


def test_clip_contract_and_convex_v():
    mdp, data = _random_setup()
    rng = np.random.default_rng(3)
    pi = rng.dirichlet(np.ones(5), size=(5, 15))
    out = critic_update(mdp.features, data, pi, CriticState.zeros(5, 4, 10),
                        CriticConfig(zeta_inv=1.0, num_chains=4, steps=20), chain_rngs(1, 5, 4))
    assert np.all(out.q_hat >= 0) and np.all(out.q_hat <= 5)
    assert np.all(out.v_hat[:5] >= out.q_hat.min(-1) - 1e-12)
    assert np.all(out.v_hat[:5] <= out.q_hat.max(-1) + 1e-12)
    assert np.all(out.v_hat[5] == 0)


def test_step_clip_levels():
    mdp, data = _random_setup()
    out = critic_update(mdp.features, data, "greedy", CriticState.zeros(5, 2, 10),
                        CriticConfig(zeta_inv=10.0, num_chains=2, steps=20, clip="step"), chain_rngs(1, 5, 2))
    assert np.all(out.q_hat <= (5 - np.arange(5))[:, None, None])


def test_empty_dataset_is_prior():
    mdp = make_random_mdp(seed=0, d_c=10, horizon=3)
    out = critic_update(mdp.features, Dataset.empty(3), "greedy", CriticState.zeros(3, 1, 10),
                        CriticConfig(noise=False, steps=200), chain_rngs(0, 3, 1))
    np.testing.assert_allclose(out.grams, np.broadcast_to(np.eye(10), (3, 10, 10)))
    np.testing.assert_allclose(out.state.w, 0.0)


def test_monotone_optimism_in_chain_count():
    mdp, data = _random_setup()
    pi = uniform_policy(mdp)
    prev = None
    for M in (1, 2, 4, 8):
        out = critic_update(mdp.features, data, pi, CriticState.zeros(5, M, 10),
                            CriticConfig(zeta_inv=0.5, num_chains=M, steps=10), chain_rngs(11, 5, M))
        # the last step h = H does not depend on later V-hat, so chains are nested there exactly
        top = out.raw_q[-1].max(axis=0)
        if prev is not None:
            assert np.all(top >= prev - 1e-12)
        prev = top


def test_monotone_optimism_at_fixed_targets():
    mdp, data = _random_setup()
    lam, b = regression_targets(mdp.features, data, 2, np.zeros(15), 1.0)
    lr = 1 / (2 * np.linalg.eigvalsh(lam)[-1])
    prev = None
    for M in (1, 3, 6):
        w = run_chains(np.zeros((M, 10)), lam, b, lr, 15, 0.3, chain_rngs(2, 1, M)[0])
        q = np.einsum("sad,md->msa", mdp.features, w).max(0)
        if prev is not None:
            assert np.all(q >= prev)
        prev = q


def test_seeded_critic_is_reproducible():
    mdp, data = _random_setup()
    pi = uniform_policy(mdp)
    a = critic_update(mdp.features, data, pi, CriticState.zeros(5, 3, 10), CriticConfig(num_chains=3), chain_rngs(4, 5, 3))
    b = critic_update(mdp.features, data, pi, CriticState.zeros(5, 3, 10), CriticConfig(num_chains=3), chain_rngs(4, 5, 3))
    np.testing.assert_array_equal(a.state.w, b.state.w)


# --- model prediction error ------------------------------------------------------------------


def test_model_prediction_error_examples():
    mdp = make_random_mdp(seed=1, d_c=10, horizon=4)
    v, q = exact_policy_value(mdp, uniform_policy(mdp))
    np.testing.assert_allclose(model_prediction_error(mdp.transitions, mdp.rewards, q, v), 0.0, atol=1e-12)
    np.testing.assert_allclose(model_prediction_error(mdp.transitions, mdp.rewards, q + 1, v), -1.0, atol=1e-12)


# --- posterior moments / theory ---------------------------------------------------------------


def test_posterior_long_chain_limit():
    mean, cov = posterior_moments([(np.array([[2.0]]), np.array([1.0]), 0.25, 200)], zeta_inv=0.3)
    assert mean[0] == pytest.approx(0.5)
    assert cov[0, 0] == pytest.approx(0.3 / 3)


def test_posterior_noiseless_and_no_updates():
    hist = [(np.array([[2.0]]), np.array([1.0]), 0.25, 3)]
    m1, c1 = posterior_moments(hist, 0.0)
    m2, _ = posterior_moments(hist, 0.7)
    assert c1[0, 0] == 0.0 and m1[0] == m2[0]
    m0, c0 = posterior_moments([(np.eye(2), np.ones(2), 0.1, 0)] * 2, 1.0, w0=np.array([0.3, 0.4]))
    np.testing.assert_allclose(m0, [0.3, 0.4])
    np.testing.assert_allclose(c0, 0.0)


def test_posterior_rejects_large_step():
    with pytest.raises(ValueError):
        posterior_moments([(np.array([[2.0]]), np.array([1.0]), 1.0, 3)], 1.0)


def test_theory_constants():
    assert LMC_C == pytest.approx(0.12099, abs=5e-6)
    assert num_chains_for(10, 100, 0.05) == 77
    th = theory_hyperparams([2 * np.eye(3)] * 2, horizon=2, episodes=10, n_data=0, delta=0.1)
    np.testing.assert_allclose(th.lrs, 0.25)
    assert th.steps == math.ceil(2 * 1.0 * math.log(4 * 2 * 1 * math.sqrt(3)))
    assert th.zeta == pytest.approx((2 * 2 * math.sqrt(3) * math.sqrt(math.log(1 / 0.1)) + 8 / 3) ** -2)
    with pytest.raises(ValueError):
        theory_hyperparams([np.eye(2)], 1, 1, 0, 1.5)


def test_theory_off_policy_fixed_point():
    th = theory_hyperparams([np.eye(4)] * 3, horizon=3, episodes=50, n_data=10, delta=0.1, mode="off")
    on = theory_hyperparams([np.eye(4)] * 3, horizon=3, episodes=50, n_data=10, delta=0.1, mode="on")
    assert th.c_delta > on.c_delta and th.zeta < on.zeta


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 10_000))
def test_elliptical_potential_bound(d, n, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1, keepdims=True))
    assert elliptical_potential(X) <= d + 1e-12


def test_posterior_validation_and_negative_control():
    assert validate_posterior(n_chains=5000).passed
    assert not validate_posterior(n_chains=5000, lr_scale=1.5).passed
    noiseless = validate_posterior(n_chains=200, zeta_inv=0.0)
    assert noiseless.passed and np.all(noiseless.cov == 0)
