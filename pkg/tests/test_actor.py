import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linrl.actor import (
    ActorConfig,
    ActorDivergence,
    actor_loss,
    actor_solve_closed_form,
    actor_update_gd,
    projection_error_bound,
    npg_step,
    npg_step_log,
    projection_error,
    regression_loss,
    spma_step,
    spma_target,
)


def _kl(u, p):
    m = u > 0
    return float(np.sum(u[m] * np.log(u[m] / p[m])))


# --- actor_loss -----------------------------------------------------------------------------


def test_loss_zero_at_previous_theta_with_zero_q():
    phi = np.random.default_rng(0).normal(size=(4, 3))
    theta = np.array([0.3, -1.0, 2.0])
    assert actor_loss(theta, theta, np.zeros(4), phi, np.full(4, 0.25), eta=2.0) == 0.0


def test_loss_zero_for_realizable_one_hot_target():
    phi = np.eye(3)
    q = np.array([0.5, 1.0, 2.0])
    prev = np.array([1.0, -1.0, 0.0])
    assert actor_loss(prev + 0.7 * q, prev, q, phi, np.full(3, 1 / 3), eta=0.7) == pytest.approx(0.0)


def test_loss_single_point_residual_two():
    assert regression_loss(np.array([3.0]), np.array([[1.0]]), np.array([1.0]), np.array([1.0])) == 2.0


# --- closed form -----------------------------------------------------------------------------


def test_closed_form_one_hot_copies_targets():
    z = np.array([0.1, -2.0, 3.0, 4.5])
    theta, deficient = actor_solve_closed_form(np.zeros(4), z, np.eye(4), np.full(4, 0.25))
    np.testing.assert_allclose(theta, z, atol=1e-12)
    assert not deficient


def test_closed_form_weighted_mean():
    theta, _ = actor_solve_closed_form(np.zeros(1), np.array([0.0, 2.0]), np.ones((2, 1)), np.array([0.5, 0.5]))
    assert theta[0] == pytest.approx(1.0)


def test_closed_form_beats_random_probes():
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(12, 4))
    w = rng.dirichlet(np.ones(12))
    z = rng.normal(size=12)
    theta, _ = actor_solve_closed_form(rng.normal(size=4), z, phi, w)
    best = regression_loss(theta, phi, z, w)
    for _ in range(100):
        assert best <= regression_loss(theta + rng.normal(scale=0.1, size=4), phi, z, w) + 1e-15


def test_closed_form_rank_deficient_flags_and_keeps_unconstrained_directions():
    phi = np.array([[1.0, 0.0], [1.0, 0.0]])
    theta, deficient = actor_solve_closed_form(np.array([0.0, 5.0]), np.array([1.0, 3.0]), phi, np.array([0.5, 0.5]))
    assert deficient
    np.testing.assert_allclose(theta, [2.0, 5.0])


# --- gradient descent -------------------------------------------------------------------------


def test_gd_converges_to_closed_form():
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(10, 3))
    w = np.full(10, 0.1)
    z = rng.normal(size=10)
    theta, diag = actor_update_gd(np.zeros(3), z, phi, w, steps=2000)
    assert diag.eps_opt <= 1e-8
    ref, _ = actor_solve_closed_form(np.zeros(3), z, phi, w)
    np.testing.assert_allclose(theta, ref, atol=1e-4)


def test_gd_zero_steps_keeps_theta():
    prev = np.array([1.0, 2.0])
    theta, diag = actor_update_gd(prev, np.zeros(3), np.ones((3, 2)), np.full(3, 1 / 3), steps=0)
    np.testing.assert_array_equal(theta, prev)
    assert diag.losses == [diag.achieved_loss]


def test_gd_loss_monotone():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(8, 4))
    _, diag = actor_update_gd(rng.normal(size=4), rng.normal(size=8), phi, np.full(8, 1 / 8), steps=50)
    assert all(b <= a + 1e-15 for a, b in zip(diag.losses, diag.losses[1:]))
    assert diag.achieved_loss >= 0


def test_gd_divergence_aborts():
    with pytest.raises(ActorDivergence):
        actor_update_gd(np.zeros(1), np.array([1.0]), np.array([[1.0]]), np.array([1.0]), steps=20, lr=5.0)


# --- SPMA -----------------------------------------------------------------------------------


def test_spma_target_examples():
    logits = np.array([0.2, -0.1])
    probs = np.array([0.5, 0.5])
    np.testing.assert_allclose(spma_target(logits, np.array([2.0, 2.0]), probs, 0.05), logits)
    np.testing.assert_allclose(spma_target(logits, np.array([1.0, 0.0]), probs, 0.0), logits)
    got = spma_target(np.zeros(2), np.array([1.0, 0.0]), probs, 0.05)
    np.testing.assert_allclose(got, [np.log(1.025), np.log(0.975)])


def test_spma_rejects_non_positive_argument():
    with pytest.raises(ValueError):
        spma_target(np.zeros(2), np.array([10.0, 0.0]), np.array([0.5, 0.5]), 1.0)


def test_spma_config_step_size_condition():
    ActorConfig(eta=0.05, variant="spma").validate(horizon=10)
    with pytest.raises(ValueError):
        ActorConfig(eta=0.06, variant="spma").validate(horizon=10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_spma_targets_finite_under_step_condition(H, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4))
    q = rng.uniform(0, H, size=4)
    target = spma_target(np.zeros(4), q, probs, 1.0 / (2 * H))
    assert np.all(np.isfinite(target))
    np.testing.assert_allclose(spma_step(probs, np.full(4, 0.3 * H), 1 / (2 * H)), probs, atol=1e-15)


# --- NPG step vs mirror descent -----------------------------------------------------------------


def _grid_mirror_descent(p, g, eta, n=400):
    # maximise <x, eta g> - KL(x || p) over a grid on the 3-simplex
    best, arg = -np.inf, None
    for i, j in itertools.product(range(n + 1), repeat=2):
        if i + j > n:
            continue
        x = np.array([i, j, n - i - j], float) / n
        val = eta * x @ g - _kl(x, p)
        if val > best:
            best, arg = val, x
    return arg


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_npg_step_matches_grid_mirror_descent(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3))
    g = rng.uniform(0, 2, size=3)
    closed = npg_step(p, g, 1.0)
    grid = _grid_mirror_descent(p, g, 1.0)
    # the grid spacing is 1/400; compare objective-optimal points and check objective gap
    obj = lambda x: g @ x - _kl(x, p)  # noqa: E731
    assert obj(closed) >= obj(grid) - 1e-12
    assert obj(closed) - obj(grid) <= 1e-4
    np.testing.assert_allclose(closed, grid, atol=5e-3)
    np.testing.assert_allclose(np.exp(npg_step_log(np.log(p), g, 1.0)), closed, atol=1e-14)


# --- projection error -----------------------------------------------------------------------


def test_projection_error_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert projection_error(np.array([0.1, 0.1, 0.8]), p, p) == 0.0
    q = np.array([0.4, 0.4, 0.2])
    assert projection_error(p, q, p) == pytest.approx(_kl(p, q))
    assert projection_error(p, q, p) > 0


def test_projection_error_rejects_zeros():
    with pytest.raises(ValueError):
        projection_error(np.array([0.5, 0.5]), np.array([1.0, 0.0]), np.array([0.5, 0.5]))


def test_projection_error_allows_deterministic_comparator():
    u = np.array([1.0, 0.0])
    assert projection_error(u, np.array([0.5, 0.5]), np.array([0.8, 0.2])) == pytest.approx(np.log(0.8 / 0.5))


def test_projection_error_bound_formula():
    assert projection_error_bound(3.0, 0.04, 0.01) == pytest.approx(2 * 4 * 0.2 + 2 * 0.1)
    assert projection_error_bound(5.0, 0.0, 0.0) == 0.0


def test_spma_step_is_distribution():
    p = spma_step(np.array([0.2, 0.8]), np.array([1.0, 0.0]), 0.1)
    assert p.sum() == pytest.approx(1.0) and p[0] > 0.2
