"""Projected NPG actor: logit-matching regression, SPMA targets, projection diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import clip_q, log_softmax, softmax

__all__ = [
    "ActorConfig",
    "ActorDiagnostics",
    "ActorDivergence",
    "actor_loss",
    "actor_solve_closed_form",
    "actor_update_gd",
    "clip_q",
    "projection_error_bound",
    "npg_step",
    "projection_error",
    "projection_error_log",
    "regression_loss",
    "spma_step",
    "spma_target",
]

SOLVERS = ("closed_form", "gradient_descent")
VARIANTS = ("npg", "spma")
DEGENERATE_REG = 1e-10


class ActorDivergence(RuntimeError):
    """Gradient descent on the actor loss increased the loss three steps in a row."""


@dataclass(frozen=True)
class ActorConfig:
    eta: float = 1.0
    steps: int = 100
    lr: float | str = "auto"
    solver: str = "closed_form"
    variant: str = "npg"

    def validate(self, horizon: int | None = None) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"actor solver must be one of {SOLVERS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"actor variant must be one of {VARIANTS}")
        if self.steps < 0:
            raise ValueError("actor steps must be non-negative")
        if self.lr != "auto" and not float(self.lr) > 0:
            raise ValueError("actor lr must be positive or 'auto'")
        if self.variant == "spma" and horizon is not None and self.eta > 1.0 / (2 * horizon):
            raise ValueError(f"spma requires eta <= 1/(2H) = {1.0 / (2 * horizon):g}")


@dataclass
class ActorDiagnostics:
    achieved_loss: float = 0.0
    optimal_loss: float = 0.0
    eps_opt: float = 0.0
    rank_deficient: bool = False
    losses: list[float] = field(default_factory=list)


def regression_loss(theta, features, targets, weights) -> float:
    """0.5 * sum_i rho_i (<phi_i, theta> - z_i)^2."""
    resid = np.asarray(features) @ np.asarray(theta) - np.asarray(targets)
    return float(0.5 * np.sum(np.asarray(weights) * resid**2))


def actor_loss(theta, theta_prev, q_hat, features, weights, eta) -> float:
    """Logit-matching loss with eta folded into the target: regress onto eta * Qhat."""
    delta = np.asarray(theta) - np.asarray(theta_prev)
    return regression_loss(delta, features, eta * np.asarray(q_hat), weights)


def _weighted_design(features, weights):
    sw = np.sqrt(np.asarray(weights, dtype=float))
    return np.asarray(features, dtype=float) * sw[:, None], sw


def actor_solve_closed_form(theta_prev, targets, features, weights):
    """Weighted least-squares minimiser of 0.5 * sum rho (<phi, theta> - z)^2.

    The minimiser closest to ``theta_prev`` is returned, so directions that the
    coreset does not constrain keep their previous value.  Returns
    ``(theta, rank_deficient)``.
    """
    theta_prev = np.asarray(theta_prev, dtype=float)
    X, sw = _weighted_design(features, weights)
    resid = sw * (np.asarray(targets, dtype=float) - np.asarray(features) @ theta_prev)
    step, _, rank, _ = np.linalg.lstsq(X, resid, rcond=None)
    return theta_prev + step, bool(rank < X.shape[1])


def gram(features, weights) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    return features.T @ (np.asarray(weights, dtype=float)[:, None] * features)


def default_actor_lr(features, weights) -> float:
    lam_max = float(np.linalg.eigvalsh(gram(features, weights))[-1])
    return 1.0 / (2.0 * max(lam_max, DEGENERATE_REG))


def actor_update_gd(theta_prev, targets, features, weights, steps: int, lr="auto"):
    """Full-batch gradient descent on the regression loss, started at theta_prev."""
    features = np.asarray(features, dtype=float)
    weights = np.asarray(weights, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if lr == "auto":
        lr = default_actor_lr(features, weights)
    theta = np.array(theta_prev, dtype=float)
    losses = [regression_loss(theta, features, targets, weights)]
    increases = 0
    for _ in range(int(steps)):
        grad = features.T @ (weights * (features @ theta - targets))
        theta = theta - lr * grad
        losses.append(regression_loss(theta, features, targets, weights))
        increases = increases + 1 if losses[-1] > losses[-2] else 0
        if increases >= 3 or not np.isfinite(losses[-1]):
            raise ActorDivergence(f"actor loss diverged: {losses[-4:]}")
    theta_star, deficient = actor_solve_closed_form(theta_prev, targets, features, weights)
    best = regression_loss(theta_star, features, targets, weights)
    diag = ActorDiagnostics(
        achieved_loss=losses[-1],
        optimal_loss=best,
        eps_opt=max(losses[-1] - best, 0.0),
        rank_deficient=deficient,
        losses=losses,
    )
    return theta, diag


def npg_step(probs, q, eta) -> np.ndarray:
    """Unprojected NPG / mirror-descent step: p * exp(eta q) / normaliser."""
    probs = np.asarray(probs, dtype=float)
    return softmax(np.log(probs) + eta * np.asarray(q, dtype=float))


def npg_step_log(log_probs, q, eta) -> np.ndarray:
    """Log-space NPG step; stays finite when probabilities underflow."""
    return log_softmax(np.asarray(log_probs, dtype=float) + eta * np.asarray(q, dtype=float))


def _advantage(q, probs):
    q = np.asarray(q, dtype=float)
    return q - np.sum(np.asarray(probs) * q, axis=-1, keepdims=True)


def spma_target(logits, q, probs, eta) -> np.ndarray:
    """logit + log(1 + eta * A) with A = Q - <pi, Q>; rejects non-positive arguments."""
    arg = 1.0 + eta * _advantage(q, probs)
    if np.any(arg <= 0):
        raise ValueError("1 + eta * advantage must be positive (reduce eta)")
    return np.asarray(logits, dtype=float) + np.log(arg)


def spma_step(probs, q, eta) -> np.ndarray:
    """Unprojected SPMA step: p * (1 + eta * A), already normalised."""
    probs = np.asarray(probs, dtype=float)
    p = probs * (1.0 + eta * _advantage(q, probs))
    return p / p.sum(axis=-1, keepdims=True)


def spma_step_log(log_probs, q, eta) -> np.ndarray:
    """Log-space SPMA step (the 1 + eta A factors already sum to one under p)."""
    log_probs = np.asarray(log_probs, dtype=float)
    arg = 1.0 + eta * _advantage(q, np.exp(log_probs))
    if np.any(arg <= 0):
        raise ValueError("1 + eta * advantage must be positive (reduce eta)")
    return log_softmax(log_probs + np.log(arg))


def projection_error(u, p_projected, p_half) -> float:
    """KL(u || p_projected) - KL(u || p_half) = sum u log(p_half / p_projected).

    ``u`` may have zero entries (0 log 0 = 0); the other two must be strictly positive.
    """
    u = np.asarray(u, dtype=float)
    p_projected = np.asarray(p_projected, dtype=float)
    p_half = np.asarray(p_half, dtype=float)
    if np.any(p_projected <= 0) or np.any(p_half <= 0):
        raise ValueError("projected and half-step distributions must be strictly positive")
    if np.any(u < 0):
        raise ValueError("u must be a distribution")
    return projection_error_log(u, np.log(p_projected), np.log(p_half))


def projection_error_log(u, log_projected, log_half) -> float:
    """projection_error from log-probabilities (entries where u = 0 are skipped)."""
    u = np.asarray(u, dtype=float)
    mask = u > 0
    diff = np.asarray(log_half, dtype=float)[mask] - np.asarray(log_projected, dtype=float)[mask]
    return float(np.sum(u[mask] * diff))


def projection_error_bound(phi_bar: float, eps_bias: float, eps_opt: float) -> float:
    """2 (phi_bar + 1) sqrt(eps_bias) + 2 sqrt(eps_opt)."""
    return 2.0 * (phi_bar + 1.0) * np.sqrt(max(eps_bias, 0.0)) + 2.0 * np.sqrt(max(eps_opt, 0.0))
