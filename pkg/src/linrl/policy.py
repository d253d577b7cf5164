"""Log-linear policies and the implicit (stored-critic) NPG policy."""

from __future__ import annotations

import numpy as np


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def clip_q(x, h: int, H: int):
    """min{max{x, 0}, H - h + 1} for a 1-based step h."""
    return np.clip(x, 0.0, H - h + 1)


def sample_action(probs, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=float)
    return int(rng.choice(len(probs), p=probs / probs.sum()))


class LogLinearPolicy:
    """pi_h(a|s) proportional to exp(<phi_a(s, a), theta_h>).

    ``features`` has shape (S, A, d_a); ``theta`` has shape (H, d_a).
    """

    def __init__(self, features, horizon: int, theta=None):
        self.features = np.asarray(features, dtype=float)
        self.horizon = int(horizon)
        d = self.features.shape[-1]
        if theta is None:
            theta = np.zeros((self.horizon, d))
        self.theta = np.array(theta, dtype=float).reshape(self.horizon, d)

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    def logits(self, h: int, s: int) -> np.ndarray:
        return self.features[s] @ self.theta[h]

    def action_probs(self, h: int, s: int) -> np.ndarray:
        return softmax(self.logits(h, s))

    def logit_table(self) -> np.ndarray:
        return np.einsum("sad,hd->hsa", self.features, self.theta)

    def table(self) -> np.ndarray:
        """Action probabilities for every (h, s) as an (H, S, A) array."""
        return softmax(self.logit_table(), axis=-1)

    def log_table(self) -> np.ndarray:
        return log_softmax(self.logit_table(), axis=-1)

    def sample_action(self, h: int, s: int, rng: np.random.Generator) -> int:
        return sample_action(self.action_probs(h, s), rng)

    def storage_size(self) -> int:
        return self.theta.size

    def to_list(self):
        return self.theta.tolist()

    def copy(self) -> "LogLinearPolicy":
        return LogLinearPolicy(self.features, self.horizon, self.theta.copy())


class ImplicitNpgPolicy:
    """pi^{t+1} proportional to uniform * exp(eta * sum_i Qhat^i), Qhat^i rebuilt from stored critics.

    Each stored critic is an (H, M, d_c) array of chain parameters; at query
    time Qhat^i_h(s, a) = clip(max_m <phi(s, a), w^i_{h,m}>, 0, clip_h) with
    clip_h = H - h + 1 (1-based h) unless ``clip_levels`` says otherwise.
    """

    def __init__(self, eta: float, critic_features, horizon: int, clip_levels=None):
        self.eta = float(eta)
        self.features = np.asarray(critic_features, dtype=float)
        self.horizon = int(horizon)
        if clip_levels is None:
            clip_levels = self.horizon - np.arange(self.horizon)
        self.clip_levels = np.asarray(clip_levels, dtype=float)
        self.stored: list[np.ndarray] = []

    def add_critic(self, weights) -> None:
        w = np.asarray(weights, dtype=float)
        if w.ndim == 2:
            w = w[:, None, :]
        self.stored.append(w.copy())

    def q_hat(self, i: int) -> np.ndarray:
        """Clipped Q table (H, S, A) of the i-th stored critic."""
        vals = np.einsum("sad,hmd->hmsa", self.features, self.stored[i]).max(axis=1)
        return np.clip(vals, 0.0, self.clip_levels[:, None, None])

    def logit_table(self) -> np.ndarray:
        H, S, A = self.horizon, self.features.shape[0], self.features.shape[1]
        total = np.zeros((H, S, A))
        for i in range(len(self.stored)):
            total += self.q_hat(i)
        return self.eta * total

    def table(self) -> np.ndarray:
        return softmax(self.logit_table(), axis=-1)

    def log_table(self) -> np.ndarray:
        return log_softmax(self.logit_table(), axis=-1)

    def implicit_probs(self, h: int, s: int) -> np.ndarray:
        z = np.zeros(self.features.shape[1])
        for w in self.stored:
            q = (self.features[s] @ w[h].T).max(axis=1)
            z += np.clip(q, 0.0, self.clip_levels[h])
        return softmax(self.eta * z)

    action_probs = implicit_probs

    def sample_action(self, h: int, s: int, rng: np.random.Generator) -> int:
        return sample_action(self.implicit_probs(h, s), rng)

    def storage_size(self) -> int:
        return sum(w.size for w in self.stored)
