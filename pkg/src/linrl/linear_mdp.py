"""Finite-horizon linear MDPs backed by explicit tabular dynamics.

Arrays use 0-based step indices: ``transitions[h, s, a, s']`` and
``rewards[h, s, a]`` for ``h in range(H)``.  The simulator always reads the
tabular kernel; the fitted measures ``psi_h`` and reward vectors only serve
to check the linear structure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

PROB_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LinearMdp:
    horizon: int
    features: np.ndarray  # (S, A, d_c)
    measures: np.ndarray  # (H, S', d_c), psi_h(s')
    reward_vecs: np.ndarray  # (H, d_c)
    transitions: np.ndarray  # (H, S, A, S')
    rewards: np.ndarray  # (H, S, A), in [0, 1]
    initial_state: int = 0
    fit_tol: float = 0.0
    fit_rank: int = 0
    feature_scale: float = 1.0
    # raw reward = reward_scale * r + reward_offset
    reward_scale: float = 1.0
    reward_offset: float = 0.0
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def flat_features(self) -> np.ndarray:
        return self.features.reshape(-1, self.dim)

    def raw_value(self, value):
        """Map a value in [0, H] units back to the environment's raw reward units."""
        return self.reward_scale * np.asarray(value) + self.horizon * self.reward_offset

    def fitted_kernel(self) -> np.ndarray:
        """<phi(s,a), psi_h(s')> as an (H, S, A, S') array (may be slightly off-simplex)."""
        return np.einsum("sad,htd->hsat", self.features, self.measures)

    def fitted_rewards(self) -> np.ndarray:
        return np.einsum("sad,hd->hsa", self.features, self.reward_vecs)

    def validate(self, fit_slack: float = 1e-9) -> None:
        """Raise ValueError if any structural invariant is broken."""
        H, S, A, S2 = self.transitions.shape
        if H != self.horizon or S2 != S:
            raise ValueError("transition array has shape %s" % (self.transitions.shape,))
        if self.rewards.shape != (H, S, A) or self.features.shape[:2] != (S, A):
            raise ValueError("reward/feature shapes do not match transitions")
        if np.any(np.linalg.norm(self.features, axis=-1) > 1 + 1e-12):
            raise ValueError("feature norms exceed 1")
        if np.any(self.transitions < 0) or np.any(
            np.abs(self.transitions.sum(-1) - 1) > PROB_TOL
        ):
            raise ValueError("transition rows are not probability vectors")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0 <= self.initial_state < S:
            raise ValueError("initial state out of range")
        resid = max(
            np.max(np.abs(self.fitted_kernel() - self.transitions)),
            np.max(np.abs(self.fitted_rewards() - self.rewards)),
        )
        if resid > self.fit_tol + fit_slack:
            raise ValueError(f"linear fit residual {resid:g} exceeds recorded {self.fit_tol:g}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "horizon": self.horizon,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "critic_dim": self.dim,
            "initial_state": self.initial_state,
            "features": self.features.tolist(),
            "measures": self.measures.tolist(),
            "reward_vecs": self.reward_vecs.tolist(),
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "fit_tol": self.fit_tol,
            "fit_rank": self.fit_rank,
            "feature_scale": self.feature_scale,
            "reward_scale": self.reward_scale,
            "reward_offset": self.reward_offset,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "LinearMdp":
        mdp = cls(
            horizon=int(doc["horizon"]),
            features=np.asarray(doc["features"], dtype=float),
            measures=np.asarray(doc["measures"], dtype=float),
            reward_vecs=np.asarray(doc["reward_vecs"], dtype=float),
            transitions=np.asarray(doc["transitions"], dtype=float),
            rewards=np.asarray(doc["rewards"], dtype=float),
            initial_state=int(doc.get("initial_state", 0)),
            fit_tol=float(doc["fit_tol"]),
            fit_rank=int(doc.get("fit_rank", 0)),
            feature_scale=float(doc.get("feature_scale", 1.0)),
            reward_scale=float(doc.get("reward_scale", 1.0)),
            reward_offset=float(doc.get("reward_offset", 0.0)),
            name=doc.get("name", "custom"),
            meta=dict(doc.get("meta", {})),
        )
        mdp.validate()
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LinearMdp":
        return cls.from_dict(json.loads(text))


def fit_linear_mdp(
    transitions,
    rewards,
    features,
    initial_state: int = 0,
    *,
    reward_scale: float = 1.0,
    reward_offset: float = 0.0,
    name: str = "custom",
    meta: dict | None = None,
) -> LinearMdp:
    """Least-squares fit of psi_h and upsilon_h so that P ~ <phi, psi_h>, r ~ <phi, upsilon_h>.

    Features with norm above one are rescaled by a common factor, recorded as
    ``feature_scale``.  Rank-deficient designs fall back to the minimum-norm
    solution (that is what ``lstsq`` returns) and are logged.
    """
    P = np.asarray(transitions, dtype=float)
    r = np.asarray(rewards, dtype=float)
    phi = np.asarray(features, dtype=float)
    if P.ndim != 4 or r.ndim != 3 or phi.ndim != 3:
        raise ValueError("expected transitions (H,S,A,S), rewards (H,S,A), features (S,A,d)")
    H, S, A, S2 = P.shape
    if S2 != S or r.shape != (H, S, A) or phi.shape[:2] != (S, A):
        raise ValueError(
            f"inconsistent shapes: P{P.shape}, r{r.shape}, phi{phi.shape}"
        )
    d = phi.shape[2]

    max_norm = float(np.max(np.linalg.norm(phi, axis=-1)))
    scale = 1.0
    if max_norm > 1.0:
        scale = 1.0 / max_norm
        phi = phi * scale
        logger.info("rescaled features by %g to enforce ||phi|| <= 1", scale)

    design = phi.reshape(S * A, d)
    # one lstsq per h with all next-states and the reward stacked as columns
    targets = np.concatenate(
        [P.reshape(H, S * A, S), r.reshape(H, S * A, 1)], axis=2
    )  # (H, SA, S+1)
    measures = np.empty((H, S, d))
    reward_vecs = np.empty((H, d))
    rank = d
    for h in range(H):
        sol, _, rank, _ = np.linalg.lstsq(design, targets[h], rcond=None)
        measures[h] = sol[:, :S].T
        reward_vecs[h] = sol[:, S]
    if rank < d:
        logger.warning("feature design has rank %d < %d; using minimum-norm fit", rank, d)

    fitted = np.einsum("kd,hdc->hkc", design, np.concatenate(
        [measures.transpose(0, 2, 1), reward_vecs[:, :, None]], axis=2))
    fit_tol = float(np.max(np.abs(fitted - targets)))

    mdp = LinearMdp(
        horizon=H,
        features=phi,
        measures=measures,
        reward_vecs=reward_vecs,
        transitions=P,
        rewards=r,
        initial_state=int(initial_state),
        fit_tol=fit_tol,
        fit_rank=int(rank),
        feature_scale=scale,
        reward_scale=reward_scale,
        reward_offset=reward_offset,
        name=name,
        meta=dict(meta or {}),
    )
    mdp.validate()
    return mdp


def random_state_features(rng: np.random.Generator, n_states: int, n_actions: int, dim: int) -> np.ndarray:
    """Action-blocked random features.

    Each state draws a raw vector uniform in [0, 1]; feature (s, a) places it
    in the block of action a, so logits stay state dependent.  Dimensions left
    over after ``dim // A`` full blocks carry a second raw vector shared by all
    actions.  Rows are scaled to unit norm.
    """
    block = dim // n_actions
    phi = np.zeros((n_states, n_actions, dim))
    if block == 0:
        phi[:] = rng.uniform(0.0, 1.0, size=(n_states, n_actions, dim))
    else:
        raw = rng.uniform(0.0, 1.0, size=(n_states, block))
        for a in range(n_actions):
            phi[:, a, a * block:(a + 1) * block] = raw
        rest = dim - block * n_actions
        if rest:
            phi[:, :, block * n_actions:] = rng.uniform(0.0, 1.0, size=(n_states, 1, rest))
    norms = np.linalg.norm(phi, axis=-1, keepdims=True)
    return phi / np.maximum(norms, 1e-300)


def make_random_mdp(seed: int = 0, d_c: int | None = None, horizon: int = 20,
                    n_states: int = 15, n_actions: int = 5, features: str = "dense") -> LinearMdp:
    """Random MDP: 0.1 reward for action 0 in state 0, 1.0 for action 1 in the last state.

    ``features="dense"`` uses action-blocked random state vectors of dimension
    ``d_c`` (default 10); ``"one_hot"`` uses the tabular basis (``d_c``
    defaults to, and must equal, S * A).
    """
    if d_c is None:
        d_c = n_states * n_actions if features == "one_hot" else 10
    if d_c < 1:
        raise ValueError("d_c must be >= 1")
    if features not in ("dense", "one_hot"):
        raise ValueError(f"unknown feature kind {features!r}")
    if features == "one_hot" and d_c != n_states * n_actions:
        raise ValueError(f"one-hot features need d_c = S * A = {n_states * n_actions}")
    rng = np.random.default_rng(seed)
    kernel = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    kernel /= kernel.sum(-1, keepdims=True)
    P = np.broadcast_to(kernel, (horizon,) + kernel.shape).copy()
    r = np.zeros((horizon, n_states, n_actions))
    r[:, 0, 0] = 0.1
    r[:, n_states - 1, 1] = 1.0
    phi = random_state_features(rng, n_states, n_actions, d_c)
    if features == "one_hot":
        phi = np.eye(d_c).reshape(n_states, n_actions, d_c)
    return fit_linear_mdp(P, r, phi, initial_state=0, name="random_mdp",
                          meta={"seed": seed, "d_c": d_c, "features": features})


def spread_features(n_pairs: int, dim: int) -> np.ndarray:
    """Place pair i at position i*(dim-1)/(n_pairs-1) on [0, dim-1], linearly interpolated
    between neighbouring one-hots.  dim == n_pairs gives exact one-hot features."""
    if dim > n_pairs:
        raise ValueError(f"feature dimension {dim} exceeds number of state-action pairs {n_pairs}")
    phi = np.zeros((n_pairs, dim))
    if dim == 1:
        phi[:, 0] = 1.0
        return phi
    pos = np.arange(n_pairs) * (dim - 1) / (n_pairs - 1)
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.minimum(lo + 1, dim - 1)
    phi[np.arange(n_pairs), lo] += 1.0 - frac
    phi[np.arange(n_pairs), hi] += frac
    return phi


def make_deep_sea(N: int = 10, d_c: int | None = None, convention: str = "left_cost",
                  horizon: int | None = None) -> LinearMdp:
    """N x N Deep Sea grid, horizon N unless ``horizon`` is given.

    The bottom row is absorbing in the row index, so with ``horizon > N`` the
    agent keeps walking along it and collects the corner reward every step it
    spends there.

    State index is ``row * N + col``; action 0 descends right, action 1
    descends left.  ``convention="left_cost"`` charges 0.01/N for moving left,
    ``"standard"`` charges it for moving right (the usual benchmark).  Being in
    the bottom-right cell pays 1.  Rewards are mapped affinely into [0, 1];
    ``reward_scale``/``reward_offset`` undo that for reporting.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if convention not in ("left_cost", "standard"):
        raise ValueError(f"unknown Deep Sea convention {convention!r}")
    S, A, H = N * N, 2, (N if horizon is None else horizon)
    if H < 1:
        raise ValueError("horizon must be >= 1")
    if d_c is None:
        d_c = S * A
    if d_c < 1 or d_c > S * A:
        raise ValueError(f"d_c must be in [1, {S * A}], got {d_c}")

    kernel = np.zeros((S, A, S))
    raw = np.zeros((S, A))
    cost = 0.01 / N
    costly = 1 if convention == "left_cost" else 0
    for row in range(N):
        for col in range(N):
            s = row * N + col
            nrow = min(row + 1, N - 1)
            kernel[s, 0, nrow * N + min(col + 1, N - 1)] = 1.0
            kernel[s, 1, nrow * N + max(col - 1, 0)] = 1.0
            raw[s, costly] -= cost
    raw[S - 1, :] += 1.0

    lo, hi = raw.min(), raw.max()
    r = (raw - lo) / (hi - lo)
    P = np.broadcast_to(kernel, (H, S, A, S)).copy()
    R = np.broadcast_to(r, (H, S, A)).copy()
    phi = spread_features(S * A, d_c).reshape(S, A, d_c)
    return fit_linear_mdp(P, R, phi, initial_state=0, reward_scale=hi - lo,
                          reward_offset=lo, name="deep_sea",
                          meta={"N": N, "d_c": d_c, "convention": convention, "horizon": H})


@dataclass
class Trajectory:
    states: np.ndarray  # (H + 1,)
    actions: np.ndarray  # (H,)
    rewards: np.ndarray  # (H,)
    episode_index: int = 0
    seed: Any = None

    @property
    def steps(self):
        return [
            (int(self.states[h]), int(self.actions[h]), float(self.rewards[h]), int(self.states[h + 1]))
            for h in range(len(self.actions))
        ]

    def __len__(self) -> int:
        return len(self.actions)


def _policy_table(policy) -> np.ndarray:
    if hasattr(policy, "table"):
        return policy.table()
    return np.asarray(policy, dtype=float)


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_episodes(mdp: LinearMdp, policy, rng: np.random.Generator, n: int):
    """Roll out n independent episodes; returns (states (n,H+1), actions (n,H), rewards (n,H))."""
    pi = _policy_table(policy)
    H = mdp.horizon
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    states[:, 0] = mdp.initial_state
    for h in range(H):
        s = states[:, h]
        a = _categorical(rng, pi[h, s])
        actions[:, h] = a
        rewards[:, h] = mdp.rewards[h, s, a]
        states[:, h + 1] = _categorical(rng, mdp.transitions[h, s, a])
    return states, actions, rewards


def rollout(mdp: LinearMdp, policy, rng: np.random.Generator, episode_index: int = 0,
            seed=None) -> Trajectory:
    states, actions, rewards = sample_episodes(mdp, policy, rng, 1)
    return Trajectory(states[0], actions[0], rewards[0], episode_index=episode_index, seed=seed)


def bellman_backup(mdp: LinearMdp, h: int, v_next: np.ndarray) -> np.ndarray:
    """r_h + P_h v_next as an (S, A) table."""
    return mdp.rewards[h] + mdp.transitions[h] @ v_next


def exact_policy_value(mdp: LinearMdp, policy):
    """Backward DP.  Returns V (H+1, S) with V[H] = 0, and Q (H, S, A)."""
    pi = _policy_table(policy)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = bellman_backup(mdp, h, V[h + 1])
        V[h] = np.sum(pi[h] * Q[h], axis=1)
    return V, Q


def optimal_values(mdp: LinearMdp):
    """Bellman-optimal values V* (H+1, S) and a deterministic greedy policy table (H, S, A).

    Ties go to the smallest action index.
    """
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        q = bellman_backup(mdp, h, V[h + 1])
        best = np.argmax(q, axis=1)
        pi[h, np.arange(S), best] = 1.0
        V[h] = q[np.arange(S), best]
    return V, pi


def uniform_policy(mdp: LinearMdp) -> np.ndarray:
    return np.full((mdp.horizon, mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def state_occupancy(mdp: LinearMdp, policy) -> np.ndarray:
    """Marginal state distribution d_h(s) (H, S) of the policy started from s_1."""
    pi = _policy_table(policy)
    H, S = mdp.horizon, mdp.n_states
    d = np.zeros((H, S))
    d[0, mdp.initial_state] = 1.0
    for h in range(H - 1):
        sa = d[h][:, None] * pi[h]
        d[h + 1] = np.einsum("sa,sat->t", sa, mdp.transitions[h])
    return d
