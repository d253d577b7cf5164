"""Langevin Monte Carlo critic: ridge targets, noisy gradient chains, posterior moments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CriticConfig",
    "CriticOutput",
    "CriticState",
    "Dataset",
    "PosteriorReport",
    "TheoryHyperparams",
    "chain_rngs",
    "critic_gradient",
    "critic_update",
    "elliptical_potential",
    "lmc_step",
    "model_prediction_error",
    "posterior_moments",
    "power_lambda_max",
    "regression_targets",
    "ridge_solve",
    "run_chains",
    "sample_chains",
    "theory_hyperparams",
    "validate_posterior",
]

CLIP_MODES = ("horizon", "step")
SAMPLERS = ("iterate", "gaussian")
VALUE_POLICIES = ("current", "previous", "greedy")
LMC_C = 1.0 / (2.0 * math.sqrt(2.0 * math.e * math.pi))


@dataclass(frozen=True)
class CriticConfig:
    lam: float = 1.0
    zeta_inv: float = 1e-3
    steps: int = 100
    lr: float | str = "auto"
    num_chains: int = 1
    noise: bool = True
    clip: str = "horizon"
    exact: bool = False  # replace the chains by the ridge solution (value-based LSVI)
    sampler: str = "iterate"  # "iterate": J explicit steps; "gaussian": closed-form J-step draw

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.steps < 1 and not self.exact:
            raise ValueError("critic steps must be >= 1")
        if self.num_chains < 1:
            raise ValueError("num_chains must be >= 1")
        if self.zeta_inv < 0:
            raise ValueError("zeta_inv must be non-negative")
        if self.lr != "auto" and not float(self.lr) > 0:
            raise ValueError("critic lr must be positive or 'auto'")
        if self.clip not in CLIP_MODES:
            raise ValueError(f"critic clip must be one of {CLIP_MODES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"critic sampler must be one of {SAMPLERS}")


@dataclass
class CriticState:
    """Chain parameters w[h, m] (warm-started across episodes) and the episode counter."""

    w: np.ndarray  # (H, M, d)
    episode: int = 0

    @classmethod
    def zeros(cls, horizon: int, num_chains: int, dim: int) -> "CriticState":
        return cls(np.zeros((horizon, num_chains, dim)))


@dataclass
class Dataset:
    """Trajectories stacked as arrays: states (n, H+1), actions (n, H), rewards (n, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @classmethod
    def empty(cls, horizon: int) -> "Dataset":
        return cls(np.zeros((0, horizon + 1), int), np.zeros((0, horizon), int), np.zeros((0, horizon)))

    def __len__(self) -> int:
        return self.states.shape[0]

    def extend(self, states, actions, rewards) -> "Dataset":
        return Dataset(
            np.concatenate([self.states, np.atleast_2d(states)]),
            np.concatenate([self.actions, np.atleast_2d(actions)]),
            np.concatenate([self.rewards, np.atleast_2d(rewards)]),
        )


@dataclass
class CriticOutput:
    state: CriticState
    raw_q: np.ndarray  # (H, M, S, A) unclipped <phi, w>
    q_hat: np.ndarray  # (H, S, A) clipped max over chains
    v_hat: np.ndarray  # (H+1, S), v_hat[H] = 0
    grams: np.ndarray  # (H, d, d)
    moments: np.ndarray  # (H, d)
    lrs: np.ndarray  # (H,)
    steps: int


def critic_gradient(w, gram, moment) -> np.ndarray:
    """Gradient Lambda w - b of the ridge critic loss."""
    return np.asarray(gram) @ np.asarray(w) - np.asarray(moment)


def ridge_solve(gram, moment) -> np.ndarray:
    return np.linalg.solve(np.asarray(gram, dtype=float), np.asarray(moment, dtype=float))


def lmc_step(w, gram, moment, lr: float, zeta_inv: float, rng: np.random.Generator | None = None,
             noise=None) -> np.ndarray:
    """w - lr (Lambda w - b) + sqrt(lr / zeta) nu with nu standard normal.

    ``noise`` may supply nu directly (then ``rng`` is unused); zeta_inv = 0 is noiseless.
    """
    w = np.asarray(w, dtype=float)
    out = w - lr * critic_gradient(w, gram, moment)
    if zeta_inv > 0:
        if noise is None:
            noise = rng.standard_normal(w.shape)
        out = out + math.sqrt(lr * zeta_inv) * np.asarray(noise)
    return out


def power_lambda_max(mat, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    mat = np.asarray(mat, dtype=float)
    v = np.ones(mat.shape[0]) / math.sqrt(mat.shape[0])
    lam = 0.0
    for _ in range(iters):
        u = mat @ v
        norm = np.linalg.norm(u)
        if norm == 0:
            return 0.0
        v = u / norm
        new = float(v @ mat @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam


def regression_targets(features, data: Dataset, h: int, v_next, lam: float):
    """Gram Lambda_h = sum phi phi^T + lam I and moment b_h = sum (r + V(s')) phi at step h."""
    features = np.asarray(features)
    d = features.shape[-1]
    if len(data) == 0:
        return lam * np.eye(d), np.zeros(d)
    phi = features[data.states[:, h], data.actions[:, h]]
    y = data.rewards[:, h] + np.asarray(v_next)[data.states[:, h + 1]]
    return phi.T @ phi + lam * np.eye(d), phi.T @ y


def chain_rngs(seed, horizon: int, num_chains: int) -> list[list[np.random.Generator]]:
    """Independent generators per (h, m); chain m's stream does not depend on num_chains."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    per_h = root.spawn(horizon)
    # child m of a SeedSequence is the same whatever the number of children spawned
    return [[np.random.default_rng(child) for child in ss.spawn(num_chains)] for ss in per_h]


def clip_levels(horizon: int, mode: str) -> np.ndarray:
    if mode == "horizon":
        return np.full(horizon, float(horizon))
    if mode == "step":
        return horizon - np.arange(horizon, dtype=float)
    raise ValueError(f"clip mode must be one of {CLIP_MODES}")


def run_chains(w0, gram, moment, lr, steps, zeta_inv, rngs) -> np.ndarray:
    """Run ``steps`` LMC updates on each chain (rows of w0) with its own generator."""
    w = np.array(w0, dtype=float)
    if zeta_inv > 0:
        noise = np.stack([g.standard_normal((steps, w.shape[1])) for g in rngs], axis=1)
        scale = math.sqrt(lr * zeta_inv)
    b = np.asarray(moment)
    for j in range(steps):
        w = w - lr * (w @ gram - b)  # gram is symmetric
        if zeta_inv > 0:
            w = w + scale * noise[j]
    return w


def sample_chains(w0, gram, moment, lr, steps, zeta_inv, rngs) -> np.ndarray:
    """Draw the state of ``steps`` LMC updates in one shot.

    On the quadratic ridge loss the J-step iterate is exactly Gaussian with mean
    A^J w0 + (I - A^J) w_hat and covariance
    zeta_inv (I - A^{2J}) Lambda^{-1} (I + A)^{-1}, A = I - lr Lambda, so this is
    equal in distribution to ``run_chains`` at O(d^3) cost independent of J.
    """
    gram = np.asarray(gram, dtype=float)
    evals, evecs = np.linalg.eigh(gram)
    contraction = 1.0 - lr * evals
    if np.any(np.abs(contraction) >= 1.0):
        raise FloatingPointError("critic step size too large: ||I - lr Lambda|| >= 1")
    decay = contraction ** int(steps)
    w_hat = evecs.T @ ridge_solve(gram, moment)
    coords = np.asarray(w0, dtype=float) @ evecs  # (M, d) in the eigenbasis
    mean = decay * coords + (1.0 - decay) * w_hat
    if zeta_inv > 0:
        var = zeta_inv * (1.0 - decay**2) / (evals * (1.0 + contraction))
        noise = np.stack([g.standard_normal(len(evals)) for g in rngs])
        mean = mean + np.sqrt(var) * noise
    return mean @ evecs.T


def critic_update(features, data: Dataset, value_policy, state: CriticState, config: CriticConfig,
                  rngs, steps: int | None = None) -> CriticOutput:
    """One backward pass h = H..1 of the LMC critic.

    ``value_policy`` is an (H, S, A) table used for V_h = E_a Q_h, or the
    string "greedy" for V_h = max_a Q_h.  ``steps`` overrides config.steps
    (used for theory-derived step counts).
    """
    features = np.asarray(features, dtype=float)
    S, A, d = features.shape
    H, M, _ = state.w.shape
    J = int(config.steps if steps is None else steps)
    levels = clip_levels(H, config.clip)
    zeta_inv = config.zeta_inv if config.noise else 0.0
    w_new = np.empty_like(state.w)
    raw_q = np.empty((H, M, S, A))
    q_hat = np.empty((H, S, A))
    v_hat = np.zeros((H + 1, S))
    grams = np.empty((H, d, d))
    moments = np.empty((H, d))
    lrs = np.empty(H)
    for h in range(H - 1, -1, -1):
        gram, moment = regression_targets(features, data, h, v_hat[h + 1], config.lam)
        grams[h], moments[h] = gram, moment
        if config.exact:
            lrs[h] = np.nan
            w_new[h] = ridge_solve(gram, moment)[None, :]
        else:
            lr = 1.0 / (2.0 * power_lambda_max(gram)) if config.lr == "auto" else float(config.lr)
            lrs[h] = lr
            sampler = run_chains if config.sampler == "iterate" else sample_chains
            w_new[h] = sampler(state.w[h], gram, moment, lr, J, zeta_inv, rngs[h])
        raw_q[h] = np.einsum("sad,md->msa", features, w_new[h])
        q_hat[h] = np.clip(raw_q[h].max(axis=0), 0.0, levels[h])
        if isinstance(value_policy, str):
            if value_policy != "greedy":
                raise ValueError("string value policy must be 'greedy'")
            v_hat[h] = q_hat[h].max(axis=1)
        else:
            v_hat[h] = np.sum(np.asarray(value_policy)[h] * q_hat[h], axis=1)
    if not np.all(np.isfinite(w_new)):
        raise FloatingPointError("critic parameters became non-finite")
    new_state = CriticState(w_new, state.episode + 1)
    return CriticOutput(new_state, raw_q, q_hat, v_hat, grams, moments, lrs, J)


def model_prediction_error(transitions, rewards, q_hat, v_hat) -> np.ndarray:
    """iota_h(s, a) = r_h(s, a) + sum_s' P_h(s'|s, a) V_{h+1}(s') - Q_h(s, a)."""
    v_next = np.asarray(v_hat)[1:]
    return np.asarray(rewards) + np.einsum("hsat,ht->hsa", transitions, v_next) - np.asarray(q_hat)


def elliptical_potential(features, lam: float = 1.0) -> float:
    """sum_i ||phi_i||^2_{Lambda^{-1}} with Lambda = lam I + sum_i phi_i phi_i^T."""
    X = np.asarray(features, dtype=float)
    gram = X.T @ X + lam * np.eye(X.shape[1])
    return float(np.trace(np.linalg.solve(gram, X.T @ X)))


def posterior_moments(history, zeta_inv: float, w0=None):
    """Mean and covariance of the LMC iterate after a sequence of episodes.

    ``history`` is a sequence of (Lambda_i, b_i, alpha_i, J_i).  With
    A_i = I - alpha_i Lambda_i and P_{i+1} = A_t^{J_t} ... A_{i+1}^{J_{i+1}}:
      mu    = P_1 w0 + sum_i P_{i+1} (I - A_i^{J_i}) w_hat_i
      Sigma = zeta_inv * sum_i P_{i+1} (I - A_i^{2 J_i}) Lambda_i^{-1} (I + A_i)^{-1} P_{i+1}^T
    """
    history = list(history)
    d = np.asarray(history[0][0]).shape[0]
    eye = np.eye(d)
    w0 = np.zeros(d) if w0 is None else np.asarray(w0, dtype=float)
    mats = []
    for gram, moment, lr, J in history:
        gram = np.asarray(gram, dtype=float)
        A = eye - lr * gram
        if np.max(np.abs(np.linalg.eigvalsh(A))) >= 1.0:
            raise ValueError("step size too large: ||I - alpha Lambda|| >= 1")
        mats.append((gram, np.asarray(moment, dtype=float), A, int(J)))
    mean = np.zeros(d)
    cov = np.zeros((d, d))
    suffix = eye.copy()  # P_{i+1}, built from the last episode backwards
    for gram, moment, A, J in reversed(mats):
        AJ = np.linalg.matrix_power(A, J)
        w_hat = ridge_solve(gram, moment)
        mean += suffix @ (eye - AJ) @ w_hat
        inner = (eye - AJ @ AJ) @ np.linalg.inv(gram) @ np.linalg.inv(eye + A)
        cov += zeta_inv * suffix @ inner @ suffix.T
        suffix = suffix @ AJ
    mean += suffix @ w0
    return mean, 0.5 * (cov + cov.T)


@dataclass
class TheoryHyperparams:
    lam: float
    lrs: np.ndarray
    kappa: float
    sigma: float
    steps: int
    c: float
    num_chains: int
    zeta: float
    c_delta: float

    @property
    def zeta_inv(self) -> float:
        return 1.0 / self.zeta


def num_chains_for(horizon: int, episodes: int, delta: float) -> int:
    return math.ceil(math.log(horizon * episodes / delta) / math.log(1.0 / (1.0 - LMC_C)))


def c_delta_on(batch_size: int, delta: float) -> float:
    return math.sqrt(math.log(batch_size / delta))


def c_delta_off(horizon: int, episodes: int, delta: float, d_c: int, d_a: int, zeta: float,
                eta: float, eps_bar: float = 0.0) -> float:
    H, T = horizon, episodes
    w_bar = (16.0 / 3.0) * H * math.sqrt(d_c * T) + math.sqrt(2.0 * d_c**3 * T / (3.0 * zeta * delta))
    z_bar = (eps_bar + eta * H) * T
    gap = H / (2.0 * math.sqrt(2.0) * T)
    cover = (d_c * math.log(1.0 + (4.0 * w_bar + 4.0 * H * math.sqrt(2.0 * z_bar)) / gap)
             + d_a * math.log(1.0 + 4.0 * H * math.sqrt(2.0 * z_bar) / gap))
    inner = (0.5 * math.log(T + 1) + math.log(2.0 * math.sqrt(2.0) * T / H) + math.log(2.0 / delta) + cover)
    return 3.0 * math.sqrt(inner)


def theory_hyperparams(grams, horizon: int, episodes: int, n_data: int, delta: float, mode: str = "on",
                       batch_size: int = 1, d_a: int | None = None, eta: float = 1.0,
                       eps_bar: float = 0.0, c_delta: float | None = None,
                       fixed_point_iters: int = 50) -> TheoryHyperparams:
    """Step counts, chain count and temperature from the optimism analysis.

    ``grams`` holds the current Lambda_h for every h.  The off-policy C_delta
    depends on zeta itself; it is resolved by fixed-point iteration from the
    on-policy value.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    grams = [np.asarray(g, dtype=float) for g in grams]
    d_c = grams[0].shape[0]
    d_a = d_c if d_a is None else d_a
    eigs = [np.linalg.eigvalsh(g) for g in grams]
    lrs = np.array([1.0 / (2.0 * e[-1]) for e in eigs])
    kappa = max(e[-1] / e[0] for e in eigs)
    sigma = 1.0 / (4.0 * horizon * (n_data + 1) * math.sqrt(d_c))
    steps = max(1, math.ceil(2.0 * kappa * math.log(1.0 / sigma)))
    M = num_chains_for(horizon, episodes, delta)

    def zeta_from(cd):
        return (2.0 * horizon * math.sqrt(d_c) * cd + 8.0 / 3.0) ** -2

    if c_delta is None:
        c_delta = c_delta_on(batch_size, delta)
        if mode == "off":
            for _ in range(fixed_point_iters):
                new = c_delta_off(horizon, episodes, delta, d_c, d_a, zeta_from(c_delta), eta, eps_bar)
                if abs(new - c_delta) <= 1e-12 * new:
                    c_delta = new
                    break
                c_delta = new
        elif mode != "on":
            raise ValueError("mode must be 'on' or 'off'")
    return TheoryHyperparams(1.0, lrs, float(kappa), sigma, steps, LMC_C, M, zeta_from(c_delta), float(c_delta))


# --- statistical validation of the posterior moments -------------------------------------------


@dataclass
class PosteriorReport:
    mean: np.ndarray
    cov: np.ndarray
    emp_mean: np.ndarray
    emp_cov: np.ndarray
    z_mean: np.ndarray
    z_cov: np.ndarray
    threshold: float
    n_chains: int
    details: dict = field(default_factory=dict)

    @property
    def max_z(self) -> float:
        return float(max(np.max(np.abs(self.z_mean)), np.max(np.abs(self.z_cov))))

    @property
    def passed(self) -> bool:
        return self.max_z <= self.threshold

    def lines(self) -> list[str]:
        out = [f"chains={self.n_chains} threshold={self.threshold:g} SE"]
        for i, z in enumerate(self.z_mean):
            out.append(f"mean[{i}] theory={self.mean[i]:+.6f} empirical={self.emp_mean[i]:+.6f} z={z:+.3f}")
        d = len(self.mean)
        for i in range(d):
            for j in range(i, d):
                out.append(f"cov[{i},{j}] theory={self.cov[i, j]:+.6f} empirical={self.emp_cov[i, j]:+.6f} "
                           f"z={self.z_cov[i, j]:+.3f}")
        out.append(f"max|z|={self.max_z:.3f} -> {'PASS' if self.passed else 'FAIL'}")
        return out


def synthetic_history(rng: np.random.Generator, dim: int = 2, episodes: int = 2, samples: int = 10,
                      lam: float = 1.0, steps: int = 5):
    """Random ridge problems (Lambda_i, b_i) with lr 1/(2 lambda_max) and growing data."""
    X = np.zeros((0, dim))
    y = np.zeros(0)
    hist = []
    for _ in range(episodes):
        Xi = rng.uniform(-1, 1, size=(samples, dim))
        Xi /= np.maximum(1.0, np.linalg.norm(Xi, axis=1))[:, None]
        yi = rng.uniform(0, 2, size=samples)
        X, y = np.vstack([X, Xi]), np.concatenate([y, yi])
        gram = X.T @ X + lam * np.eye(dim)
        hist.append((gram, X.T @ y, 1.0 / (2.0 * np.linalg.eigvalsh(gram)[-1]), steps))
    return hist


def validate_posterior(n_chains: int = 5000, zeta_inv: float = 0.1, seed: int = 0, dim: int = 2,
                       episodes: int = 2, steps: int = 5, lr_scale: float = 1.0,
                       threshold: float = 4.0) -> PosteriorReport:
    """Run independent LMC chains on synthetic data and compare with posterior_moments.

    ``lr_scale`` multiplies the step size used by the chains only, while the
    reference moments keep the nominal step size (negative control).
    """
    rng = np.random.default_rng(seed)
    history = synthetic_history(rng, dim, episodes, steps=steps)
    mean, cov = posterior_moments(history, zeta_inv)
    w = np.zeros((n_chains, dim))
    for gram, moment, lr, J in history:
        step_lr = lr * lr_scale
        for _ in range(J):
            w = lmc_step(w.T, gram, moment[:, None], step_lr, zeta_inv, noise=rng.standard_normal((dim, n_chains))).T
    emp_mean = w.mean(axis=0)
    emp_cov = np.cov(w, rowvar=False, ddof=1).reshape(dim, dim)
    diag = np.diag(cov)
    with np.errstate(divide="ignore", invalid="ignore"):
        se_mean = np.sqrt(diag / n_chains)
        se_cov = np.sqrt((np.outer(diag, diag) + cov**2) / n_chains)
        z_mean = np.where(se_mean > 0, (emp_mean - mean) / se_mean,
                          np.where(np.abs(emp_mean - mean) <= 1e-10, 0.0, np.inf))
        z_cov = np.where(se_cov > 0, (emp_cov - cov) / se_cov,
                         np.where(np.abs(emp_cov - cov) <= 1e-12, 0.0, np.inf))
    return PosteriorReport(mean, cov, emp_mean, emp_cov, z_mean, z_cov, threshold, n_chains,
                           {"zeta_inv": zeta_inv, "lr_scale": lr_scale, "seed": seed, "steps": steps})
