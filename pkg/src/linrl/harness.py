"""End-to-end actor-critic loop, baselines, regret metrics and diagnostic identities."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .actor import (
    ActorDivergence,
    actor_solve_closed_form,
    actor_update_gd,
    projection_error_bound,
    npg_step_log,
    regression_loss,
    spma_step_log,
    spma_target,
)
from .config import ExperimentConfig
from .critic import (
    CriticConfig,
    CriticState,
    Dataset,
    chain_rngs,
    clip_levels,
    critic_update,
    model_prediction_error,
    theory_hyperparams,
)
from .design import Coreset, coverage_score, greedy_g_design
from .linear_mdp import (
    LinearMdp,
    exact_policy_value,
    make_deep_sea,
    make_random_mdp,
    optimal_values,
    random_state_features,
    sample_episodes,
    state_occupancy,
    uniform_policy,
)
from .policy import ImplicitNpgPolicy, LogLinearPolicy

__all__ = [
    "CSV_COLUMNS",
    "EpisodeRecord",
    "RunAborted",
    "RunResult",
    "build_environment",
    "regret_decomposition",
    "regret_metrics",
    "run_experiment",
    "value_difference_check",
    "write_csv",
]

CSV_COLUMNS = (
    "episode",
    "exact_value",
    "mixture_value",
    "cum_regret",
    "optimism_violation_rate",
    "proj_err_max",
    "wall_ms",
)
OPTIMISM_TOL = 1e-9


class RunAborted(RuntimeError):
    """Numerical failure inside a run; ``records`` holds the episodes completed so far."""

    def __init__(self, message: str, records):
        super().__init__(message)
        self.records = records


@dataclass
class EpisodeRecord:
    episode: int
    exact_value: float  # V^{pi_t}_1(s_1) in raw reward units
    normalized_value: float  # same, in the [0, 1]-reward units seen by the critic
    mixture_value: float  # running mean of exact_value
    cum_regret: float
    optimism_violation_rate: float  # fraction of (h, s, a) with iota > 1e-9
    iota_max: float
    proj_err_max: float
    proj_bound: float
    eps_bias: float  # min of the unweighted actor loss over all of S x A (max over h)
    eps_bias_coreset: float  # min of the rho-weighted coreset loss (max over h)
    eps_opt: float
    phi_bar: float
    decomposition_residual: float
    explicit_implicit_gap: float
    data_size: int
    policy_storage: int
    critic_steps: int
    wall_ms: float


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[EpisodeRecord]
    v_star: float  # raw units
    coreset: Coreset | None
    runtime_s: float
    theory: dict = field(default_factory=dict)

    def values(self) -> np.ndarray:
        return np.array([r.exact_value for r in self.records])

    def final_value(self, window: int = 50) -> float:
        return float(np.mean(self.values()[-window:]))

    def summary(self, window: int = 50) -> dict:
        metrics = regret_metrics(self.values(), self.v_star)
        return {
            "config": self.config.to_dict(),
            "episodes": len(self.records),
            "v_star": self.v_star,
            "final_value": self.final_value(window),
            "final_window": min(window, len(self.records)),
            "mixture_value": metrics["mixture_value"],
            "cum_regret": metrics["cum_regret"][-1],
            "optimality_gap": metrics["optimality_gap"],
            "max_optimism_violation_rate": max(r.optimism_violation_rate for r in self.records),
            "max_proj_err": max(r.proj_err_max for r in self.records),
            "coreset_size": None if self.coreset is None else self.coreset.size,
            "runtime_s": self.runtime_s,
            "theory": self.theory,
        }


# --- environments -------------------------------------------------------------------------------


def build_environment(cfg: ExperimentConfig):
    """Return (mdp, actor_features) for the configured environment."""
    env = cfg.env
    if env.kind == "random_mdp":
        mdp = make_random_mdp(seed=env.seed, d_c=env.d_c, horizon=env.horizon,
                              features=env.features)
    elif env.kind == "deep_sea":
        mdp = make_deep_sea(N=env.N, d_c=env.d_c, convention=env.convention,
                            horizon=env.deep_sea_horizon)
    else:
        with open(env.path, encoding="utf-8") as fh:
            mdp = LinearMdp.from_json(fh.read())
    S, A = mdp.n_states, mdp.n_actions
    if env.actor_features == "same":
        phi_a = mdp.features
    elif env.actor_features == "one_hot":
        phi_a = np.eye(S * A).reshape(S, A, S * A)
    else:
        rng = np.random.default_rng(env.actor_seed)
        phi_a = random_state_features(rng, S, A, env.actor_dim)
    return mdp, phi_a


# --- identities ---------------------------------------------------------------------------------


def _v_hat(q_hat, pi_prime):
    H, S, _ = q_hat.shape
    v = np.zeros((H + 1, S))
    v[:H] = np.sum(pi_prime * q_hat, axis=-1)
    return v


def value_difference_check(mdp: LinearMdp, pi, pi_prime, q_hat) -> float:
    """|LHS - RHS| of the extended value-difference identity, both sides by exact DP.

    With V_hat_h = <Q_hat_h, pi'_h>:
      V_hat_1(s_1) - V^pi_1(s_1) = sum_h E_{s~pi} <pi'_h - pi_h, Q_hat_h>(s)
                                 + sum_h E_{(s,a)~pi} [Q_hat_h - r_h - P_h V_hat_{h+1}](s, a)
    """
    pi, pi_prime, q_hat = (np.asarray(x, dtype=float) for x in (pi, pi_prime, q_hat))
    v_hat = _v_hat(q_hat, pi_prime)
    v_pi, _ = exact_policy_value(mdp, pi)
    occ = state_occupancy(mdp, pi)
    s1 = mdp.initial_state
    lhs = v_hat[0, s1] - v_pi[0, s1]
    policy_term = np.sum(occ * np.sum((pi_prime - pi) * q_hat, axis=-1))
    iota = model_prediction_error(mdp.transitions, mdp.rewards, q_hat, v_hat)
    model_term = np.sum(occ[:, :, None] * pi * (-iota))
    return float(abs(lhs - (policy_term + model_term)))


def regret_decomposition(mdp: LinearMdp, pi_star, pi_t, q_hat, pi_prime=None) -> dict:
    """Split V*_1 - V^{pi_t}_1 into an actor term and a critic (model-error) term.

    V_hat is built from (q_hat, pi_prime); pi_prime defaults to pi_t, in which
    case the ``mismatch`` term vanishes.
    """
    pi_prime = pi_t if pi_prime is None else pi_prime
    v_hat = _v_hat(q_hat, pi_prime)
    iota = model_prediction_error(mdp.transitions, mdp.rewards, q_hat, v_hat)
    occ_star = state_occupancy(mdp, pi_star)
    occ_t = state_occupancy(mdp, pi_t)
    actor = np.sum(occ_star * np.sum((pi_star - pi_prime) * q_hat, axis=-1))
    mismatch = -np.sum(occ_t * np.sum((pi_t - pi_prime) * q_hat, axis=-1))
    critic = np.sum(occ_star[:, :, None] * pi_star * iota) - np.sum(occ_t[:, :, None] * pi_t * iota)
    s1 = mdp.initial_state
    gap = exact_policy_value(mdp, pi_star)[0][0, s1] - exact_policy_value(mdp, pi_t)[0][0, s1]
    total = actor + mismatch + critic
    return {"gap": float(gap), "actor": float(actor), "critic": float(critic),
            "mismatch": float(mismatch), "residual": float(abs(gap - total))}


def regret_metrics(values, v_star: float) -> dict:
    """Cumulative regret, per-episode gaps, optimality gap Reg(T)/T and mixture value."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no episodes")
    gaps = v_star - values
    cum = np.cumsum(gaps)
    return {
        "gaps": gaps,
        "cum_regret": cum,
        "optimality_gap": float(cum[-1] / len(values)),
        "mixture_value": float(np.mean(values)),
    }


# --- the loop -----------------------------------------------------------------------------------


def _greedy_table(q_hat: np.ndarray) -> np.ndarray:
    pi = np.zeros_like(q_hat)
    idx = np.argmax(q_hat, axis=-1)
    np.put_along_axis(pi, idx[..., None], 1.0, axis=-1)
    return pi


def _critic_config(cfg: ExperimentConfig, num_chains: int, zeta_inv: float, steps: int) -> CriticConfig:
    return CriticConfig(
        lam=cfg.lam,
        zeta_inv=zeta_inv,
        steps=steps,
        lr=cfg.critic_lr,
        num_chains=num_chains,
        noise=cfg.noise == "on" and cfg.critic == "lmc",
        clip=cfg.critic_clip,
        exact=cfg.critic == "ridge_greedy",
        sampler=cfg.critic_sampler,
    )


def _design_grams(features, data: Dataset, lam: float) -> list[np.ndarray]:
    d = features.shape[-1]
    out = []
    for h in range(data.actions.shape[1]):
        phi = features[data.states[:, h], data.actions[:, h]]
        out.append(phi.T @ phi + lam * np.eye(d))
    return out


class _ExplicitActor:
    """Projected NPG / SPMA over a fixed coreset."""

    def __init__(self, cfg: ExperimentConfig, phi_a: np.ndarray, horizon: int):
        self.cfg = cfg
        self.policy = LogLinearPolicy(phi_a, horizon)
        S, A, d = phi_a.shape
        self.flat = phi_a.reshape(S * A, d)
        self.coreset = greedy_g_design(self.flat, cfg.design_epsilon, cfg.design_cap)
        if self.coreset.size == 0:
            # the threshold is met by G = I alone; fall back to uniform weights on every pair
            self.idx, self.rho = np.arange(S * A), np.full(S * A, 1.0 / (S * A))
        else:
            self.idx, self.rho = self.coreset.unique()
        self.phi_pts = self.flat[self.idx]
        gram = self.phi_pts.T @ (self.rho[:, None] * self.phi_pts)
        self.phi_bar = coverage_score(
            Coreset(self.idx, self.rho, gram, np.eye(d), 0.0, "", 0.0), self.flat, form="design")

    def update(self, q_actor: np.ndarray, pi_t: np.ndarray):
        """Return (eps_bias, eps_bias_coreset, eps_opt) maxima over h after replacing theta.

        ``eps_bias`` is the best achievable unweighted loss over every pair,
        the quantity whose square root bounds each pointwise logit residual;
        ``eps_bias_coreset`` is the optimum of the rho-weighted coreset loss.
        """
        cfg = self.cfg
        H = q_actor.shape[0]
        logits = self.policy.logit_table()
        eps_bias = eps_core = eps_opt = 0.0
        ones = np.ones(len(self.flat))
        new_theta = self.policy.theta.copy()
        for h in range(H):
            if cfg.variant == "spma":
                full = spma_target(logits[h], q_actor[h], pi_t[h], cfg.eta)
            else:
                full = logits[h] + cfg.eta * q_actor[h]
            target = full.reshape(-1)[self.idx]
            theta_prev = self.policy.theta[h]
            if cfg.actor_solver == "closed_form":
                theta, _ = actor_solve_closed_form(theta_prev, target, self.phi_pts, self.rho)
                best = regression_loss(theta, self.phi_pts, target, self.rho)
                gap = 0.0
            else:
                theta, diag = actor_update_gd(theta_prev, target, self.phi_pts, self.rho,
                                              cfg.actor_steps, cfg.actor_lr)
                best, gap = diag.optimal_loss, diag.eps_opt
            new_theta[h] = theta
            theta_full, _ = actor_solve_closed_form(theta_prev, full.reshape(-1), self.flat, ones)
            full_best = regression_loss(theta_full, self.flat, full.reshape(-1), ones)
            eps_bias, eps_core, eps_opt = max(eps_bias, full_best), max(eps_core, best), max(eps_opt, gap)
        self.policy.theta = new_theta
        return eps_bias, eps_core, eps_opt

    def log_table(self) -> np.ndarray:
        return self.policy.log_table()

    def storage(self) -> int:
        return self.policy.storage_size()


def run_experiment(cfg: ExperimentConfig, mdp: LinearMdp | None = None, actor_features=None,
                   shadow_implicit: bool = False, timing: bool = False,
                   progress=None) -> RunResult:
    """Run the on-/off-policy actor-critic loop for ``cfg.episodes`` episodes.

    ``shadow_implicit`` additionally maintains the implicit NPG policy fed by
    the same critic outputs and records its max deviation from the policy
    actually played.  ``timing`` fills the per-episode wall-clock column.
    """
    cfg.validate()
    start = time.perf_counter()
    if mdp is None:
        mdp, phi_default = build_environment(cfg)
        actor_features = phi_default if actor_features is None else actor_features
    elif actor_features is None:
        actor_features = mdp.features
    actor_features = np.asarray(actor_features, dtype=float)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    T = cfg.episodes
    s1 = mdp.initial_state

    v_star_table, pi_star = optimal_values(mdp)
    v_star_norm = float(v_star_table[0, s1])
    v_star = float(mdp.raw_value(v_star_norm))

    # hyperparameters that can be derived from the analysis
    theory: dict = {}
    mode_short = "on" if cfg.mode == "on_policy" else "off"
    need_theory = "theory" in (cfg.zeta_inv, cfg.critic_steps, cfg.num_chains)
    base_theory = None
    if need_theory:
        base_theory = theory_hyperparams(
            [cfg.lam * np.eye(mdp.dim)] * H, H, T, 0, cfg.delta, mode_short, batch_size=cfg.batch_size,
            d_a=actor_features.shape[-1], eta=cfg.eta, eps_bar=cfg.eps_bar, c_delta=cfg.c_delta)
        theory = {"num_chains": base_theory.num_chains, "zeta_inv": base_theory.zeta_inv,
                  "c_delta": base_theory.c_delta, "c": base_theory.c}
    num_chains = base_theory.num_chains if cfg.num_chains == "theory" else int(cfg.num_chains)
    zeta_inv = base_theory.zeta_inv if cfg.zeta_inv == "theory" else float(cfg.zeta_inv)
    fixed_steps = 1 if cfg.critic_steps == "theory" else int(cfg.critic_steps)
    critic_cfg = _critic_config(cfg, num_chains, zeta_inv, fixed_steps)

    seeds = np.random.SeedSequence([cfg.seed, 0x5EED])
    data_seed, chain_seed = seeds.spawn(2)
    data_rng = np.random.default_rng(data_seed)
    rngs = chain_rngs(chain_seed, H, num_chains)
    state = CriticState.zeros(H, num_chains, mdp.dim)
    data = Dataset.empty(H)

    actor_clip = clip_levels(H, "step")
    explicit = None
    implicit = None
    coreset = None
    if cfg.actor in ("npg_explicit", "spma_explicit"):
        explicit = _ExplicitActor(cfg, actor_features, H)
        coreset = explicit.coreset
    if cfg.actor == "npg_implicit" or (shadow_implicit and cfg.actor == "npg_explicit"):
        implicit = ImplicitNpgPolicy(cfg.eta, mdp.features, H, clip_levels=actor_clip)

    pi_t = uniform_policy(mdp)
    log_pi_t = np.log(pi_t)
    pi_prev = pi_t
    records: list[EpisodeRecord] = []
    total = 0.0
    cum_regret = 0.0
    for t in range(1, T + 1):
        tick = time.perf_counter()
        v_norm = float(exact_policy_value(mdp, pi_t)[0][0, s1])
        value = float(mdp.raw_value(v_norm))
        total += value
        cum_regret += v_star - value

        # data collection
        states, actions, rewards = sample_episodes(mdp, pi_t, data_rng, cfg.batch_size if cfg.mode == "on_policy" else 1)
        if cfg.mode == "on_policy":
            data = Dataset(states, actions, rewards)
        else:
            data = data.extend(states, actions, rewards)

        # critic
        steps = fixed_steps
        if cfg.critic_steps == "theory":
            th = theory_hyperparams(_design_grams(mdp.features, data, cfg.lam), H, T, len(data), cfg.delta,
                                    mode_short, batch_size=cfg.batch_size, c_delta=theory.get("c_delta", 1.0))
            steps = th.steps
        if cfg.actor == "none":
            v_policy = "greedy"
        else:
            v_policy = pi_t if cfg.value_policy == "current" else pi_prev
        try:
            out = critic_update(mdp.features, data, v_policy, state, critic_cfg, rngs, steps=steps)
        except FloatingPointError as exc:
            raise RunAborted(f"episode {t}: {exc}", records) from exc
        state = out.state
        q_hat, v_hat = out.q_hat, out.v_hat
        iota = model_prediction_error(mdp.transitions, mdp.rewards, q_hat, v_hat)
        pi_value = _greedy_table(q_hat) if cfg.actor == "none" else np.asarray(v_policy)
        decomposition = regret_decomposition(mdp, pi_star, pi_t, q_hat, pi_value)

        # actor
        q_actor = np.clip(out.raw_q.max(axis=1), 0.0, actor_clip[:, None, None])
        eps_bias = eps_core = eps_opt = 0.0
        phi_bar = 0.0
        gap = 0.0
        proj_max = 0.0
        if cfg.actor == "none":
            pi_next = _greedy_table(q_hat)
            log_next = None
            storage = state.w.size
        else:
            if implicit is not None:
                implicit.add_critic(state.w)
            if explicit is not None:
                try:
                    eps_bias, eps_core, eps_opt = explicit.update(q_actor, pi_t)
                except (ActorDivergence, ValueError) as exc:
                    raise RunAborted(f"episode {t}: {exc}", records) from exc
                phi_bar = explicit.phi_bar
                log_next = explicit.log_table()
                storage = explicit.storage()
            else:
                log_next = implicit.log_table()
                storage = implicit.storage_size()
            pi_next = np.exp(log_next)
            step = spma_step_log if cfg.variant == "spma" else npg_step_log
            log_half = step(log_pi_t, q_actor, cfg.eta)
            # epsilon_h(s) = KL(pi* || pi^{t+1}) - KL(pi* || half step); pi* is deterministic
            diff = np.where(pi_star > 0, log_half - log_next, 0.0)
            proj_max = float(np.max(np.abs(np.sum(pi_star * diff, axis=-1))))
            if implicit is not None and explicit is not None:
                gap = float(np.max(np.abs(implicit.table() - pi_next)))
        if not np.all(np.isfinite(pi_next)):
            raise RunAborted(f"episode {t}: policy became non-finite", records)

        records.append(EpisodeRecord(
            episode=t,
            exact_value=value,
            normalized_value=v_norm,
            mixture_value=total / t,
            cum_regret=cum_regret,
            optimism_violation_rate=float(np.mean(iota > OPTIMISM_TOL)),
            iota_max=float(np.max(iota)),
            proj_err_max=float(proj_max),
            proj_bound=float(projection_error_bound(phi_bar, eps_bias, eps_opt)) if explicit is not None else 0.0,
            eps_bias=float(eps_bias),
            eps_bias_coreset=float(eps_core),
            eps_opt=float(eps_opt),
            phi_bar=float(phi_bar),
            decomposition_residual=decomposition["residual"],
            explicit_implicit_gap=gap,
            data_size=len(data),
            policy_storage=int(storage),
            critic_steps=int(steps),
            wall_ms=(time.perf_counter() - tick) * 1e3 if timing else float("nan"),
        ))
        if progress is not None:
            progress(records[-1])
        pi_prev, pi_t, log_pi_t = pi_t, pi_next, log_next
    return RunResult(cfg, records, v_star, coreset, time.perf_counter() - start, theory)


# --- output -------------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def write_csv(records, fh=None) -> str:
    """Per-episode CSV with the public columns; returns the text when ``fh`` is None."""
    buf = io.StringIO() if fh is None else fh
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        row = asdict(r)
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue() if fh is None else ""


def write_summary(result: RunResult, fh) -> None:
    json.dump(result.summary(), fh, indent=2, sort_keys=True, default=float)
    fh.write("\n")
