"""Experiment configuration: JSON document, validation, dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

__all__ = ["ConfigError", "EnvConfig", "ExperimentConfig", "apply_overrides", "load_config"]

MODES = ("on_policy", "off_policy")
ACTORS = ("npg_explicit", "npg_implicit", "spma_explicit", "none")
CRITICS = ("lmc", "lmc_no_noise", "ridge_greedy")
ENV_KINDS = ("random_mdp", "deep_sea", "file")
ACTOR_FEATURES = ("same", "one_hot", "random")


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class EnvConfig:
    kind: str = "random_mdp"
    seed: int = 0
    d_c: int | None = None  # None: 10 for Random MDP, one-hot for Deep Sea
    horizon: int = 20
    N: int = 10
    convention: str = "left_cost"
    deep_sea_horizon: int | None = None
    features: str = "dense"
    path: str | None = None
    actor_features: str = "same"
    actor_dim: int | None = None
    actor_seed: int = 1

    def validate(self) -> None:
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env.kind must be one of {ENV_KINDS}")
        if self.kind == "file" and not self.path:
            raise ConfigError("env.path is required for kind 'file'")
        if self.d_c is not None and self.d_c < 1:
            raise ConfigError("env.d_c must be >= 1")
        if self.horizon < 1:
            raise ConfigError("env.horizon must be >= 1")
        if self.deep_sea_horizon is not None and self.deep_sea_horizon < 1:
            raise ConfigError("env.deep_sea_horizon must be >= 1")
        if self.N < 2:
            raise ConfigError("env.N must be >= 2")
        if self.convention not in ("left_cost", "standard"):
            raise ConfigError("env.convention must be 'left_cost' or 'standard'")
        if self.features not in ("dense", "one_hot"):
            raise ConfigError("env.features must be 'dense' or 'one_hot'")
        if self.actor_features not in ACTOR_FEATURES:
            raise ConfigError(f"env.actor_features must be one of {ACTOR_FEATURES}")
        if self.actor_features == "random" and not self.actor_dim:
            raise ConfigError("env.actor_dim is required for random actor features")


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    mode: str = "off_policy"
    batch_size: int = 1
    episodes: int = 100
    actor: str = "npg_explicit"
    critic: str = "lmc"
    eta: float = 1.0
    actor_steps: int = 100
    actor_lr: float | str = "auto"
    actor_solver: str = "closed_form"
    actor_variant: str | None = None
    # "lambda" in the JSON document
    lam: float = 1.0
    zeta_inv: float | str = 1e-3
    critic_steps: int | str = 100
    critic_lr: float | str = "auto"
    critic_sampler: str = "iterate"
    num_chains: int | str = 1
    noise: str = "on"
    critic_clip: str = "horizon"
    value_policy: str = "current"
    design_epsilon: float = 0.5
    design_cap: float | None = 0.8
    seed: int = 0
    delta: float = 0.1
    eps_bar: float = 0.0
    c_delta: float | None = None
    label: str | None = None

    # --- derived views -------------------------------------------------------
    @property
    def variant(self) -> str:
        return "spma" if self.actor == "spma_explicit" else "npg"

    @property
    def horizon(self) -> int:
        if self.env.kind == "deep_sea":
            return self.env.deep_sea_horizon or self.env.N
        return self.env.horizon

    @property
    def name(self) -> str:
        return self.label or f"{self.actor}-{self.critic}"

    def validate(self) -> "ExperimentConfig":
        self.env.validate()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "on_policy" and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 in on_policy mode")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.actor not in ACTORS:
            raise ConfigError(f"actor must be one of {ACTORS}")
        if self.critic not in CRITICS:
            raise ConfigError(f"critic must be one of {CRITICS}")
        if self.critic == "ridge_greedy" and self.actor != "none":
            raise ConfigError("critic 'ridge_greedy' is the value-based baseline and needs actor 'none'")
        if self.actor_variant is not None and self.actor_variant != self.variant:
            raise ConfigError(f"actor_variant '{self.actor_variant}' contradicts actor '{self.actor}'")
        if self.actor_solver not in ("closed_form", "gradient_descent"):
            raise ConfigError("actor_solver must be 'closed_form' or 'gradient_descent'")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.actor == "spma_explicit" and self.eta > 1.0 / (2 * self.horizon):
            raise ConfigError(f"spma_explicit requires eta <= 1/(2H) = {1 / (2 * self.horizon):g}")
        if self.actor_lr != "auto" and not _positive(self.actor_lr):
            raise ConfigError("actor_lr must be positive or 'auto'")
        if self.actor_steps < 0:
            raise ConfigError("actor_steps must be >= 0")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.zeta_inv != "theory" and not _nonneg(self.zeta_inv):
            raise ConfigError("zeta_inv must be non-negative or 'theory'")
        if self.critic_steps != "theory" and not (isinstance(self.critic_steps, int) and self.critic_steps >= 1):
            raise ConfigError("critic_steps must be a positive integer or 'theory'")
        if self.critic_lr != "auto" and not _positive(self.critic_lr):
            raise ConfigError("critic_lr must be positive or 'auto'")
        if self.num_chains != "theory" and not (isinstance(self.num_chains, int) and self.num_chains >= 1):
            raise ConfigError("num_chains must be a positive integer or 'theory'")
        if self.critic_sampler not in ("iterate", "gaussian"):
            raise ConfigError("critic_sampler must be 'iterate' or 'gaussian'")
        if self.noise not in ("on", "off"):
            raise ConfigError("noise must be 'on' or 'off'")
        if self.critic_clip not in ("horizon", "step"):
            raise ConfigError("critic_clip must be 'horizon' or 'step'")
        if self.value_policy not in ("current", "previous"):
            raise ConfigError("value_policy must be 'current' or 'previous'")
        if not self.design_epsilon > 0:
            raise ConfigError("design_epsilon must be positive")
        if self.design_cap is not None and not 0 < self.design_cap <= 1:
            raise ConfigError("design_cap must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        return self

    # --- (de)serialisation ---------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("seed")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        env_doc = doc.pop("env", {}) or {}
        if not isinstance(env_doc, dict):
            raise ConfigError("env must be an object")
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)} - {"env"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        env_known = {f.name for f in fields(EnvConfig)}
        env_unknown = set(env_doc) - env_known
        if env_unknown:
            raise ConfigError(f"unknown env keys: {sorted(env_unknown)}")
        try:
            cfg = cls(env=EnvConfig(**env_doc), **doc)
        except TypeError as exc:  # pragma: no cover - guarded by the key checks above
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


def _positive(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _nonneg(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x >= 0


def parse_value(text: str):
    """Interpret an override value as JSON when possible, else as a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict[str, Any], overrides) -> dict[str, Any]:
    """Apply ``key=value`` strings (dotted keys address nested objects)."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        target = doc
        for part in parts[:-1]:
            node = target.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' addresses a non-object")
            target = node
        target[parts[-1]] = parse_value(value)
    return doc


def load_config(path=None, overrides=None) -> ExperimentConfig:
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))
