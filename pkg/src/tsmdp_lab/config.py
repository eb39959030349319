"""Versioned JSON experiment configuration.

Unknown keys are rejected at every level so a typo cannot silently fall
back to a default.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .families import FAMILIES, QueueConfig

SCHEMA_VERSION = 1
BUILTIN = ("queue", "two_server", "two_state")


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class AgentSpec:
    name: str
    delta: float | str | None = None

    def __post_init__(self):
        if self.name not in ("tsmdp", "ucrl2"):
            raise ConfigurationError(f"unknown agent {self.name!r}")
        if self.name == "ucrl2" and self.delta is None:
            raise ConfigurationError("ucrl2 needs a delta")
        if self.name == "tsmdp" and self.delta is not None:
            raise ConfigurationError("tsmdp takes no delta")

    @property
    def label(self) -> str:
        if self.name == "tsmdp":
            return "tsmdp"
        return "ucrl2_1overT" if self.delta == "one_over_T" else f"ucrl2_{self.delta:g}"


@dataclass(frozen=True)
class Theorem4Spec:
    Delta: float | str = "pinsker"  # a number, or "pinsker" (two-server only)
    L: int | str = "all"  # an integer, or "all" = |C| - 1


@dataclass(frozen=True)
class AnalysisSpec:
    epsilon: float = 0.1
    epsilon_prime: float | str = 0.0  # number or "inf"
    a4: float = 0.0
    theorem4: Theorem4Spec | None = None

    @property
    def epsilon_prime_value(self) -> float:
        if self.epsilon_prime == "inf":
            return math.inf
        if isinstance(self.epsilon_prime, str):
            raise ConfigurationError("epsilon_prime must be a number or \"inf\"")
        return float(self.epsilon_prime)


@dataclass(frozen=True)
class ConcentrationSpec:
    delta: float = 0.05
    n_paths: int | None = None  # None -> 1000, with a warning
    holdout_paths: int = 1000
    n_cycles: int = 1000
    n_policies: int = 1
    with_reward: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    true_parameter: tuple
    version: int = SCHEMA_VERSION
    family_params: dict = field(default_factory=dict)
    grid_axes: tuple | None = None
    prior: Any = "uniform"
    s0: int = 0
    horizons: tuple = (1000,)
    n_runs: int = 1
    seed: int = 0
    agents: tuple = (AgentSpec("tsmdp"),)
    checkpoints: tuple | None = None
    solver: str = "policy_iteration"
    cycle_cap: int = 1_000_000
    analysis: AnalysisSpec = AnalysisSpec()
    concentration: ConcentrationSpec = ConcentrationSpec()

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigurationError(f"config version {self.version} is not {SCHEMA_VERSION}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if list(self.horizons) != sorted(self.horizons) or not self.horizons:
            raise ConfigurationError("horizons must be a nonempty ascending list")
        if any(int(h) < 1 for h in self.horizons):
            raise ConfigurationError("horizons must be positive")
        if self.n_runs < 1:
            raise ConfigurationError("n_runs must be at least 1")
        if self.solver not in ("policy_iteration", "rvi"):
            raise ConfigurationError(f"unknown solver {self.solver!r}")
        labels = [a.label for a in self.agents]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("duplicate agent entries")

    @property
    def horizon(self) -> int:
        return int(self.horizons[-1])

    def queue_config(self) -> QueueConfig:
        if self.family == "two_state":
            extra = sorted(set(self.family_params) - {"rewards", "upsilon"})
            if extra:
                raise ConfigurationError(f"unknown key(s) in family_params: {', '.join(extra)}")
            return QueueConfig()
        params = {k: v for k, v in self.family_params.items() if k != "upsilon"}
        return _strict(QueueConfig, params, "family_params")

    @property
    def upsilon(self):
        return self.family_params.get("upsilon")

    @property
    def rewards(self):
        return tuple(self.family_params.get("rewards", (0.0, 1.0)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_parameter"] = list(self.true_parameter)
        d["grid_axes"] = None if self.grid_axes is None else [list(a) for a in self.grid_axes]
        d["horizons"] = list(self.horizons)
        d["checkpoints"] = None if self.checkpoints is None else list(self.checkpoints)
        d["agents"] = [{k: v for k, v in asdict(a).items() if v is not None} for a in self.agents]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        data = dict(data)
        if "version" not in data:
            raise ConfigurationError("config is missing its schema version")
        for key in ("true_parameter", "horizons", "checkpoints"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        if data.get("grid_axes") is not None:
            data["grid_axes"] = tuple(tuple(a) for a in data["grid_axes"])
        if "agents" in data:
            data["agents"] = tuple(_strict(AgentSpec, a, "agents[]") for a in data["agents"])
        if "analysis" in data:
            a = dict(data["analysis"])
            if a.get("theorem4") is not None:
                a["theorem4"] = _strict(Theorem4Spec, a["theorem4"], "analysis.theorem4")
            data["analysis"] = _strict(AnalysisSpec, a, "analysis")
        if "concentration" in data:
            data["concentration"] = _strict(ConcentrationSpec, data["concentration"], "concentration")
        cfg = _strict(cls, data, "config")
        cfg.queue_config()  # validate family parameters early
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def load_config(source: str) -> ExperimentConfig:
    """A path to a JSON file, or the name of a bundled config."""
    if source in BUILTIN:
        text = resources.files("tsmdp_lab").joinpath(f"configs/{source}.json").read_text()
        return ExperimentConfig.from_json(text)
    path = Path(source)
    if not path.is_file():
        raise ConfigurationError(f"config file {source!r} not found (bundled: {', '.join(BUILTIN)})")
    return ExperimentConfig.from_json(path.read_text())
