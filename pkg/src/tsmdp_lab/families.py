"""Parameterised MDP families and finite parameter grids.

Queue slot convention (both queue families): from occupancy ``s`` under
action ``i`` one packet is served with probability ``mu_i`` if ``s > 0``,
and independently one packet arrives with probability ``lambda(s)``; the
next state is ``clip(s - served + arrived, 0, M)``, so an arrival to a full
buffer is lost.  The reward is the expected per-slot net reward
``service_reward * mu_i * 1{s > 0} - cost_i - holding_cost * s``.
Action 0 is SLOW, action 1 is FAST.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ConfigurationError
from .mdp_core import FiniteMdp

SLOW, FAST = 0, 1
DEFAULT_GRID_CAP = 1_000_000


@dataclass(frozen=True)
class QueueConfig:
    capacity: int = 50
    mu_slow: float = 0.3
    mu_fast: float = 0.8
    cost_slow: float = 0.0
    cost_fast: float = 25.0
    holding_cost: float = 1.0
    service_reward: float = 200.0
    lambda_cap: float = 0.95
    # multiplies the normalised (mean, width) arrival parameters into state units
    scale: float = 50.0

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError("capacity must be a positive integer")
        if not 0 < self.mu_slow < self.mu_fast <= 1:
            raise ConfigurationError("need 0 < mu_slow < mu_fast <= 1")
        if not 0 < self.lambda_cap < 1:
            raise ConfigurationError("need 0 < lambda_cap < 1")

    @property
    def service_probs(self):
        return (self.mu_slow, self.mu_fast)

    @property
    def action_costs(self):
        return (self.cost_slow, self.cost_fast)


@dataclass(frozen=True)
class QueueParams:
    """Arrival-curve mean and width, in state units."""

    mu_bar: float
    sigma_bar: float

    def __post_init__(self):
        if not self.sigma_bar > 0:
            raise ConfigurationError("sigma_bar must be positive")

    @classmethod
    def normalized(cls, mean_frac: float, width_frac: float, config: QueueConfig):
        return cls(mean_frac * config.scale, width_frac * config.scale)


@dataclass(frozen=True)
class TwoServerParams:
    theta: float
    upsilon: float = 0.0

    def __post_init__(self):
        if not 0 <= self.upsilon < 0.5:
            raise ConfigurationError("upsilon must lie in [0, 1/2)")
        if not self.upsilon <= self.theta <= 1 - self.upsilon:
            raise ConfigurationError(
                f"theta={self.theta} outside [{self.upsilon}, {1 - self.upsilon}]"
            )


@dataclass(frozen=True)
class TwoStateParams:
    """Switching probabilities p(1->2) and p(2->1) under actions 1 and 2."""

    p12_a1: float
    p21_a1: float
    p12_a2: float
    p21_a2: float
    upsilon: float = 0.05

    def __post_init__(self):
        lo, hi = self.upsilon, 1 - self.upsilon
        for name in ("p12_a1", "p21_a1", "p12_a2", "p21_a2"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigurationError(f"{name}={v} outside [{lo}, {hi}]")


def arrival_curve(params: QueueParams, config: QueueConfig) -> np.ndarray:
    """Gaussian-shaped arrival probabilities, scaled so the maximum over the
    integer states equals ``lambda_cap``."""
    s = np.arange(config.capacity + 1, dtype=float)
    shape = np.exp(-((s - params.mu_bar) ** 2) / (2.0 * params.sigma_bar**2))
    peak = shape.max()
    if peak <= 0:
        raise ConfigurationError("arrival curve underflows to zero on every state")
    return np.minimum(config.lambda_cap, config.lambda_cap * shape / peak)


def _queue_mdp(arrivals: np.ndarray, config: QueueConfig) -> FiniteMdp:
    n = config.capacity + 1
    kernel = np.zeros((n, 2, n))
    reward = np.zeros((n, 2))
    for s in range(n):
        lam = arrivals[s]
        for a, (mu, cost) in enumerate(zip(config.service_probs, config.action_costs)):
            serve = mu if s > 0 else 0.0
            for served, p_serve in ((1, serve), (0, 1.0 - serve)):
                for arrived, p_arr in ((1, lam), (0, 1.0 - lam)):
                    nxt = min(config.capacity, max(0, s - served + arrived))
                    kernel[s, a, nxt] += p_serve * p_arr
            reward[s, a] = config.service_reward * serve - cost - config.holding_cost * s
    return FiniteMdp(reward, kernel)


def build_queue_mdp(params: QueueParams, config: QueueConfig = QueueConfig()) -> FiniteMdp:
    return _queue_mdp(arrival_curve(params, config), config)


def build_two_server_mdp(params: TwoServerParams, config: QueueConfig = QueueConfig()) -> FiniteMdp:
    return _queue_mdp(np.full(config.capacity + 1, params.theta), config)


def build_two_state_mdp(params: TwoStateParams, rewards=(0.0, 1.0)) -> FiniteMdp:
    r1, r2 = rewards
    if not r1 < r2:
        raise ConfigurationError("the two-state family expects r1 < r2")
    kernel = np.zeros((2, 2, 2))
    for a, (p12, p21) in enumerate(
        ((params.p12_a1, params.p21_a1), (params.p12_a2, params.p21_a2))
    ):
        kernel[0, a] = (1 - p12, p12)
        kernel[1, a] = (p21, 1 - p21)
    reward = np.array([[r1, r1], [r2, r2]], dtype=float)
    return FiniteMdp(reward, kernel)


def two_state_closed_form_policy(params: TwoStateParams) -> tuple:
    """(argmax_i p12_i, argmin_i p21_i), ties to the lower action."""
    a1 = 0 if params.p12_a1 >= params.p12_a2 else 1
    a2 = 0 if params.p21_a1 <= params.p21_a2 else 1
    return a1, a2


def pinsker_constant(config: QueueConfig, include_boundary: bool = True) -> float:
    """Constant a with KL(row_theta || row_theta') >= a (theta - theta')^2 for
    the constant-arrival queue.

    Interior rows give min_i (1 + |2 mu_i - 1|)^2 / 2.  The empty queue row
    (1 - theta, theta) gives 2 and the full queue row, with down-probability
    mu_i (1 - theta), gives 2 mu_i^2; these are included by default since the
    marginal KL mixes all visited rows.
    """
    interior = 0.5 * min((1 + abs(2 * mu - 1)) ** 2 for mu in config.service_probs)
    if not include_boundary:
        return interior
    full = 2.0 * min(mu * mu for mu in config.service_probs)
    return min(interior, 2.0, full)


@dataclass(frozen=True, eq=False)
class ParamGrid:
    family: str
    params: tuple
    mdps: tuple
    labels: tuple

    def __post_init__(self):
        if not self.mdps:
            raise ConfigurationError("parameter grid is empty")
        first = self.mdps[0]
        for m in self.mdps[1:]:
            if m.kernel.shape != first.kernel.shape or not np.array_equal(m.reward, first.reward):
                raise ConfigurationError("grid MDPs must share states, actions and rewards")

    def __len__(self):
        return len(self.mdps)

    @property
    def points(self):
        return list(zip(self.params, self.mdps))

    @property
    def reward(self) -> np.ndarray:
        return self.mdps[0].reward

    @property
    def n_states(self) -> int:
        return self.mdps[0].n_states

    @property
    def n_actions(self) -> int:
        return self.mdps[0].n_actions

    def kernels(self) -> np.ndarray:
        """Stacked kernels, shape (G, S, A, S)."""
        return np.stack([m.kernel for m in self.mdps])

    def index_of(self, values: Sequence[float], atol: float = 1e-9) -> int:
        for i, p in enumerate(self.params):
            if np.allclose(_param_values(p), values, atol=atol, rtol=0):
                return i
        raise ConfigurationError(f"no grid point matches {tuple(values)}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "labels": list(self.labels),
                "params": [asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in self.params],
                "mdps": [m.to_dict() for m in self.mdps],
            }
        )


def _param_values(p) -> tuple:
    if isinstance(p, QueueParams):
        return (p.mu_bar, p.sigma_bar)
    if isinstance(p, TwoServerParams):
        return (p.theta,)
    if isinstance(p, TwoStateParams):
        return (p.p12_a1, p.p21_a1, p.p12_a2, p.p21_a2)
    return tuple(p)


FAMILIES = ("queue", "two_server", "two_state")


def make_params(family: str, values: Sequence[float], config: Any = None, upsilon: float | None = None):
    """Parameter object for ``family`` from raw axis values.

    Queue values are the normalised (mean, width) fractions; two-state
    values are the four switching probabilities.  ``upsilon`` defaults to
    0 for the two-server family and 0.05 for the two-state family.
    """
    if family == "queue":
        return QueueParams.normalized(values[0], values[1], config or QueueConfig())
    if family == "two_server":
        return TwoServerParams(values[0], upsilon=0.0 if upsilon is None else upsilon)
    if family == "two_state":
        return TwoStateParams(*values, upsilon=0.05 if upsilon is None else upsilon)
    raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")


def build_mdp(family: str, params, config: Any = None, rewards=(0.0, 1.0)) -> FiniteMdp:
    if family == "queue":
        return build_queue_mdp(params, config or QueueConfig())
    if family == "two_server":
        return build_two_server_mdp(params, config or QueueConfig())
    if family == "two_state":
        return build_two_state_mdp(params, rewards)
    raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")


def grid_prior(
    family: str,
    axes: Sequence[Sequence[float]],
    config: Any = None,
    rewards=(0.0, 1.0),
    cap: int = DEFAULT_GRID_CAP,
    upsilon: float | None = None,
) -> ParamGrid:
    """Cartesian-product grid, one MDP per point, in row-major axis order."""
    if not axes or any(len(ax) == 0 for ax in axes):
        raise ConfigurationError("every grid axis needs at least one value")
    size = int(np.prod([len(ax) for ax in axes]))
    if size > cap:
        raise ConfigurationError(f"grid of {size} points exceeds the cap of {cap}")
    params, mdps, labels = [], [], []
    for values in itertools.product(*axes):
        p = make_params(family, values, config, upsilon)
        params.append(p)
        mdps.append(build_mdp(family, p, config, rewards))
        labels.append("(" + ", ".join(f"{v:g}" for v in values) + ")")
    return ParamGrid(family, tuple(params), tuple(mdps), tuple(labels))


def reference_queue_axes():
    """Normalised (mean, width) axes of the single-queue experiment."""
    means = [round(0.05 * i, 2) for i in range(1, 20)]
    widths = [round(0.2 * i, 1) for i in range(1, 11)]
    return [means, widths]


# reference instance of the two-state family: action 1 is better in both states
TWO_STATE_FIXTURE = TwoStateParams(0.8, 0.2, 0.4, 0.6)
