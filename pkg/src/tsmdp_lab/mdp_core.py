"""Tabular average-reward MDPs.

Stationary distributions are computed with the Grassmann-Taksar-Heyman
(GTH) elimination, which never subtracts probabilities and therefore stays
accurate on the nearly decomposable chains that queueing models produce
(stationary masses of 1e-18 next to masses of 0.1).  Policy biases use the
same subtraction-free state reduction.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConfigurationError, NumericalError, PreconditionError

ROW_SUM_TOL = 1e-12
RESIDUAL_TOL = 1e-10
DIRECT_SOLVE_MAX_STATES = 512


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """States ``0..n_states-1``, actions ``0..n_actions-1``, a known reward
    table ``reward[s, a]`` and a kernel ``kernel[s, a, s']``."""

    reward: np.ndarray
    kernel: np.ndarray

    def __post_init__(self):
        reward = _frozen(self.reward)
        kernel = _frozen(self.kernel)
        if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
            raise ConfigurationError(f"kernel must have shape (S, A, S), got {kernel.shape}")
        if reward.shape != kernel.shape[:2]:
            raise ConfigurationError(
                f"reward shape {reward.shape} does not match kernel shape {kernel.shape}"
            )
        if not np.all(np.isfinite(reward)):
            raise ConfigurationError("reward table contains NaN or inf")
        if not np.all(np.isfinite(kernel)) or kernel.min() < 0:
            raise ConfigurationError("kernel entries must be finite and nonnegative")
        worst = np.abs(kernel.sum(axis=2) - 1.0).max()
        if worst > ROW_SUM_TOL:
            raise ConfigurationError(f"kernel rows must sum to 1 (worst deviation {worst:.3g})")
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "kernel", kernel)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "reward": self.reward.tolist(),
            "kernel": self.kernel.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteMdp":
        mdp = cls(reward=d["reward"], kernel=d["kernel"])
        if (mdp.n_states, mdp.n_actions) != (d["n_states"], d["n_actions"]):
            raise ConfigurationError("declared n_states/n_actions disagree with the tables")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FiniteMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, order=True)
class StationaryPolicy:
    """Deterministic map state -> action. Ordering is lexicographic in
    ``action_of``, which is the tie-breaking order used everywhere."""

    action_of: tuple

    def __post_init__(self):
        object.__setattr__(self, "action_of", tuple(int(a) for a in self.action_of))

    @classmethod
    def constant(cls, n_states: int, action: int) -> "StationaryPolicy":
        return cls((action,) * n_states)

    def __len__(self):
        return len(self.action_of)

    def __getitem__(self, s):
        return self.action_of[s]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.action_of, dtype=np.int64)

    def label(self) -> str:
        """Compact display string using 1-based action labels."""
        return "".join(str(a + 1) for a in self.action_of)

    def check(self, mdp: FiniteMdp) -> None:
        if len(self.action_of) != mdp.n_states:
            raise ConfigurationError(
                f"policy covers {len(self.action_of)} states, MDP has {mdp.n_states}"
            )
        if any(a < 0 or a >= mdp.n_actions for a in self.action_of):
            raise ConfigurationError(f"policy uses an action outside [0, {mdp.n_actions})")


@dataclass(frozen=True, eq=False)
class InducedChain:
    transition: np.ndarray
    step_reward: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "step_reward", _frozen(self.step_reward))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True, eq=False)
class GainResult:
    gain: float
    bias: np.ndarray
    policy: StationaryPolicy


def all_policies(n_states: int, n_actions: int) -> Iterable[StationaryPolicy]:
    """Every deterministic stationary policy, in lexicographic order."""
    for actions in itertools.product(range(n_actions), repeat=n_states):
        yield StationaryPolicy(actions)


def induce_chain(mdp: FiniteMdp, policy: StationaryPolicy) -> InducedChain:
    policy.check(mdp)
    idx = np.arange(mdp.n_states)
    a = policy.as_array()
    return InducedChain(mdp.kernel[idx, a], mdp.reward[idx, a])


def closed_classes(transition: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes (recurrent classes) of a chain."""
    graph = transition > 0
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.ones(len(labels), dtype=bool)
        outside[members] = False
        if not graph[np.ix_(members, outside)].any():
            closed.append(members)
    return closed


def _recurrent_class(transition: np.ndarray) -> np.ndarray:
    classes = closed_classes(transition)
    if len(classes) != 1:
        raise PreconditionError(
            f"chain has {len(classes)} closed classes; a single recurrent class is required"
        )
    return classes[0]


def gth_solve(transition: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible row-stochastic matrix (GTH)."""
    a = np.array(transition, dtype=float, copy=True)
    n = a.shape[0]
    for i in range(n - 1):
        scale = a[i, i + 1:].sum()
        if scale <= 0:
            raise PreconditionError("chain is reducible")
        a[i + 1:, i] /= scale
        a[i + 1:, i + 1:] += np.outer(a[i + 1:, i], a[i, i + 1:])
    x = np.zeros(n)
    x[n - 1] = 1.0
    for i in range(n - 2, -1, -1):
        x[i] = x[i + 1:] @ a[i + 1:, i]
    return x / x.sum()


def _power_iteration(transition, tol=RESIDUAL_TOL, max_iter=1_000_000):
    n = transition.shape[0]
    # lazy chain: same stationary vector, no periodic oscillation
    lazy = 0.5 * (transition + np.eye(n))
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < 0.1 * tol:
            return nxt
        pi = nxt
    raise NumericalError(
        "power iteration did not converge", residual=float(np.abs(pi @ transition - pi).max())
    )


def stationary_distribution(chain: InducedChain) -> np.ndarray:
    q = chain.transition
    members = _recurrent_class(q)
    sub = q[np.ix_(members, members)]
    if len(members) <= DIRECT_SOLVE_MAX_STATES:
        sub_pi = gth_solve(sub)
    else:
        sub_pi = _power_iteration(sub)
    pi = np.zeros(chain.n_states)
    pi[members] = sub_pi
    residual = np.abs(pi @ q - pi).max()
    if residual > RESIDUAL_TOL:
        raise NumericalError(f"stationary residual {residual:.3g} exceeds tolerance", residual)
    return pi


def pair_stationary(chain: InducedChain) -> np.ndarray:
    """Joint stationary law of consecutive states, ``pi(s1) q(s1, s2)``."""
    pi = stationary_distribution(chain)
    return pi[:, None] * chain.transition


def expected_return_time(chain: InducedChain, s0: int) -> float:
    pi = stationary_distribution(chain)
    if pi[s0] <= 0:
        raise PreconditionError(f"state {s0} is transient under this chain")
    return 1.0 / pi[s0]


def policy_gain(chain: InducedChain) -> float:
    return float(stationary_distribution(chain) @ chain.step_reward)


def policy_bias(chain: InducedChain, gain: float, reference_state: int) -> np.ndarray:
    """Relative values h with h[reference_state] = 0 solving
    ``h = r - gain + Q h`` off the reference state.

    Uses censoring (state reduction): pivots are sums of exit
    probabilities, so the matrix part involves no cancellation.
    """
    q = chain.transition
    n = q.shape[0]
    order = [s for s in range(n) if s != reference_state] + [reference_state]
    a = q[np.ix_(order, order)].copy()
    b = chain.step_reward[order] - gain
    b[-1] = 0.0
    pivots = np.zeros(n)
    for k in range(n - 1):
        scale = a[k, k + 1:].sum()
        if scale <= 0:
            raise PreconditionError(
                f"reference state {reference_state} is not reachable from every state"
            )
        pivots[k] = scale
        col = a[k + 1:, k] / scale
        a[k + 1:, k] = col
        a[k + 1:, k + 1:] += np.outer(col, a[k, k + 1:])
        b[k + 1:] += col * b[k]
    h = np.zeros(n)
    for k in range(n - 2, -1, -1):
        h[k] = (b[k] + a[k, k + 1:-1] @ h[k + 1:-1]) / pivots[k]
    out = np.empty(n)
    out[order] = h
    return out


def evaluate_policy(mdp: FiniteMdp, policy: StationaryPolicy, reference_state: int | None = None):
    """(gain, bias) of a stationary policy.

    The reference state defaults to the most visited state: relative values
    measured from a rarely visited state carry a huge common offset that
    swamps the differences policy improvement needs.
    """
    chain = induce_chain(mdp, policy)
    pi = stationary_distribution(chain)
    gain = float(pi @ chain.step_reward)
    if reference_state is None:
        reference_state = int(np.argmax(pi))
    return gain, policy_bias(chain, gain, reference_state)


def _row_tol(q: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(q).max(axis=1))


def _greedy(q: np.ndarray, tol) -> np.ndarray:
    """Lowest action index among those within ``tol`` of the row maximum."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - np.reshape(tol, (-1, 1)), axis=1)


def _policy_iteration(mdp: FiniteMdp, reference_state, max_iter):
    n = mdp.n_states
    pol = np.zeros(n, dtype=np.int64)
    seen = {}
    for _ in range(max_iter):
        policy = StationaryPolicy(pol)
        gain, h = evaluate_policy(mdp, policy, reference_state)
        seen[policy] = gain
        q = mdp.reward + mdp.kernel @ h
        tol = _row_tol(q, 1e-10)
        current = q[np.arange(n), pol]
        improve = q.max(axis=1) > current + tol
        if not improve.any():
            final = _greedy(q, tol)
            if not np.array_equal(final, pol):
                alt = StationaryPolicy(final)
                alt_gain, alt_h = evaluate_policy(mdp, alt, reference_state)
                if alt_gain >= gain - 1e-12 * max(1.0, abs(gain)):
                    return GainResult(alt_gain, alt_h, alt)
            return GainResult(gain, h, policy)
        new = pol.copy()
        new[improve] = _greedy(q[improve], tol[improve])
        if StationaryPolicy(new) in seen:
            # numerical cycling on a nearly decomposable model: keep the best gain seen
            best = max(seen.items(), key=lambda kv: (kv[1], [-a for a in kv[0].action_of]))[0]
            gain, h = evaluate_policy(mdp, best, reference_state)
            return GainResult(gain, h, best)
        pol = new
    raise NumericalError(f"policy iteration did not settle within {max_iter} iterations")


def relative_value_iteration(
    mdp: FiniteMdp, reference_state: int = 0, tol: float = 1e-10, max_iter: int = 1_000_000
) -> GainResult:
    """Relative value iteration, stopping when span(v_{n+1} - v_n) < tol."""
    h = np.zeros(mdp.n_states)
    flat = mdp.kernel.reshape(-1, mdp.n_states)
    r = mdp.reward.reshape(-1)
    span = np.inf
    for _ in range(max_iter):
        v = (r + flat @ h).reshape(mdp.n_states, mdp.n_actions).max(axis=1)
        diff = v - h
        span = diff.max() - diff.min()
        h = v - v[reference_state]
        if span < tol:
            break
    else:
        raise NumericalError(
            f"relative value iteration span {span:.3g} did not fall below {tol}", residual=span
        )
    gain = 0.5 * (diff.max() + diff.min())
    q = mdp.reward + mdp.kernel @ h
    policy = StationaryPolicy(_greedy(q, _row_tol(q, 1e-9)))
    return GainResult(float(gain), h, policy)


def optimal_policy(
    mdp: FiniteMdp,
    policy_class: Sequence[StationaryPolicy] | str = "all",
    method: str = "policy_iteration",
    reference_state: int | None = None,
    max_iter: int = 10_000,
) -> GainResult:
    """Average-reward optimal policy over ``policy_class``.

    ``"all"`` searches every stationary policy with ``method``
    ("policy_iteration" or "rvi").  An explicit list is scored policy by
    policy, so restricted classes are honoured exactly; ties go to the
    lexicographically smallest policy.
    """
    if isinstance(policy_class, str):
        if policy_class != "all":
            raise ConfigurationError(f"unknown policy class {policy_class!r}")
        if method == "policy_iteration":
            return _policy_iteration(mdp, reference_state, max_iter)
        if method == "rvi":
            return relative_value_iteration(mdp, reference_state or 0)
        raise ConfigurationError(f"unknown solver method {method!r}")

    candidates = sorted(set(policy_class))
    if not candidates:
        raise ConfigurationError("policy class is empty")
    scored = [(policy_gain(induce_chain(mdp, c)), c) for c in candidates]
    top = max(g for g, _ in scored)
    tol = 1e-12 * max(1.0, abs(top))
    gain, best = next((g, c) for g, c in scored if g >= top - tol)
    _, bias = evaluate_policy(mdp, best, reference_state)
    return GainResult(gain, bias, best)


def t_step_value(mdp: FiniteMdp, policy: StationaryPolicy, t: int, s: int | None = None):
    """E[sum_{i=0}^t R_i | S_0 = s] with R_i = r(S_i, policy(S_i)).

    Returns the whole vector over start states when ``s`` is None.
    """
    if t < 0:
        raise ConfigurationError("t must be nonnegative")
    chain = induce_chain(mdp, policy)
    value = chain.step_reward.copy()
    for _ in range(t):
        value = chain.step_reward + chain.transition @ value
    return value if s is None else float(value[s])
