"""Empirical check of uniform-in-k concentration for renewal cycles.

A path is a sequence of excursions s0 -> s0 of one fixed policy.  After k
cycles the harness compares the elapsed time, every pair count, every
state count, and optionally the reward increment against their renewal
means, with envelope ``sqrt(k d1 log(n_policies |S|^2 d2 log k / delta))``
for ``k >= 2``.  A path violates the bound when any quantity leaves its
envelope at any k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, PreconditionError, SimulationError
from .mdp_core import (
    FiniteMdp,
    StationaryPolicy,
    closed_classes,
    induce_chain,
    stationary_distribution,
)

D2_DEFAULT = math.e
DEFAULT_CYCLE_CAP = 1_000_000


@dataclass
class CycleSample:
    policy: StationaryPolicy
    cycle_lengths: np.ndarray  # (n,)
    pair_counts_per_cycle: np.ndarray  # (n, S, S)
    state_counts_per_cycle: np.ndarray  # (n, S)
    cycle_rewards: np.ndarray  # (n,)

    def __len__(self):
        return len(self.cycle_lengths)


@dataclass(frozen=True)
class BoundSpec:
    d1: float
    d2: float = D2_DEFAULT
    delta: float = 0.05

    def __post_init__(self):
        if self.d1 < 0 or not self.d2 > 0:
            raise ConfigurationError("need d1 >= 0 and d2 > 0")
        if not 0 < self.delta <= 1:
            raise ConfigurationError("delta must lie in (0, 1]")

    def envelope(self, k, n_policies: int, n_states: int):
        """sqrt(k d1 log(n_policies |S|^2 d2 log k / delta)), k >= 2."""
        k = np.asarray(k, dtype=float)
        return np.sqrt(k * self.d1 * _log_term(k, n_policies, n_states, self.d2, self.delta))


def _log_term(k, n_policies, n_states, d2, delta):
    return np.log(n_policies * n_states**2 * d2 * np.log(k) / delta)


@dataclass
class ChainStats:
    tau_bar: float
    pair_mean: np.ndarray  # tau_bar * pi(s1, s2)
    state_mean: np.ndarray  # tau_bar * pi(s)
    gain: float
    n_states: int


def chain_stats(mdp: FiniteMdp, policy: StationaryPolicy, s0: int) -> ChainStats:
    chain = induce_chain(mdp, policy)
    if not any(s0 in cls for cls in closed_classes(chain.transition)):
        raise PreconditionError(f"state {s0} is transient under policy {policy.label()}")
    pi = stationary_distribution(chain)
    tau = 1.0 / pi[s0]
    pair = pi[:, None] * chain.transition
    return ChainStats(tau, tau * pair, tau * pi, float(pi @ chain.step_reward), mdp.n_states)


def hitting_times(mdp: FiniteMdp, policy: StationaryPolicy, s0: int) -> np.ndarray:
    """Expected steps to reach ``s0`` from each state of its closed class
    (0 at ``s0``; NaN outside the class)."""
    q = induce_chain(mdp, policy).transition
    cls = next(c for c in closed_classes(q) if s0 in c)
    others = [s for s in cls if s != s0]
    out = np.full(mdp.n_states, np.nan)
    out[s0] = 0.0
    if others:
        sub = q[np.ix_(others, others)]
        h = np.linalg.solve(np.eye(len(others)) - sub, np.ones(len(others)))
        out[others] = h
    return out


def _path_rng(seed: int, n_paths: int, offset: int = 0):
    seqs = np.random.SeedSequence(int(seed)).spawn(offset + n_paths)[offset:]
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def simulate_cycles(
    mdp: FiniteMdp,
    policy: StationaryPolicy,
    s0: int,
    n_cycles: int,
    seed: int = 0,
    cycle_cap: int = DEFAULT_CYCLE_CAP,
) -> CycleSample:
    chain_stats(mdp, policy, s0)  # recurrence check
    chain = induce_chain(mdp, policy)
    cdf = _kernels.row_cdf(chain.transition)
    S = mdp.n_states
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    tau = 1.0 / stationary_distribution(chain)[s0]
    u = rng.random(int(n_cycles * tau * 1.5) + 1024)
    while True:
        lengths = np.zeros(n_cycles, dtype=np.int64)
        rewards = np.zeros(n_cycles)
        pairs = np.zeros((n_cycles, S, S), dtype=np.int64)
        states = np.zeros((n_cycles, S), dtype=np.int64)
        used = _kernels.renewal_cycles(
            cdf, chain.step_reward, s0, n_cycles, u, rewards, pairs, states, lengths, cycle_cap
        )
        if used == -2:
            raise SimulationError(f"a cycle exceeded {cycle_cap} steps; s0 may be transient")
        if used >= 0:
            return CycleSample(policy, lengths, pairs, states, rewards)
        u = np.concatenate([u, rng.random(u.size)])


@dataclass
class ViolationReport:
    worst_ratio: float  # max over k, quantities of |dev| / envelope
    violated: bool
    worst_quantity: str
    per_k_max_deviation: np.ndarray  # max over quantities of |dev_k| / sqrt(k), k = 1..n


def quantity_names(n_states: int, with_reward: bool = True) -> list:
    names = ["cycle_time"]
    names += [f"pair_{a}_{b}" for a in range(n_states) for b in range(n_states)]
    names += [f"state_{a}" for a in range(n_states)]
    if with_reward:
        names.append("reward_increment")
    return names


def _deviation_paths(sample: CycleSample, stats: ChainStats, mu_star: float | None):
    """Cumulative deviations, shape (n, quantities)."""
    n = len(sample)
    k = np.arange(1, n + 1, dtype=float)[:, None]
    S = stats.n_states
    cols = [np.cumsum(sample.cycle_lengths)[:, None] - k * stats.tau_bar]
    cols.append(np.cumsum(sample.pair_counts_per_cycle.reshape(n, S * S), axis=0) - k * stats.pair_mean.ravel())
    cols.append(np.cumsum(sample.state_counts_per_cycle, axis=0) - k * stats.state_mean)
    if mu_star is not None:
        inc = mu_star * sample.cycle_lengths - sample.cycle_rewards
        cols.append(np.cumsum(inc)[:, None] - k * stats.tau_bar * (mu_star - stats.gain))
    return np.hstack(cols)


def check_uniform_bound(
    sample: CycleSample,
    stats: ChainStats,
    spec: BoundSpec,
    n_policies: int = 1,
    mu_star: float | None = None,
) -> ViolationReport:
    """Compare every cumulative deviation of one path with the envelope.

    ``mu_star`` switches on the reward-increment quantity."""
    dev = np.abs(_deviation_paths(sample, stats, mu_star))
    n = dev.shape[0]
    k = np.arange(1, n + 1, dtype=float)
    per_k = dev.max(axis=1) / np.sqrt(k)
    names = quantity_names(stats.n_states, mu_star is not None)
    if n < 2:
        return ViolationReport(0.0, False, names[0], per_k)
    env = spec.envelope(k[1:], n_policies, stats.n_states)[:, None]
    d = dev[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d == 0, 0.0, np.where(env > 0, d / env, np.inf))
    flat = int(np.argmax(ratio))
    worst = float(ratio.flat[flat])
    return ViolationReport(worst, worst > 1.0, names[flat % ratio.shape[1]], per_k)


@dataclass
class PathStatistics:
    """Per path and quantity, the smallest d1 that keeps that quantity inside
    its envelope for all k >= 2."""

    required_d1: np.ndarray  # (paths, quantities)
    names: list
    record_at: np.ndarray
    recorded: np.ndarray  # (paths, len(record_at), quantities): |dev|/sqrt(k)

    def pooled(self, with_reward: bool = False) -> np.ndarray:
        cols = self.required_d1 if with_reward else self.required_d1[:, :-1]
        return cols.max(axis=1)


def path_statistics(
    mdp: FiniteMdp,
    policy: StationaryPolicy,
    s0: int,
    delta: float,
    n_paths: int,
    n_cycles: int,
    seed: int = 0,
    n_policies: int = 1,
    d2: float = D2_DEFAULT,
    mu_star: float | None = None,
    record_at=None,
    path_offset: int = 0,
) -> PathStatistics:
    """Stream ``n_paths`` independent paths through the compiled checker.

    Path ``i`` uses child ``path_offset + i`` of the seed's SeedSequence, so
    calibration and holdout sets drawn with different offsets are disjoint.
    """
    stats = chain_stats(mdp, policy, s0)
    chain = induce_chain(mdp, policy)
    cdf = _kernels.row_cdf(chain.transition)
    S = mdp.n_states
    if record_at is None:
        record_at = np.unique(np.logspace(0, math.log10(n_cycles), 25).astype(np.int64))
    record_at = np.asarray(record_at, dtype=np.int64)
    mu = stats.gain if mu_star is None else float(mu_star)
    inc_mean = stats.tau_bar * (mu - stats.gain)
    log_scale = n_policies * S * S * d2
    nq = 1 + S * S + S + 1
    out = np.zeros((n_paths, nq))
    recorded = np.zeros((n_paths, len(record_at), nq))
    budget = int(n_cycles * stats.tau_bar * 1.2) + 1024
    for i, rng in enumerate(_path_rng(seed, n_paths, path_offset)):
        u = rng.random(budget)
        rec = np.zeros((len(record_at), nq))
        while True:
            st, used = _kernels.path_deviation_stats(
                cdf, chain.step_reward, mu, s0, n_cycles, u, stats.tau_bar,
                stats.pair_mean.ravel(), stats.state_mean, inc_mean, log_scale, delta,
                record_at, rec,
            )
            if used >= 0:
                break
            u = np.concatenate([u, rng.random(budget // 4 + 1024)])
        out[i] = st
        recorded[i] = rec
    return PathStatistics(out, quantity_names(S), record_at, recorded)


def _quantile_fit(values: np.ndarray, delta: float) -> float:
    """Smallest d1 with at most a delta fraction of values above it."""
    v = np.sort(values)
    n = len(v)
    allowed = int(math.floor(delta * n))
    return float(v[n - 1 - allowed]) if allowed < n else 0.0


@dataclass
class FitResult:
    spec: BoundSpec
    per_quantity: dict  # quantity name -> fitted d1 for that quantity alone
    calibration_violation: float
    holdout_violation: float | None
    n_calibration: int
    n_holdout: int
    with_reward: bool = False
    holdout_statistics: PathStatistics | None = field(default=None, repr=False)


def fit_constants(
    mdp: FiniteMdp,
    policy: StationaryPolicy,
    s0: int,
    delta: float,
    n_paths: int,
    n_cycles: int,
    seed: int = 0,
    holdout_paths: int = 0,
    n_policies: int = 1,
    d2: float = D2_DEFAULT,
    with_reward: bool = False,
    mu_star: float | None = None,
) -> FitResult:
    """Calibrate d1 (d2 fixed) on ``n_paths`` paths, then validate on
    ``holdout_paths`` fresh ones."""
    if n_paths < 100 / delta:
        raise ConfigurationError(
            f"calibration needs at least {math.ceil(100 / delta)} paths at delta={delta}"
        )
    cal = path_statistics(mdp, policy, s0, delta, n_paths, n_cycles, seed, n_policies, d2, mu_star)
    pooled = cal.pooled(with_reward)
    d1 = _quantile_fit(pooled, delta)
    per_q = {name: _quantile_fit(cal.required_d1[:, j], delta) for j, name in enumerate(cal.names)}
    if not with_reward:
        per_q.pop("reward_increment")
    spec = BoundSpec(d1, d2, delta)
    hold = None
    hold_frac = None
    if holdout_paths:
        hold = path_statistics(
            mdp, policy, s0, delta, holdout_paths, n_cycles, seed, n_policies, d2, mu_star,
            path_offset=n_paths,
        )
        hold_frac = float(np.mean(hold.pooled(with_reward) > d1))
    return FitResult(
        spec, per_q, float(np.mean(pooled > d1)), hold_frac, n_paths, holdout_paths, with_reward, hold
    )
