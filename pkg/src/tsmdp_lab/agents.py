"""Thompson sampling over a parameter grid and a UCRL2 baseline.

Both agents act on a simulated ``true_mdp``.  Step ``i`` (1-based) takes
the state ``S_{i-1}``, plays ``A_i`` and earns ``r(S_{i-1}, A_i)``; the
walk starts in ``s0`` at ``t = 0``.
"""
from __future__ import annotations

import csv
import math
import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError, NumericalError, PreconditionError, SimulationError
from .families import ParamGrid
from .mdp_core import FiniteMdp, StationaryPolicy, closed_classes, induce_chain, optimal_policy
from .posterior import init as init_posterior
from .posterior import log_kernels

DEFAULT_CYCLE_CAP = 1_000_000
_CHUNK = 1 << 16


def default_checkpoints(horizon: int) -> list[int]:
    """10, 100, ... up to the horizon, with the horizon itself last."""
    pts = []
    t = 10
    while t < horizon:
        pts.append(t)
        t *= 10
    pts.append(int(horizon))
    return pts


def _checked_checkpoints(checkpoints, horizon):
    cps = default_checkpoints(horizon) if checkpoints is None else [int(c) for c in checkpoints]
    if not cps or any(c < 1 or c > horizon for c in cps) or sorted(set(cps)) != cps:
        raise ConfigurationError("checkpoints must be strictly increasing integers in [1, T]")
    return cps


def _streams(seed: int):
    env, agent = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.PCG64(env)), np.random.Generator(np.random.PCG64(agent))


@dataclass
class EpochLedger:
    policies: list = field(default_factory=list)  # realized policies, index = policy id
    epoch_policy_of: list = field(default_factory=list)  # policy id of epoch k (1-based k -> [k-1])
    steps_per_policy: np.ndarray | None = None  # V_c
    epochs_per_policy: np.ndarray | None = None  # N_c
    pair_counts: np.ndarray | None = None  # J, shape (n_policies, S, S)
    epoch_starts: list = field(default_factory=list)  # t_{k-1} for epoch k

    @property
    def epoch_index(self) -> int:
        return len(self.epoch_policy_of)

    def check(self, t: int) -> None:
        if self.steps_per_policy.sum() != t:
            raise AssertionError("per-policy step counts do not sum to t")
        if self.epochs_per_policy.sum() != self.epoch_index:
            raise AssertionError("per-policy epoch counts do not sum to k")
        if not np.array_equal(self.pair_counts.sum(axis=(1, 2)), self.steps_per_policy):
            raise AssertionError("pair counts disagree with step counts")


@dataclass
class SimulationResult:
    horizon: int
    seed: int
    mu_star: float
    # rows of (t, cumulative_reward, pseudo_regret, suboptimal_steps)
    checkpoints: list
    epoch_trace: list | None = None  # (t_k at epoch start, grid index, policy id)
    ledger: EpochLedger | None = None
    agent: str = ""
    boundary_log_weights: list | None = None  # (t_k, log-weights, pair counts J) when recorded

    @property
    def times(self) -> np.ndarray:
        return np.array([row[0] for row in self.checkpoints], dtype=np.int64)

    def column(self, name: str) -> np.ndarray:
        k = {"cumulative_reward": 1, "pseudo_regret": 2, "suboptimal_steps": 3}[name]
        return np.array([row[k] for row in self.checkpoints])


class _Recorder:
    """Collects the regret series at the requested checkpoints."""

    def __init__(self, checkpoints, mu_star):
        self.targets = list(checkpoints)
        self.mu_star = mu_star
        self.rows = []
        self.reward = 0.0
        self.sub = 0

    def next_stop(self, default):
        return min(self.targets[len(self.rows)], default) if len(self.rows) < len(self.targets) else default

    def add(self, t, reward, sub):
        self.reward += reward
        self.sub += sub
        if len(self.rows) < len(self.targets) and t == self.targets[len(self.rows)]:
            self.rows.append((t, self.reward, t * self.mu_star - self.reward, self.sub))


_POLICY_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def grid_policies(grid: ParamGrid, policy_class="all", method="policy_iteration"):
    """c_OPT for every grid point, solved once per grid object."""
    key = (repr(policy_class) if not isinstance(policy_class, str) else policy_class, method)
    per_grid = _POLICY_CACHE.setdefault(grid, {})
    if key not in per_grid:
        per_grid[key] = tuple(optimal_policy(m, policy_class, method).policy for m in grid.mdps)
    return per_grid[key]


def recurrence_check(true_mdp: FiniteMdp, policies: Sequence[StationaryPolicy], s0: int, labels=None):
    """Raise unless ``s0`` is recurrent in ``true_mdp`` under every policy."""
    seen = {}
    for i, c in enumerate(policies):
        if c in seen:
            continue
        q = induce_chain(true_mdp, c).transition
        ok = any(s0 in cls for cls in closed_classes(q))
        seen[c] = ok
        if not ok:
            name = labels[i] if labels is not None else str(i)
            raise ConfigurationError(
                f"start state {s0} is transient under the optimal policy of grid point {name}"
            )


def run_tsmdp(
    true_mdp: FiniteMdp,
    grid: ParamGrid,
    prior="uniform",
    s0: int = 0,
    T: int = 1000,
    policy_class="all",
    seed: int = 0,
    checkpoints=None,
    cycle_cap: int = DEFAULT_CYCLE_CAP,
    record_trace: bool = True,
    record_boundaries: Sequence[int] | bool = False,
    policies: Sequence[StationaryPolicy] | None = None,
    mu_star: float | None = None,
    cstar: StationaryPolicy | None = None,
) -> SimulationResult:
    """Epoch-wise posterior sampling with epochs delimited by returns to ``s0``.

    ``record_boundaries=True`` stores the log-weights and pair counts at
    every epoch start (a list of epoch indices stores only those).
    """
    if grid.n_states != true_mdp.n_states or grid.n_actions != true_mdp.n_actions:
        raise ConfigurationError("grid and true MDP differ in state or action count")
    if not 0 <= s0 < true_mdp.n_states:
        raise ConfigurationError(f"s0={s0} is not a state")
    T = int(T)
    if T < 1:
        raise ConfigurationError("horizon must be positive")
    cps = _checked_checkpoints(checkpoints, T)
    if policies is None:
        policies = grid_policies(grid, policy_class)
    recurrence_check(true_mdp, policies, s0, grid.labels)
    if cstar is None or mu_star is None:
        best = optimal_policy(true_mdp)
        cstar = best.policy if cstar is None else cstar
        mu_star = best.gain if mu_star is None else mu_star

    distinct = sorted(set(policies))
    pid_of_point = np.array([distinct.index(c) for c in policies], dtype=np.int64)
    acts = np.array([c.as_array() for c in distinct], dtype=np.int64)
    S = true_mdp.n_states

    posterior = init_posterior(grid, prior)
    logw = posterior.log_weights.copy()
    comp = np.zeros_like(logw)
    table = log_kernels(grid)
    cdf = _kernels.row_cdf(true_mdp.kernel)
    reward = np.ascontiguousarray(true_mdp.reward)
    cstar_arr = cstar.as_array().astype(np.int64)

    ledger = EpochLedger(
        policies=distinct,
        steps_per_policy=np.zeros(len(distinct), dtype=np.int64),
        epochs_per_policy=np.zeros(len(distinct), dtype=np.int64),
        pair_counts=np.zeros((len(distinct), S, S), dtype=np.int64),
    )
    env_rng, agent_rng = _streams(seed)
    rec = _Recorder(cps, mu_star)
    trace = [] if record_trace else None
    boundaries = [] if record_boundaries is not False else None
    wanted = None if record_boundaries is True or record_boundaries is False else set(record_boundaries)

    u = env_rng.random(_CHUNK)
    pos = 0
    s, t = s0, 0
    while t < T:
        k = ledger.epoch_index + 1
        if boundaries is not None and (wanted is None or k in wanted):
            boundaries.append((t, logw.copy(), ledger.pair_counts.copy()))
        finite = np.isfinite(logw)
        if not finite.any():
            raise SimulationError("posterior lost all mass")
        m = logw[finite].max()
        p = np.where(finite, np.exp(logw - m), 0.0)
        cdf_post = np.cumsum(p)
        g = int(np.searchsorted(cdf_post, agent_rng.random() * cdf_post[-1], side="right"))
        g = min(g, int(np.flatnonzero(p > 0)[-1]))
        pid = int(pid_of_point[g])
        ledger.epoch_policy_of.append(pid)
        ledger.epoch_starts.append(t)
        ledger.epochs_per_policy[pid] += 1
        if trace is not None:
            trace.append((t, g, pid))
        policy = acts[pid]
        pairs = ledger.pair_counts[pid]
        cap_left = int(cycle_cap)
        t_epoch = t
        while True:
            stop = rec.next_stop(T)
            s, t, rsum, sub, pos, returned, cap_left = _kernels.tsmdp_walk(
                cdf, reward, policy, cstar_arr, table, logw, comp, pairs, s, s0, t, stop, u, pos, cap_left
            )
            rec.add(t, rsum, sub)
            if returned or t >= T:
                break
            if cap_left <= 0:
                raise SimulationError(
                    f"epoch starting at t={t_epoch} ran {cycle_cap} steps without returning to "
                    f"s0={s0}; the start state may be transient under policy {distinct[pid].label()}"
                )
            if pos >= u.shape[0]:
                u = env_rng.random(_CHUNK)
                pos = 0
        ledger.steps_per_policy[pid] += t - t_epoch

    return SimulationResult(T, int(seed), float(mu_star), rec.rows, trace, ledger, "tsmdp", boundaries)


@dataclass(frozen=True)
class Ucrl2Config:
    delta: float | str = 0.1
    max_evi_iter: int = 1_000_000

    def __post_init__(self):
        if isinstance(self.delta, str):
            if self.delta != "one_over_T":
                raise ConfigurationError(f"unknown delta {self.delta!r}")
        elif not 0 < self.delta <= 1:
            raise ConfigurationError("delta must lie in (0, 1]")

    def resolve(self, horizon: int) -> float:
        return 1.0 / horizon if self.delta == "one_over_T" else float(self.delta)

    @property
    def label(self) -> str:
        return "ucrl2_1overT" if self.delta == "one_over_T" else f"ucrl2_{self.delta:g}"


def confidence_radius(n_states, n_actions, t_k, delta, counts):
    """L1 radius sqrt(14 S log(2 A t_k / delta) / max(1, N))."""
    return np.sqrt(14.0 * n_states * math.log(2.0 * n_actions * t_k / delta) / np.maximum(1, counts))


def run_ucrl2(
    true_mdp: FiniteMdp,
    config: Ucrl2Config = Ucrl2Config(),
    T: int = 1000,
    seed: int = 0,
    checkpoints=None,
    s0: int = 0,
    mu_star: float | None = None,
    cstar: StationaryPolicy | None = None,
) -> SimulationResult:
    """UCRL2 with known rewards: only the transition rows carry confidence sets."""
    T = int(T)
    if T < 1:
        raise ConfigurationError("horizon must be positive")
    cps = _checked_checkpoints(checkpoints, T)
    delta = config.resolve(T)
    if cstar is None or mu_star is None:
        best = optimal_policy(true_mdp)
        cstar = best.policy if cstar is None else cstar
        mu_star = best.gain if mu_star is None else mu_star

    S, A = true_mdp.n_states, true_mdp.n_actions
    r = true_mdp.reward
    span = r.max() - r.min()
    r_unit = np.ascontiguousarray((r - r.min()) / span if span > 0 else np.zeros_like(r))
    cdf = _kernels.row_cdf(true_mdp.kernel)
    reward = np.ascontiguousarray(r)
    cstar_arr = cstar.as_array().astype(np.int64)

    n_sa = np.zeros((S, A), dtype=np.int64)
    p_counts = np.zeros((S, A, S), dtype=np.int64)
    env_rng, _ = _streams(seed)
    rec = _Recorder(cps, mu_star)
    trace = []
    u = env_rng.random(_CHUNK)
    pos = 0
    s, t = int(s0), 0
    while t < T:
        t_k = t + 1
        p_hat = p_counts / np.maximum(1, n_sa)[:, :, None]
        p_hat[n_sa == 0] = 1.0 / S
        radius = confidence_radius(S, A, t_k, delta, n_sa)
        policy, _, iters, ok = _kernels.extended_value_iteration(
            np.ascontiguousarray(p_hat), radius, r_unit, 1.0 / math.sqrt(t_k), config.max_evi_iter
        )
        if not ok:
            raise NumericalError(f"extended value iteration did not converge in {iters} sweeps at t={t}")
        trace.append((t, -1, -1))
        nu = np.zeros((S, A), dtype=np.int64)
        while True:
            stop = rec.next_stop(T)
            s, t, rsum, sub, pos, over = _kernels.ucrl2_walk(
                cdf, reward, policy, cstar_arr, n_sa, nu, p_counts, s, t, stop, u, pos
            )
            rec.add(t, rsum, sub)
            if over or t >= T:
                break
            if pos >= u.shape[0]:
                u = env_rng.random(_CHUNK)
                pos = 0
        n_sa += nu
    return SimulationResult(T, int(seed), float(mu_star), rec.rows, trace, None, config.label)


@dataclass
class AggregateTable:
    t: np.ndarray
    mean_regret: np.ndarray
    percentiles: dict  # q -> regret percentile per checkpoint
    mean_suboptimal: np.ndarray
    suboptimal_percentiles: dict
    n_runs: int


def aggregate_runs(results: Sequence[SimulationResult], percentiles=(20, 80)) -> AggregateTable:
    if not results:
        raise ConfigurationError("no runs to aggregate")
    t = results[0].times
    for r in results[1:]:
        if not np.array_equal(r.times, t):
            raise ConfigurationError("runs were recorded at different checkpoints")
    regret = np.stack([r.column("pseudo_regret") for r in results])
    sub = np.stack([r.column("suboptimal_steps") for r in results]).astype(float)
    return AggregateTable(
        t=t,
        mean_regret=regret.mean(axis=0),
        percentiles={q: np.percentile(regret, q, axis=0) for q in percentiles},
        mean_suboptimal=sub.mean(axis=0),
        suboptimal_percentiles={q: np.percentile(sub, q, axis=0) for q in percentiles},
        n_runs=len(results),
    )


def write_runs_csv(results: Sequence[SimulationResult], path, run_ids=None) -> None:
    run_ids = range(len(results)) if run_ids is None else run_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "t", "cumulative_reward", "pseudo_regret", "suboptimal_steps"])
        for rid, res in zip(run_ids, results):
            for t, cum, reg, sub in res.checkpoints:
                w.writerow([rid, t, repr(float(cum)), repr(float(reg)), int(sub)])


def write_aggregate_csv(table: AggregateTable, path) -> None:
    qs = sorted(table.percentiles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_regret"] + [f"p{q:g}" for q in qs])
        for i, t in enumerate(table.t):
            w.writerow([int(t), repr(float(table.mean_regret[i]))] + [repr(float(table.percentiles[q][i])) for q in qs])
