"""KL geometry of a parameter grid and the log-T regret constant.

Policies are indexed by their position in ``profile.policies`` (the
distinct optimal policies realised on the grid, sorted).  Every vector of
play counts is indexed the same way.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import (
    CapacityError,
    ConfigurationError,
    InfiniteConstantError,
    NumericalError,
    PreconditionError,
    ValidationError,
)
from .families import ParamGrid
from .mdp_core import (
    FiniteMdp,
    StationaryPolicy,
    expected_return_time,
    induce_chain,
    optimal_policy,
    stationary_distribution,
)

INF_CAP = 1e12
ENUMERATION_CAP = 7


@dataclass(frozen=True)
class AnalysisConfig:
    epsilon: float = 0.1
    epsilon_prime: float = 0.0
    a4: float = 0.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if not self.epsilon_prime >= 0:
            raise ConfigurationError("epsilon_prime must be nonnegative")
        if not self.a4 >= 0:
            raise ConfigurationError("a4 must be nonnegative")

    @property
    def target(self) -> float:
        return (1 + self.a4) * (1 + self.epsilon) / (1 - self.epsilon)


def _row_kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    if (q[mask] <= 0).any():
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def marginal_kl(true_mdp: FiniteMdp, other_mdp: FiniteMdp, policy: StationaryPolicy) -> float:
    """Row KLs under ``policy`` averaged with the true chain's stationary law.

    Returns ``math.inf`` when some visited row of the true MDP puts mass
    where the other MDP has none.
    """
    if true_mdp.kernel.shape != other_mdp.kernel.shape:
        raise ConfigurationError("MDPs differ in shape")
    pi = stationary_distribution(induce_chain(true_mdp, policy))
    total = 0.0
    for s in np.flatnonzero(pi > 0):
        a = policy[s]
        kl = _row_kl(true_mdp.kernel[s, a], other_mdp.kernel[s, a])
        if math.isinf(kl):
            return math.inf
        total += pi[s] * kl
    return max(total, 0.0)


@dataclass
class KlProfile:
    d: np.ndarray  # (G, n_policies)
    policies: tuple
    true_index: int | None
    labels: tuple = ()

    @property
    def infinite(self) -> list:
        """(grid index, policy index) pairs without absolute continuity."""
        return [tuple(map(int, ij)) for ij in np.argwhere(np.isinf(self.d))]

    def scaled(self, factor: float) -> "KlProfile":
        return KlProfile(self.d * factor, self.policies, self.true_index, self.labels)


@dataclass
class DecisionRegions:
    region_of: np.ndarray  # grid index -> policy index
    optimal: int  # policy index of c*
    s_prime: dict  # policy index -> sorted grid indices
    s_double_prime: dict
    epsilon_prime: float

    @property
    def policy_count(self) -> int:
        return len(self.s_prime)

    def members(self, c: int) -> list:
        return sorted(self.s_prime[c] + self.s_double_prime[c])


def split_regions(region_of, optimal: int, d_opt: np.ndarray, epsilon_prime: float, n_policies: int):
    s1 = {c: [] for c in range(n_policies)}
    s2 = {c: [] for c in range(n_policies)}
    for g, c in enumerate(region_of):
        (s1 if d_opt[g] <= epsilon_prime else s2)[int(c)].append(g)
    return DecisionRegions(np.asarray(region_of, dtype=np.int64), int(optimal), s1, s2, epsilon_prime)


def decision_regions(
    grid: ParamGrid,
    true_index: int | None,
    config: AnalysisConfig = AnalysisConfig(),
    policy_class="all",
    policies: Sequence[StationaryPolicy] | None = None,
    true_mdp: FiniteMdp | None = None,
):
    """Optimal policy per grid point, the KL profile against the truth, and
    the split of each region at ``epsilon_prime``.  Returns
    ``(regions, profile)``.

    The truth is grid point ``true_index``, or ``true_mdp`` when it lies off
    the grid; then c* joins the policy set even if no grid point realises it.
    """
    if true_index is None:
        if true_mdp is None:
            raise ConfigurationError("need a true grid index or a true MDP")
        c_star = optimal_policy(true_mdp, policy_class).policy
    else:
        if not 0 <= true_index < len(grid):
            raise ConfigurationError(f"true index {true_index} is outside the grid")
        true_mdp = grid.mdps[true_index]
        c_star = None
    if policies is None:
        policies = [optimal_policy(m, policy_class).policy for m in grid.mdps]
    if c_star is None:
        c_star = policies[true_index]
    distinct = tuple(sorted(set(policies) | {c_star}))
    region_of = np.array([distinct.index(c) for c in policies], dtype=np.int64)
    d = np.array([[marginal_kl(true_mdp, m, c) for c in distinct] for m in grid.mdps])
    profile = KlProfile(d, distinct, true_index, tuple(grid.labels))
    optimal = distinct.index(c_star)
    regions = split_regions(region_of, optimal, d[:, optimal], config.epsilon_prime, len(distinct))
    return regions, profile


def _suboptimal_points(regions: DecisionRegions):
    return [(c, g) for c, pts in regions.s_prime.items() if c != regions.optimal for g in pts]


def epsilon_min(regions: DecisionRegions, profile: KlProfile) -> float:
    """min of D_c over suboptimal c and theta in S_c'.

    Raises PreconditionError when no such point exists; a zero value means
    the regret-constant problem is unbounded.
    """
    pts = _suboptimal_points(regions)
    if not pts:
        raise PreconditionError("no suboptimal grid point lies in any S_c'")
    return float(min(profile.d[g, c] for c, g in pts))


@dataclass
class RegretConstant:
    value: float
    ordering: tuple  # policy indices, elimination order
    vectors: np.ndarray  # (stages, n_policies)
    witnesses: tuple  # binding grid index per stage
    staged_sum: float  # sum over stages of x_l(sigma(l))
    weighted_value: float | None = None  # return-time weighted objective
    weighted_ordering: tuple | None = None
    weighted_vectors: np.ndarray | None = None
    pegged: tuple = ()  # suboptimal policies with empty S_c' (held at zero)
    lp_count: int = 0


def _pareto_minimal(vectors: np.ndarray, idx: list) -> list:
    """Drop points whose D vector dominates another's: their constraint is
    implied and they can only bind when the dominated point binds too."""
    keep = []
    for i in idx:
        vi = vectors[i]
        dominated = False
        for j in idx:
            if j == i:
                continue
            vj = vectors[j]
            if (vi >= vj).all() and ((vi > vj).any() or j < i):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def _solve_stage_lp(D, ordering, witnesses, s_prime, K, weights):
    """One linear program for a fixed ordering and binding witnesses.

    Variables are the stacked vectors x_1..x_n over the active coordinates.
    """
    n = len(ordering)
    m = D.shape[1]
    nv = n * m

    def var(l, j):
        return l * m + j

    a_ub, b_ub, a_eq, b_eq = [], [], [], []
    for l in range(n):
        c = ordering[l]
        for g in s_prime[c]:
            row = np.zeros(nv)
            row[l * m:(l + 1) * m] = D[g]
            if g == witnesses[l]:
                a_eq.append(row)
                b_eq.append(K)
            else:
                a_ub.append(-row)
                b_ub.append(-K)
        if l + 1 < n:
            for j in range(m):
                row = np.zeros(nv)
                row[var(l, j)] = 1.0
                row[var(l + 1, j)] = -1.0
                a_ub.append(row)
                b_ub.append(0.0)
        for i in range(l + 1, n):
            row = np.zeros(nv)
            row[var(i, c)] = 1.0
            row[var(l, c)] = -1.0
            a_eq.append(row)
            b_eq.append(0.0)
    obj = np.zeros(nv)
    obj[(n - 1) * m:] = -np.asarray(weights, dtype=float)
    res = linprog(
        obj,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(a_eq),
        b_eq=np.array(b_eq),
        bounds=(0, None),
        method="highs",
    )
    if res.status == 3:
        return math.inf, None
    if res.status != 0:
        return None, None
    return -res.fun, res.x.reshape(n, m)


def _best_over_enumeration(D, active, s_prime_local, K, weights):
    best = (-math.inf, None, None, None)
    count = 0
    pruned = {c: _pareto_minimal(D, s_prime_local[c]) for c in active}
    for ordering in itertools.permutations(active):
        for witnesses in itertools.product(*(pruned[c] for c in ordering)):
            value, x = _solve_stage_lp(D, ordering, witnesses, s_prime_local, K, weights)
            count += 1
            if value is None:
                continue
            if math.isinf(value):
                raise InfiniteConstantError(
                    f"regret constant is unbounded for elimination order {ordering}"
                )
            if best[1] is None or value > best[0] + 1e-12 * max(1.0, abs(best[0])):
                best = (value, ordering, witnesses, x)
    return best, count


def regret_constant(
    regions: DecisionRegions,
    profile: KlProfile,
    config: AnalysisConfig = AnalysisConfig(),
    return_times: Sequence[float] | None = None,
    cap: int = ENUMERATION_CAP,
) -> RegretConstant:
    """Largest final play-count mass over elimination orders.

    For each order of the suboptimal policies and each choice of binding
    witness per stage a linear program is solved; the answer is the best
    over all of them.  Suboptimal policies whose S_c' is empty are never
    eliminated by the argument and are held at zero, like c*.  Infinite KL
    entries are capped at ``INF_CAP``.  With ``return_times`` the same
    search is repeated with coordinates weighted by the expected return
    time of each policy.
    """
    if not _suboptimal_points(regions):
        # nothing to eliminate: every suboptimal region is separated from the
        # truth by c* itself, so no stage contributes a log-T term
        z = np.zeros((0, regions.policy_count))
        return RegretConstant(0.0, (), z, (), 0.0, 0.0 if return_times is not None else None,
                              () if return_times is not None else None,
                              z if return_times is not None else None,
                              tuple(c for c in range(regions.policy_count) if c != regions.optimal))
    eps_min = epsilon_min(regions, profile)
    if eps_min <= 0:
        raise InfiniteConstantError(
            "a suboptimal point is indistinguishable from the truth under its own policy"
        )
    K = config.target
    opt = regions.optimal
    active = [c for c in range(regions.policy_count) if c != opt and regions.s_prime[c]]
    pegged = tuple(c for c in range(regions.policy_count) if c != opt and not regions.s_prime[c])
    if len(active) > cap:
        raise CapacityError(
            f"{len(active)} suboptimal policies exceed the enumeration cap of {cap}; "
            "use theorem4_bound instead"
        )
    # local coordinates: active policies only; the caller sees full vectors
    D = np.minimum(profile.d[:, active], INF_CAP)
    local = {k: regions.s_prime[c] for k, c in enumerate(active)}
    order_local = list(range(len(active)))

    (value, ordering, witnesses, x), count = _best_over_enumeration(
        D, order_local, local, K, np.ones(len(active))
    )
    if ordering is None:
        raise NumericalError("no elimination order admits a feasible solution")
    full = np.zeros((len(active), regions.policy_count))
    full[:, active] = x
    result = RegretConstant(
        value=float(value),
        ordering=tuple(active[k] for k in ordering),
        vectors=full,
        witnesses=tuple(int(g) for g in witnesses),
        staged_sum=float(sum(full[l, active[k]] for l, k in enumerate(ordering))),
        pegged=pegged,
        lp_count=count,
    )
    if return_times is not None:
        w = np.asarray(return_times, dtype=float)[active]
        (wv, word, _, wx), count_w = _best_over_enumeration(D, order_local, local, K, w)
        wfull = np.zeros((len(active), regions.policy_count))
        wfull[:, active] = wx
        result.weighted_value = float(wv)
        result.weighted_ordering = tuple(active[k] for k in word)
        result.weighted_vectors = wfull
        result.lp_count += count_w
    return result


def verify_witness(
    regions: DecisionRegions,
    profile: KlProfile,
    config: AnalysisConfig,
    ordering: Sequence[int],
    vectors: np.ndarray,
    tol: float = 1e-9,
) -> list:
    """Every violated constraint of the regret-constant problem, as strings.

    Tolerances are relative to the target constant.
    """
    K = config.target
    opt = regions.optimal
    bad = []
    x = np.asarray(vectors, dtype=float)
    D = np.minimum(profile.d, INF_CAP)
    if len(set(ordering)) != len(ordering) or opt in ordering:
        bad.append("ordering is not an injection into the suboptimal policies")
    if (x < -tol).any():
        bad.append("negative coordinate")
    if (np.abs(x[:, opt]) > tol).any():
        bad.append("optimal-policy coordinate is not zero")
    for i in range(1, len(x)):
        if (x[i] < x[i - 1] - tol * max(1.0, np.abs(x).max())).any():
            bad.append(f"stage {i + 1} does not dominate stage {i}")
    for l, c in enumerate(ordering):
        for i in range(l + 1, len(x)):
            if abs(x[i, c] - x[l, c]) > tol * max(1.0, abs(x[l, c])):
                bad.append(f"coordinate {c} moved after its elimination at stage {l + 1}")
        vals = [float(x[l] @ D[g]) for g in regions.s_prime[c]]
        if abs(min(vals) - K) > tol * K:
            bad.append(f"stage {l + 1}: min over S' is {min(vals):.12g}, expected {K:.12g}")
    return bad


def theorem4_bound(
    profile: KlProfile,
    regions: DecisionRegions,
    config: AnalysisConfig,
    delta: float,
    L: int,
) -> float:
    """Count-based upper bound on the regret constant from an L-of-Delta
    resolvability certificate; the certificate is checked first."""
    if not delta > 0:
        raise ConfigurationError("Delta must be positive")
    if L < 0:
        raise ConfigurationError("L must be nonnegative")
    opt = regions.optimal
    others = [c for c in range(regions.policy_count) if c != opt]
    violations = []
    for c, g in _suboptimal_points(regions):
        count = int(np.sum(profile.d[g, others] >= delta))
        if count < L:
            violations.append((profile.labels[g] if profile.labels else g, count))
    if violations:
        raise ValidationError(f"certificate fails at (point, count) = {violations}")
    tilde = min(delta, epsilon_min(regions, profile))
    if tilde <= 0:
        raise InfiniteConstantError("minimum resolvability is zero")
    n = regions.policy_count
    return (n - L) / tilde * 2 * (1 + config.a4) * (1 + config.epsilon) / (1 - config.epsilon)


def policy_return_times(true_mdp: FiniteMdp, policies: Sequence[StationaryPolicy], s0: int) -> np.ndarray:
    return np.array([expected_return_time(induce_chain(true_mdp, c), s0) for c in policies])


def posterior_approx_diagnostic(
    ledger,
    log_weights: np.ndarray,
    profile: KlProfile,
    prior_log_weights: np.ndarray | None = None,
    return_times: Sequence[float] | None = None,
) -> np.ndarray:
    """|log pi(theta)/pi(theta*) - (log prior ratio - sum_c V_c D_c)| per point.

    ``ledger.policies`` and ``profile.policies`` may be ordered differently;
    coordinates are matched by policy.  With ``return_times`` the step
    counts are replaced by epoch counts times expected return times.
    """
    lw = np.asarray(log_weights, dtype=float)
    ts = profile.true_index
    if ts is None:
        raise PreconditionError("the diagnostic compares against the true point, which is off the grid")
    prior = np.zeros_like(lw) if prior_log_weights is None else np.asarray(prior_log_weights)
    counts = np.zeros(len(profile.policies))
    for k, c in enumerate(ledger.policies):
        j = profile.policies.index(c)
        if return_times is None:
            counts[j] += ledger.steps_per_policy[k]
        else:
            counts[j] += ledger.epochs_per_policy[k] * return_times[j]
    with np.errstate(invalid="ignore"):
        approx = (prior - prior[ts]) - _safe_exponent(profile.d, counts)
        observed = lw - lw[ts]
        out = np.abs(observed - approx)
    both_dead = np.isneginf(observed) & np.isneginf(approx)
    out[both_dead] = 0.0
    return out


def _safe_exponent(d: np.ndarray, counts: np.ndarray) -> np.ndarray:
    # columns of unplayed policies contribute nothing, even where D is infinite
    out = np.zeros(d.shape[0])
    for j, n in enumerate(counts):
        if n > 0:
            out += d[:, j] * n
    return out


def max_log_ratio(grid: ParamGrid, true_mdp: FiniteMdp) -> float:
    """Largest |log p_theta*(s,a,s') / p_theta(s,a,s')| over grid points and
    transitions where both are positive."""
    k = grid.kernels()
    ref = true_mdp.kernel
    both = (k > 0) & (ref[None] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(np.log(np.where(both, ref[None] / np.where(both, k, 1.0), 1.0)))
    return float(r.max())
