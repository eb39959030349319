import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_epsilon_min, synthetic_instance, two_stage_scan
from tsmdp_lab import analysis as an
from tsmdp_lab.agents import EpochLedger, run_tsmdp
from tsmdp_lab.errors import CapacityError, InfiniteConstantError, PreconditionError, ValidationError
from tsmdp_lab.families import (
    TWO_STATE_FIXTURE,
    QueueConfig,
    TwoServerParams,
    build_two_server_mdp,
    build_two_state_mdp,
    grid_prior,
    pinsker_constant,
)
from tsmdp_lab.mdp_core import FiniteMdp, StationaryPolicy

CFG = an.AnalysisConfig()


def bern_kl(p, q):
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def chain_mdp(rows):
    return FiniteMdp(np.zeros((2, 1)), np.array(rows)[:, None, :])


def test_marginal_kl_hand_value():
    true = chain_mdp([[0.7, 0.3], [0.6, 0.4]])
    other = chain_mdp([[0.5, 0.5], [0.5, 0.5]])
    pol = StationaryPolicy((0, 0))
    expect = 2 / 3 * bern_kl(0.3, 0.5) + 1 / 3 * bern_kl(0.6, 0.5)
    assert an.marginal_kl(true, other, pol) == pytest.approx(expect, abs=1e-15)
    assert an.marginal_kl(true, true, pol) == 0.0


def test_marginal_kl_uses_true_weights():
    # swapping roles changes the weights: the divergence is not symmetric
    a = chain_mdp([[0.9, 0.1], [0.5, 0.5]])
    b = chain_mdp([[0.5, 0.5], [0.1, 0.9]])
    pol = StationaryPolicy((0, 0))
    pi_a = np.array([5 / 6, 1 / 6])
    expect = pi_a[0] * bern_kl(0.1, 0.5) + pi_a[1] * bern_kl(0.5, 0.9)
    assert an.marginal_kl(a, b, pol) == pytest.approx(expect, abs=1e-14)


def test_marginal_kl_infinite():
    true = chain_mdp([[0.5, 0.5], [0.5, 0.5]])
    other = chain_mdp([[1.0, 0.0], [0.5, 0.5]])
    assert math.isinf(an.marginal_kl(true, other, StationaryPolicy((0, 0))))


@pytest.fixture(scope="module")
def two_state_regions():
    grid = grid_prior("two_state", [[0.2, 0.4, 0.6, 0.8]] * 4)
    i = grid.index_of((0.8, 0.2, 0.4, 0.6))
    return grid, i


def test_profile_invariants(two_state_regions):
    grid, i = two_state_regions
    regions, profile = an.decision_regions(grid, i, CFG)
    assert (profile.d >= 0).all()
    assert np.all(profile.d[i] == 0)
    assert i in regions.s_prime[regions.optimal]
    # regions partition the grid and S = S' u S'' disjointly
    members = sorted(g for c in range(regions.policy_count) for g in regions.members(c))
    assert members == list(range(len(grid)))
    for c in range(regions.policy_count):
        assert not set(regions.s_prime[c]) & set(regions.s_double_prime[c])


def test_epsilon_prime_inf_empties_double_prime(two_state_regions):
    grid, i = two_state_regions
    regions, _ = an.decision_regions(grid, i, an.AnalysisConfig(epsilon_prime=math.inf))
    assert all(not v for v in regions.s_double_prime.values())


def test_off_grid_truth_joins_policy_set():
    cfg = QueueConfig(capacity=10)
    grid = grid_prior("two_server", [[0.2, 0.3, 0.7]], cfg)
    true = build_two_server_mdp(TwoServerParams(0.5), cfg)
    regions, profile = an.decision_regions(grid, None, CFG, true_mdp=true)
    assert profile.true_index is None
    assert (profile.d > 0).all()
    assert regions.policy_count == len(profile.policies)


def _regions(d, region_of, optimal=0, eps_prime=0.0):
    d = np.asarray(d, dtype=float)
    profile = an.KlProfile(d, tuple(range(d.shape[1])), 0)
    return an.split_regions(np.array(region_of), optimal, d[:, optimal], eps_prime, d.shape[1]), profile


def test_epsilon_min_cases():
    regions, profile = _regions([[0, 0], [0, 0.5]], [0, 1])
    assert an.epsilon_min(regions, profile) == 0.5
    regions, profile = _regions([[0, 0], [0, 0.0]], [0, 1])
    assert an.epsilon_min(regions, profile) == 0.0
    with pytest.raises(InfiniteConstantError):
        an.regret_constant(regions, profile, CFG)
    regions, profile = _regions([[0, 0]], [0])
    with pytest.raises(PreconditionError):
        an.epsilon_min(regions, profile)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_epsilon_min_scan(seed):
    regions, profile = synthetic_instance(np.random.default_rng(seed), max_points=3)
    assert an.epsilon_min(regions, profile) == brute_force_epsilon_min(profile.d, regions)


def test_one_stage_closed_form():
    regions, profile = _regions([[0, 0], [0, 0.5]], [0, 1])
    rc = an.regret_constant(regions, profile, CFG)
    assert abs(rc.value - (1.1 / 0.9) / 0.5) < 1e-12
    assert rc.value == pytest.approx(2.4444, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(0.0, 0.5), st.floats(0.01, 0.9))
def test_one_stage_closed_form_property(d, a4, eps):
    cfg = an.AnalysisConfig(epsilon=eps, a4=a4)
    regions, profile = _regions([[0, 0], [0, d]], [0, 1])
    assert abs(an.regret_constant(regions, profile, cfg).value - cfg.target / d) <= 1e-12 * cfg.target / d


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_matches_growth_path_search(seed):
    regions, profile = synthetic_instance(np.random.default_rng(seed))
    rc = an.regret_constant(regions, profile, CFG)
    oracle = two_stage_scan(profile.d, regions.s_prime, CFG.target)
    assert abs(rc.value - oracle) <= 0.01 * oracle
    assert an.verify_witness(regions, profile, CFG, rc.ordering, rc.vectors) == []
    assert rc.staged_sum == pytest.approx(rc.value, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_scaling_inverse(seed, s):
    regions, profile = synthetic_instance(np.random.default_rng(seed))
    base = an.regret_constant(regions, profile, CFG).value
    scaled = an.regret_constant(regions, profile.scaled(s), CFG).value
    assert scaled == pytest.approx(base / s, rel=1e-7)


def test_verify_witness_catches_bad_vectors():
    regions, profile = synthetic_instance(np.random.default_rng(1))
    rc = an.regret_constant(regions, profile, CFG)
    bad = rc.vectors.copy()
    bad[0] *= 1.1
    assert an.verify_witness(regions, profile, CFG, rc.ordering, bad)


def test_capacity_cap():
    n = 9
    d = np.zeros((n, n))
    d[1:, 1:] = 1.0
    regions, profile = _regions(d, list(range(n)))
    with pytest.raises(CapacityError):
        an.regret_constant(regions, profile, CFG)


def test_empty_s_prime_gives_zero():
    # suboptimal point separated by c*: S'_1 empty at epsilon' = 0
    regions, profile = _regions([[0, 0], [0.3, 0.5]], [0, 1])
    rc = an.regret_constant(regions, profile, CFG)
    assert rc.value == 0.0 and rc.pegged == (1,)


def test_infinite_entries_capped():
    regions, profile = _regions([[0, 0, 0], [0, math.inf, 0.4], [0, 0.3, 0.6]], [0, 1, 2])
    rc = an.regret_constant(regions, profile, CFG)
    assert math.isfinite(rc.value)
    assert an.verify_witness(regions, profile, CFG, rc.ordering, rc.vectors) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 3.0))
def test_upper_bound_dominance_synthetic(seed, delta):
    regions, profile = synthetic_instance(np.random.default_rng(seed), n_sub=3)
    rc = an.regret_constant(regions, profile, CFG)
    others = [1, 2, 3]
    for L in range(0, 4):
        ok = all(int(np.sum(profile.d[g, others] >= delta)) >= L for c in others for g in regions.s_prime[c])
        if not ok:
            with pytest.raises(ValidationError):
                an.theorem4_bound(profile, regions, CFG, delta, L)
            continue
        assert rc.value <= an.theorem4_bound(profile, regions, CFG, delta, L)


def test_upper_bound_formula():
    regions, profile = synthetic_instance(np.random.default_rng(4), n_sub=3)
    eps_min = an.epsilon_min(regions, profile)
    delta = eps_min / 2
    b0 = an.theorem4_bound(profile, regions, CFG, delta, 0)
    assert b0 == pytest.approx(4 / delta * 2 * CFG.target)
    b1 = an.theorem4_bound(profile, regions, CFG, delta, 1)
    assert b1 < b0


def test_two_server_upper_bound_dominance():
    cfg = QueueConfig(capacity=10)
    thetas = [round(0.05 + 0.045 * i, 4) for i in range(20)]
    grid = grid_prior("two_server", [thetas], cfg, upsilon=0.05)
    i = thetas.index(0.5)
    acfg = an.AnalysisConfig(epsilon_prime=0.05)
    regions, profile = an.decision_regions(grid, i, acfg)
    rc = an.regret_constant(regions, profile, acfg)
    pts = [g for c, v in regions.s_prime.items() if c != regions.optimal for g in v]
    delta_star = min(abs(thetas[g] - 0.5) for g in pts)
    a = pinsker_constant(cfg)
    L = regions.policy_count - 1
    bound = an.theorem4_bound(profile, regions, acfg, a * delta_star**2, L)
    assert rc.value <= bound
    # the count-free form: with L = |C| - 1 only one coordinate's worth remains
    assert bound == pytest.approx(2 * acfg.target / min(a * delta_star**2, an.epsilon_min(regions, profile)))


def test_posterior_diagnostic_zero_at_start(two_state_regions):
    grid, i = two_state_regions
    regions, profile = an.decision_regions(grid, i, CFG)
    n = len(profile.policies)
    ledger = EpochLedger(list(profile.policies), [], np.zeros(n, int), np.zeros(n, int), np.zeros((n, 2, 2), int))
    prior = np.log(np.full(len(grid), 1 / len(grid)))
    assert np.all(an.posterior_approx_diagnostic(ledger, prior, profile, prior) == 0)


def test_posterior_diagnostic_sublinear(two_state_regions):
    grid, i = two_state_regions
    mdp = build_two_state_mdp(TWO_STATE_FIXTURE)
    regions, profile = an.decision_regions(grid, i, CFG)
    res = run_tsmdp(mdp, grid, T=20_000, seed=3, record_boundaries=True)
    ts, worst = [], []
    for t, lw, J in res.boundary_log_weights[1::50]:
        steps = J.sum(axis=(1, 2))
        led = EpochLedger(res.ledger.policies, [], steps, np.zeros_like(steps), J)
        diff = an.posterior_approx_diagnostic(led, lw, profile, np.zeros(len(grid)))
        alive = np.isfinite(diff)
        ts.append(t)
        worst.append(np.median(diff[alive]))
    ts, worst = np.array(ts[1:], float), np.array(worst[1:])
    slope = np.polyfit(np.log(ts), np.log(worst + 1e-12), 1)[0]
    assert slope < 1.0
