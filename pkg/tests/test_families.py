import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsmdp_lab.analysis import marginal_kl
from tsmdp_lab.errors import ConfigurationError
from tsmdp_lab.families import (
    TWO_STATE_FIXTURE,
    QueueConfig,
    QueueParams,
    TwoServerParams,
    TwoStateParams,
    arrival_curve,
    build_queue_mdp,
    build_two_server_mdp,
    build_two_state_mdp,
    grid_prior,
    reference_queue_axes,
    pinsker_constant,
    two_state_closed_form_policy,
)
from tsmdp_lab.mdp_core import StationaryPolicy, all_policies, induce_chain, optimal_policy, policy_gain


def test_queue_rows_and_arrival_cap():
    cfg = QueueConfig()
    p = QueueParams.normalized(0.6, 0.3, cfg)
    lam = arrival_curve(p, cfg)
    assert lam.max() == pytest.approx(cfg.lambda_cap)
    assert lam.min() > 0
    mdp = build_queue_mdp(p, cfg)
    assert mdp.n_states == 51 and mdp.n_actions == 2
    assert np.allclose(mdp.kernel.sum(axis=2), 1.0, atol=1e-14)


def test_queue_hand_transitions():
    cfg = QueueConfig()
    p = QueueParams.normalized(0.6, 0.3, cfg)
    lam = arrival_curve(p, cfg)
    k = build_queue_mdp(p, cfg).kernel
    s = 20
    for a, mu in enumerate(cfg.service_probs):
        assert k[s, a, s - 1] == pytest.approx(mu * (1 - lam[s]))
        assert k[s, a, s + 1] == pytest.approx((1 - mu) * lam[s])
    assert k[0, 0, 1] == pytest.approx(lam[0])
    assert k[50, 1, 49] == pytest.approx(0.8 * (1 - lam[50]))


def test_queue_optimal_gain():
    mdp = build_queue_mdp(QueueParams.normalized(0.6, 0.3, QueueConfig()))
    assert optimal_policy(mdp).gain == pytest.approx(96.4088, abs=5e-4)


def test_two_server_interior_triple():
    cfg = QueueConfig(capacity=10)
    theta = 0.37
    k = build_two_server_mdp(TwoServerParams(theta), cfg).kernel
    for a, mu in enumerate(cfg.service_probs):
        down, stay, up = k[4, a, 3], k[4, a, 4], k[4, a, 5]
        assert down == pytest.approx(mu * (1 - theta))
        assert stay == pytest.approx(mu * theta + (1 - mu) * (1 - theta))
        assert up == pytest.approx((1 - mu) * theta)


def test_two_server_range():
    with pytest.raises(ConfigurationError):
        TwoServerParams(0.01, upsilon=0.05)
    TwoServerParams(0.0)


def test_queue_flat_curve_equals_two_server():
    cfg = QueueConfig(capacity=12)
    flat = build_queue_mdp(QueueParams(6.0, 1e9), cfg)
    ref = build_two_server_mdp(TwoServerParams(cfg.lambda_cap), cfg)
    assert np.allclose(flat.kernel, ref.kernel, atol=1e-12)
    assert np.array_equal(flat.reward, ref.reward)


def test_two_state_fixture_policy():
    mdp = build_two_state_mdp(TWO_STATE_FIXTURE)
    assert optimal_policy(mdp).policy.label() == "11"


def test_two_state_symmetric_tie():
    mdp = build_two_state_mdp(TwoStateParams(0.3, 0.3, 0.3, 0.3))
    gains = {policy_gain(induce_chain(mdp, c)) for c in all_policies(2, 2)}
    assert max(gains) - min(gains) < 1e-15
    assert optimal_policy(mdp).policy.label() == "11"


def test_two_state_rewards_must_increase():
    with pytest.raises(ConfigurationError):
        build_two_state_mdp(TWO_STATE_FIXTURE, rewards=(1.0, 0.0))


probs = st.floats(0.05, 0.95)


@settings(max_examples=200, deadline=None)
@given(probs, probs, probs, probs, st.floats(-3, 3), st.floats(0.01, 4))
def test_two_state_closed_form(p1, q1, p2, q2, r1, gap):
    params = TwoStateParams(p1, q1, p2, q2)
    rewards = (r1, r1 + gap)
    mdp = build_two_state_mdp(params, rewards)
    best = optimal_policy(mdp, list(all_policies(2, 2)))
    a1, a2 = two_state_closed_form_policy(params)
    closed = StationaryPolicy((a1, a2))
    # closed-form gain: pi2 = p12 / (p12 + p21)
    p12 = (p1, p2)[a1]
    p21 = (q1, q2)[a2]
    pi2 = p12 / (p12 + p21)
    gain = rewards[0] * (1 - pi2) + rewards[1] * pi2
    assert policy_gain(induce_chain(mdp, closed)) == pytest.approx(gain, abs=1e-12)
    assert best.gain == pytest.approx(gain, abs=1e-12)


def test_two_state_closed_form_batch():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        v = rng.uniform(0.05, 0.95, 4)
        params = TwoStateParams(*v)
        mdp = build_two_state_mdp(params)
        a1, a2 = two_state_closed_form_policy(params)
        g_closed = policy_gain(induce_chain(mdp, StationaryPolicy((a1, a2))))
        assert g_closed >= optimal_policy(mdp).gain - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1), st.integers(0, 3))
def test_pinsker_lower_bound(t1, t2, act, seed):
    cfg = QueueConfig(capacity=6)
    a = pinsker_constant(cfg)
    lo, hi = 0.05, 0.95
    t_star, t = lo + (hi - lo) * t1, lo + (hi - lo) * t2
    true = build_two_server_mdp(TwoServerParams(t_star), cfg)
    other = build_two_server_mdp(TwoServerParams(t), cfg)
    rng = np.random.default_rng(seed)
    pol = StationaryPolicy(rng.integers(0, 2, cfg.capacity + 1)) if seed else StationaryPolicy.constant(7, act)
    assert marginal_kl(true, other, pol) >= a * (t_star - t) ** 2 - 1e-12


def test_pinsker_constants():
    cfg = QueueConfig()
    assert pinsker_constant(cfg, include_boundary=False) == pytest.approx(0.5 * 1.4**2)
    assert pinsker_constant(cfg) == pytest.approx(2 * 0.3**2)


def test_grid_sizes():
    grid = grid_prior("queue", reference_queue_axes(), QueueConfig())
    assert len(grid) == 190
    single = grid_prior("two_server", [[0.4]], QueueConfig(capacity=3))
    assert len(single) == 1
    with pytest.raises(ConfigurationError):
        grid_prior("two_state", [[0.2, 0.4]] * 4, cap=10)


def test_grid_index_of():
    grid = grid_prior("two_state", [[0.2, 0.4]] * 4)
    i = grid.index_of((0.4, 0.2, 0.4, 0.2))
    assert grid.params[i] == TwoStateParams(0.4, 0.2, 0.4, 0.2)
