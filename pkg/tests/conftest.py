import numpy as np
import pytest
from hypothesis import strategies as st

from tsmdp_lab.mdp_core import FiniteMdp, InducedChain


def random_mdp(rng, n_states, n_actions, sparse=False):
    kernel = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparse:
        # zero out some entries but keep a ring so every chain stays irreducible
        mask = rng.random(kernel.shape) < 0.4
        for s in range(n_states):
            mask[s, :, (s + 1) % n_states] = False
        kernel = np.where(mask, 0.0, kernel)
        kernel /= kernel.sum(axis=-1, keepdims=True)
    reward = rng.normal(size=(n_states, n_actions))
    return FiniteMdp(reward, kernel)


@st.composite
def mdps(draw, max_states=4, max_actions=3):
    seed = draw(st.integers(0, 2**32 - 1))
    s = draw(st.integers(1, max_states))
    a = draw(st.integers(1, max_actions))
    sparse = draw(st.booleans())
    return random_mdp(np.random.default_rng(seed), s, a, sparse)


@pytest.fixture
def hand_chain():
    """Rows (0.7, 0.3) / (0.6, 0.4), rewards (0, 3): pi = (2/3, 1/3)."""
    return InducedChain(np.array([[0.7, 0.3], [0.6, 0.4]]), np.array([0.0, 3.0]))


@pytest.fixture
def hand_mdp():
    kernel = np.array([[[0.7, 0.3]], [[0.6, 0.4]]])
    return FiniteMdp(np.array([[0.0], [3.0]]), kernel)
