"""Posterior over a finite parameter grid, kept as unnormalised log-weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, PreconditionError
from .families import ParamGrid
from .mdp_core import StationaryPolicy


def log_kernels(grid: ParamGrid) -> np.ndarray:
    """log p_theta(s, a, s') for every grid point, shape (S, A, S, G).

    The grid index is last so that one observed transition touches a
    contiguous slice.
    """
    k = grid.kernels()
    with np.errstate(divide="ignore"):
        out = np.log(np.moveaxis(k, 0, -1))
    return np.ascontiguousarray(out)


@dataclass
class PosteriorState:
    log_weights: np.ndarray
    grid: ParamGrid
    eliminated: int = field(default=0)

    def probabilities(self) -> np.ndarray:
        lw = self.log_weights
        if not np.isfinite(lw).any():
            raise PreconditionError("posterior has no remaining mass")
        return np.exp(lw - logsumexp(lw))

    def copy(self) -> "PosteriorState":
        return PosteriorState(self.log_weights.copy(), self.grid, self.eliminated)


def init(grid: ParamGrid, prior_weights: Sequence[float] | str = "uniform") -> PosteriorState:
    if isinstance(prior_weights, str):
        if prior_weights != "uniform":
            raise ConfigurationError(f"unknown prior {prior_weights!r}")
        w = np.ones(len(grid))
    else:
        w = np.asarray(prior_weights, dtype=float)
        if w.shape != (len(grid),):
            raise ConfigurationError(f"prior has {w.size} weights for {len(grid)} grid points")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ConfigurationError("prior weights must be finite and nonnegative")
        if not (w > 0).any():
            raise ConfigurationError("prior weights are all zero")
    with np.errstate(divide="ignore"):
        lw = np.log(w / w.sum())
    return PosteriorState(lw, grid)


def log_update(state: PosteriorState, s1: int, a: int, s2: int, table: np.ndarray | None = None):
    """Bayes step for one observed transition (s1, a) -> s2."""
    if table is None:
        ll = np.array([m.kernel[s1, a, s2] for m in state.grid.mdps])
        with np.errstate(divide="ignore"):
            ll = np.log(ll)
    else:
        ll = table[s1, a, s2]
    new = state.log_weights + ll
    if not np.isfinite(new).any():
        raise PreconditionError(
            f"transition ({s1}, {a}) -> {s2} is impossible under every remaining grid point"
        )
    newly_dead = int(np.count_nonzero(np.isfinite(state.log_weights) & ~np.isfinite(new)))
    return PosteriorState(new, state.grid, state.eliminated + newly_dead)


def sample(state: PosteriorState, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of a grid index."""
    p = state.probabilities()
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    # never land on a zero-mass point through rounding at the top of the CDF
    last = int(np.flatnonzero(p > 0)[-1])
    return min(idx, last)


def mass_of_set(state: PosteriorState, indices: Iterable[int]) -> float:
    idx = np.fromiter(indices, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    lw = state.log_weights
    return float(np.exp(logsumexp(lw[idx]) - logsumexp(lw)))


def from_pair_counts(
    grid: ParamGrid,
    prior_log_weights: np.ndarray,
    pair_counts: np.ndarray,
    policies: Sequence[StationaryPolicy],
    reference_index: int | None = None,
) -> np.ndarray:
    """Posterior log-weights rebuilt from per-policy pair counts J(c, s1, s2).

    ``log W(theta) = sum_{c,s1,s2} J(c,s1,s2) log p_theta(s1, c(s1), s2)``
    plus the log prior.  With ``reference_index`` the same sum for that
    point is subtracted, giving the likelihood ratio against it; it is a
    common shift and cancels on normalisation.
    """
    kernels = grid.kernels()
    out = np.array(prior_log_weights, dtype=float, copy=True)
    S = grid.n_states
    rows = np.arange(S)
    for c, counts in zip(policies, pair_counts):
        mask = counts > 0
        if not mask.any():
            continue
        a = c.as_array()
        p = kernels[:, rows, a, :]  # (G, S, S)
        with np.errstate(divide="ignore"):
            logp = np.where(mask, np.log(np.where(mask, p, 1.0)), 0.0)
        dead = (p == 0) & mask
        contrib = np.einsum("gij,ij->g", logp, counts.astype(float))
        contrib[dead.any(axis=(1, 2))] = -np.inf
        out += contrib
    if reference_index is not None:
        out = out - out[reference_index]
    return out


def write_snapshot_csv(state: PosteriorState, path, t: int | None = None) -> None:
    p = state.probabilities()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "grid_label", "probability"] if t is not None else ["grid_label", "probability"])
        for label, prob in zip(state.grid.labels, p):
            w.writerow([t, label, repr(float(prob))] if t is not None else [label, repr(float(prob))])
