"""Compiled inner loops for the simulators.

All randomness comes in as pre-drawn uniform buffers so results do not
depend on numba's own generator.  Each walker returns when it runs out of
uniforms, reaches ``t_stop`` or hits its own stopping event; the caller
refills and resumes.
"""
import numpy as np
from numba import njit


def row_cdf(kernel: np.ndarray) -> np.ndarray:
    """Cumulative rows with exact 1.0 from the last positive entry on, so an
    inverse-CDF draw can never land on a zero-probability successor."""
    cdf = np.cumsum(kernel, axis=-1)
    positive = kernel > 0
    last = kernel.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    idx = np.arange(kernel.shape[-1])
    cdf = np.where(idx >= last[..., None], 1.0, cdf)
    return np.ascontiguousarray(cdf)


@njit(cache=True, nogil=True)
def _draw(row, x):
    k = 0
    n = row.shape[0]
    while k < n - 1 and x >= row[k]:
        k += 1
    return k


@njit(cache=True, nogil=True)
def tsmdp_walk(cdf, reward, policy, cstar, loglik, logw, comp, pairs, s, s0, t, t_stop, u, pos, cap_left):
    """Play ``policy`` from ``s`` until the walk re-enters ``s0``.

    Per step: draw the successor, add the log-likelihood of the observed
    transition to every grid weight, and count the pair.  The additions are
    Kahan-compensated through ``comp`` so the weights stay within a few ulp
    of the pair-count sum over long runs.  Returns
    ``(s, t, reward_sum, suboptimal, pos, returned, cap_left)``.
    """
    G = logw.shape[0]
    rsum = 0.0
    sub = 0
    n = u.shape[0]
    while t < t_stop and pos < n and cap_left > 0:
        a = policy[s]
        s2 = _draw(cdf[s, a], u[pos])
        pos += 1
        rsum += reward[s, a]
        if a != cstar[s]:
            sub += 1
        ll = loglik[s, a, s2]
        for g in range(G):
            w = logw[g]
            x = ll[g]
            if w == -np.inf:
                continue
            if x == -np.inf:
                logw[g] = -np.inf
                comp[g] = 0.0
                continue
            y = x - comp[g]
            w2 = w + y
            comp[g] = (w2 - w) - y
            logw[g] = w2
        pairs[s, s2] += 1
        s = s2
        t += 1
        cap_left -= 1
        if s == s0:
            return s, t, rsum, sub, pos, True, cap_left
    return s, t, rsum, sub, pos, False, cap_left


@njit(cache=True, nogil=True)
def ucrl2_walk(cdf, reward, policy, cstar, n_sa, nu, p_counts, s, t, t_stop, u, pos):
    """Play ``policy`` until some pair's in-episode count reaches its count
    from before the episode.  Returns ``(s, t, reward_sum, suboptimal, pos,
    episode_over)``."""
    rsum = 0.0
    sub = 0
    n = u.shape[0]
    while t < t_stop and pos < n:
        a = policy[s]
        if nu[s, a] >= max(1, n_sa[s, a]):
            return s, t, rsum, sub, pos, True
        s2 = _draw(cdf[s, a], u[pos])
        pos += 1
        rsum += reward[s, a]
        if a != cstar[s]:
            sub += 1
        nu[s, a] += 1
        p_counts[s, a, s2] += 1
        s = s2
        t += 1
    return s, t, rsum, sub, pos, False


@njit(cache=True, nogil=True)
def extended_value_iteration(p_hat, radius, reward, eps, max_iter):
    """Optimistic average-reward planning over L1 balls around ``p_hat``.

    Returns ``(policy, values, iterations, converged)``; the policy picks
    the lowest action among numerical ties.
    """
    S, A = reward.shape
    u = np.zeros(S)
    new = np.zeros(S)
    policy = np.zeros(S, dtype=np.int64)
    p = np.zeros(S)
    for it in range(max_iter):
        order = np.argsort(-u, kind="mergesort")
        for s in range(S):
            best = 0.0
            best_a = -1
            for a in range(A):
                for k in range(S):
                    p[k] = p_hat[s, a, k]
                top = order[0]
                p[top] = min(1.0, p[top] + radius[s, a] / 2.0)
                total = 0.0
                for k in range(S):
                    total += p[k]
                j = S - 1
                while total > 1.0 + 1e-15 and j > 0:
                    k = order[j]
                    excess = total - 1.0
                    take = min(p[k], excess)
                    p[k] -= take
                    total -= take
                    j -= 1
                q = reward[s, a]
                for k in range(S):
                    q += p[k] * u[k]
                if best_a < 0 or q > best + 1e-12 * max(1.0, abs(best)):
                    best = q
                    best_a = a
            new[s] = best
            policy[s] = best_a
        lo = np.inf
        hi = -np.inf
        for s in range(S):
            d = new[s] - u[s]
            lo = min(lo, d)
            hi = max(hi, d)
        m = new.min()
        for s in range(S):
            u[s] = new[s] - m
        if hi - lo < eps:
            return policy, u, it + 1, True
    return policy, u, max_iter, False


@njit(cache=True, nogil=True)
def renewal_cycles(cdf, reward, s0, n_cycles, u, cycle_rewards, pair_counts, state_counts, lengths, cap):
    """Simulate ``n_cycles`` returns to ``s0`` of a fixed chain.

    Fills per-cycle length, reward sum, and per-cycle visits to every
    state and pair.  Returns the number of uniforms consumed, -1 when the
    buffer ran out, or -2 when one cycle exceeded ``cap`` steps."""
    S = cdf.shape[0]
    pos = 0
    n = u.shape[0]
    for k in range(n_cycles):
        s = s0
        length = 0
        rsum = 0.0
        while True:
            if pos >= n:
                return -1
            s2 = _draw(cdf[s], u[pos])
            pos += 1
            rsum += reward[s]
            state_counts[k, s] += 1
            pair_counts[k, s, s2] += 1
            length += 1
            s = s2
            if s == s0:
                break
            if length >= cap:
                return -2
        lengths[k] = length
        cycle_rewards[k] = rsum
    return pos


@njit(cache=True, nogil=True)
def path_deviation_stats(cdf, reward, mu_star, s0, n_cycles, u, tau_bar, pair_mean, state_mean,
                         increment_mean, log_scale, delta, record_at, recorded):
    """Stream one path of ``n_cycles`` cycles and return, for every tracked
    quantity, max over k >= 2 of dev_k^2 / (k * log(log_scale * log k / delta)).

    Quantities, in order: cycle time, every pair (row-major), every state,
    and the reward increment ``mu_star * length - reward``.  ``recorded[j, q]`` receives
    |dev|/sqrt(k) at ``k = record_at[j]``.  Returns (stats, uniforms used);
    the second entry is -1 when ``u`` was too short.
    """
    S = cdf.shape[0]
    nq = 1 + S * S + S + 1
    stats = np.zeros(nq)
    cum = np.zeros(nq)
    pos = 0
    n = u.shape[0]
    j = 0
    for k in range(1, n_cycles + 1):
        s = s0
        while True:
            if pos >= n:
                return stats, -1
            s2 = _draw(cdf[s], u[pos])
            pos += 1
            cum[0] += 1.0
            cum[1 + s * S + s2] += 1.0
            cum[1 + S * S + s] += 1.0
            cum[nq - 1] += mu_star - reward[s]
            s = s2
            if s == s0:
                break
        denom = 0.0
        if k >= 2:
            denom = k * np.log(log_scale * np.log(k) / delta)
        rec = j < record_at.shape[0] and record_at[j] == k
        for q in range(nq):
            if q == 0:
                mean = tau_bar
            elif q < 1 + S * S:
                mean = pair_mean[q - 1]
            elif q < nq - 1:
                mean = state_mean[q - 1 - S * S]
            else:
                mean = increment_mean
            dev = cum[q] - k * mean
            if k >= 2:
                v = dev * dev / denom
                if v > stats[q]:
                    stats[q] = v
            if rec:
                recorded[j, q] = abs(dev) / np.sqrt(k)
        if rec:
            j += 1
    return stats, pos
