"""Numpy implementations of the hot loops.

Same signatures and sampling conventions as ``_ckernels``; used when the
compiled module is missing or ``POMBU_PURE_PYTHON`` is set.
"""
import numpy as np

_CHUNK = 8192


def enum_q_moments(next_state, reward, row_of, n_rows, policy, horizon, gamma, shift):
    """Exact mean and variance of Q over every member assignment.

    Assignment ``n`` picks member ``(n // K**r) % K`` for independent row
    ``r``; cells with ``row_of == -1`` always use member 0. All assignments
    carry weight ``K**-n_rows``.
    """
    next_state = np.asarray(next_state, dtype=np.int64)
    reward = np.asarray(reward, dtype=np.float64)
    row_of = np.asarray(row_of, dtype=np.int64)
    policy = np.asarray(policy, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    K, S, A = reward.shape
    H = int(horizon)
    total = K ** int(n_rows)

    s_idx = np.arange(S)[:, None]
    a_idx = np.arange(A)[None, :]
    fixed = row_of < 0
    rows = np.where(fixed, 0, row_of)
    powers = K ** np.arange(max(n_rows, 1), dtype=np.int64)

    acc1 = np.zeros((H, S, A))
    acc2 = np.zeros((H, S, A))
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        c = idx.size
        if n_rows > 0:
            digits = (idx[:, None] // powers[None, :n_rows]) % K
            choice = np.where(fixed[None], 0, digits[:, rows])
        else:
            choice = np.zeros((c, S, A), dtype=np.int64)
        nxt = next_state[choice, s_idx, a_idx].reshape(c, S * A)
        rew = reward[choice, s_idx, a_idx]
        v = np.zeros((c, S))
        for h in range(H - 1, -1, -1):
            q = rew + gamma * np.take_along_axis(v, nxt, axis=1).reshape(c, S, A)
            dev = q - shift[h]
            acc1[h] += dev.sum(axis=0)
            acc2[h] += (dev * dev).sum(axis=0)
            v = (q * policy[None]).sum(axis=2)
    m1 = acc1 / total
    mean = shift + m1
    var = acc2 / total - m1 * m1
    return mean, var


def _inverse_cdf(cdf_rows, u):
    # count of cdf entries <= u, clipped to the last index
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_tabular(cdf_rho, cdf_pi, cdf_p, reward, horizon, terminal, u_init, u_act, u_next):
    """Roll out ``n`` trajectories by inverse-CDF sampling of pre-drawn uniforms."""
    cdf_rho = np.asarray(cdf_rho, dtype=np.float64)
    cdf_pi = np.asarray(cdf_pi, dtype=np.float64)
    cdf_p = np.asarray(cdf_p, dtype=np.float64)
    reward = np.asarray(reward, dtype=np.float64)
    n = u_init.shape[0]
    H = int(horizon)
    states = np.full((n, H), -1, dtype=np.int64)
    actions = np.full((n, H), -1, dtype=np.int64)
    next_states = np.full((n, H), -1, dtype=np.int64)
    rewards = np.zeros((n, H))
    lengths = np.full(n, H, dtype=np.int64)

    s = _inverse_cdf(np.broadcast_to(cdf_rho, (n, cdf_rho.size)), u_init)
    alive = np.ones(n, dtype=bool)
    for t in range(H):
        if terminal >= 0:
            done = alive & (s == terminal)
            lengths[done] = t
            alive &= ~done
        live = np.flatnonzero(alive)
        if live.size == 0:
            break
        sl = s[live]
        a = _inverse_cdf(cdf_pi[sl], u_act[live, t])
        sn = _inverse_cdf(cdf_p[sl, a], u_next[live, t])
        states[live, t] = sl
        actions[live, t] = a
        rewards[live, t] = reward[sl, a]
        next_states[live, t] = sn
        s = s.copy()
        s[live] = sn
    return states, actions, rewards, next_states, lengths


def discounted_reverse_cumsum(x, discount, lengths):
    """``y[:, t] = x[:, t] + discount * y[:, t + 1]`` within each row's length."""
    x = np.asarray(x, dtype=np.float64)
    n, L = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    cols = np.arange(L)[None, :]
    xm = np.where(cols < lengths[:, None], x, 0.0)
    y = np.zeros_like(xm)
    nxt = np.zeros(n)
    for t in range(L - 1, -1, -1):
        nxt = xm[:, t] + discount * nxt
        y[:, t] = nxt
    return y
