# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def enum_q_moments(next_state, reward, row_of, Py_ssize_t n_rows, policy,
                   Py_ssize_t horizon, double gamma, shift):
    cdef const long long[:, :, ::1] nxt = np.ascontiguousarray(next_state, dtype=np.int64)
    cdef const double[:, :, ::1] rew = np.ascontiguousarray(reward, dtype=np.float64)
    cdef const long long[:, ::1] rows = np.ascontiguousarray(row_of, dtype=np.int64)
    cdef const double[:, ::1] pi = np.ascontiguousarray(policy, dtype=np.float64)
    cdef const double[:, :, ::1] sh = np.ascontiguousarray(shift, dtype=np.float64)

    cdef Py_ssize_t K = rew.shape[0], S = rew.shape[1], A = rew.shape[2]
    cdef Py_ssize_t H = horizon
    cdef Py_ssize_t total = 1, r, n, h, s, a, m, row
    for r in range(n_rows):
        total *= K

    acc1_arr = np.zeros((H, S, A))
    acc2_arr = np.zeros((H, S, A))
    cdef double[:, :, ::1] acc1 = acc1_arr
    cdef double[:, :, ::1] acc2 = acc2_arr
    cdef long long[::1] digits = np.zeros(max(n_rows, 1), dtype=np.int64)
    cdef double[::1] v = np.zeros(S)
    cdef double[::1] v_new = np.zeros(S)
    cdef double q, dev, vs

    for n in range(total):
        for s in range(S):
            v[s] = 0.0
        for h in range(H - 1, -1, -1):
            for s in range(S):
                vs = 0.0
                for a in range(A):
                    row = rows[s, a]
                    m = 0 if row < 0 else digits[row]
                    q = rew[m, s, a] + gamma * v[nxt[m, s, a]]
                    dev = q - sh[h, s, a]
                    acc1[h, s, a] += dev
                    acc2[h, s, a] += dev * dev
                    vs += q * pi[s, a]
                v_new[s] = vs
            for s in range(S):
                v[s] = v_new[s]
        # odometer increment of the mixed-radix digits
        for r in range(n_rows):
            digits[r] += 1
            if digits[r] < K:
                break
            digits[r] = 0

    m1 = acc1_arr / total
    mean = np.asarray(shift, dtype=np.float64) + m1
    var = acc2_arr / total - m1 * m1
    return mean, var


cdef inline Py_ssize_t _inverse_cdf(const double[::1] cdf, double u) noexcept nogil:
    cdef Py_ssize_t k, count = 0, m = cdf.shape[0]
    for k in range(m):
        if u >= cdf[k]:
            count += 1
    if count > m - 1:
        count = m - 1
    return count


def sample_tabular(cdf_rho, cdf_pi, cdf_p, reward, Py_ssize_t horizon, Py_ssize_t terminal,
                   u_init, u_act, u_next):
    cdef const double[::1] rho = np.ascontiguousarray(cdf_rho, dtype=np.float64)
    cdef const double[:, ::1] cpi = np.ascontiguousarray(cdf_pi, dtype=np.float64)
    cdef const double[:, :, ::1] cp = np.ascontiguousarray(cdf_p, dtype=np.float64)
    cdef const double[:, ::1] rew = np.ascontiguousarray(reward, dtype=np.float64)
    cdef const double[::1] ui = np.ascontiguousarray(u_init, dtype=np.float64)
    cdef const double[:, ::1] ua = np.ascontiguousarray(u_act, dtype=np.float64)
    cdef const double[:, ::1] un = np.ascontiguousarray(u_next, dtype=np.float64)

    cdef Py_ssize_t n = ui.shape[0], H = horizon, i, t, s, a, sn
    states_arr = np.full((n, H), -1, dtype=np.int64)
    actions_arr = np.full((n, H), -1, dtype=np.int64)
    next_arr = np.full((n, H), -1, dtype=np.int64)
    rewards_arr = np.zeros((n, H))
    lengths_arr = np.full(n, H, dtype=np.int64)
    cdef long long[:, ::1] states = states_arr
    cdef long long[:, ::1] actions = actions_arr
    cdef long long[:, ::1] nexts = next_arr
    cdef double[:, ::1] rewards = rewards_arr
    cdef long long[::1] lengths = lengths_arr

    with nogil:
        for i in range(n):
            s = _inverse_cdf(rho, ui[i])
            for t in range(H):
                if terminal >= 0 and s == terminal:
                    lengths[i] = t
                    break
                a = _inverse_cdf(cpi[s], ua[i, t])
                sn = _inverse_cdf(cp[s, a], un[i, t])
                states[i, t] = s
                actions[i, t] = a
                rewards[i, t] = rew[s, a]
                nexts[i, t] = sn
                s = sn
    return states_arr, actions_arr, rewards_arr, next_arr, lengths_arr


def discounted_reverse_cumsum(x, double discount, lengths):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const long long[::1] lv = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t n = xv.shape[0], L = xv.shape[1], i, t, end
    out = np.zeros((n, L))
    cdef double[:, ::1] y = out
    cdef double acc
    with nogil:
        for i in range(n):
            end = lv[i]
            if end > L:
                end = L
            acc = 0.0
            for t in range(end - 1, -1, -1):
                acc = xv[i, t] + discount * acc
                y[i, t] = acc
    return out
