"""Propagation of epistemic Q-value uncertainty through the Bellman recursion.

Tabular tables follow the ``(H+1, S, A)`` layout of :mod:`pombu.mdp`. With a
discount ``gamma`` the local term uses ``gamma * V`` and the propagated term
is scaled by ``gamma**2``; ``gamma = 1`` is the undiscounted case.
"""
from __future__ import annotations

import csv
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from . import kernels
from .mdp import FiniteMdp, TabularPolicy, Trajectory, ValueTables, exact_values
from .posterior import PosteriorEnsemble, mean_mdp, variance_of_q_oracle


@dataclass
class UncertaintyTables:
    u: np.ndarray
    U: np.ndarray
    nu: np.ndarray
    B: np.ndarray
    var_oracle: np.ndarray | None = None

    def rows(self):
        H1, S, A = self.U.shape
        for t in range(H1 - 1):
            for s in range(S):
                for a in range(A):
                    var = "" if self.var_oracle is None else repr(float(self.var_oracle[t, s, a]))
                    yield (t + 1, s, a, self.u[t, s, a], self.U[t, s, a], self.nu[t, s, a], self.B[t, s, a], var)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "s", "a", "u", "U", "nu", "B", "var_oracle"])
            for h, s, a, u, U, nu, B, var in self.rows():
                w.writerow([h, s, a, repr(float(u)), repr(float(U)), repr(float(nu)), repr(float(B)), var])


@dataclass
class TrajectoryUncertainty:
    d: np.ndarray
    D: np.ndarray
    gamma: float = 1.0

    @property
    def sqrt_D(self) -> np.ndarray:
        return np.sqrt(self.D)


def _check_table(table, mdp: FiniteMdp, name: str) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    expected = (mdp.horizon + 1, mdp.num_states, mdp.num_actions)
    if table.shape != expected:
        raise ValueError(f"{name} has shape {table.shape}, expected {expected}")
    return table


def local_uncertainty(ensemble: PosteriorEnsemble, mean_values: ValueTables, gamma: float = 1.0) -> np.ndarray:
    """Posterior variance of the one-step target ``r + gamma * V_mean(s')`` per ``(t, s, a)``."""
    H = ensemble.horizon
    S, A = ensemble.num_states, ensemble.num_actions
    if mean_values.V.shape != (H + 1, S):
        raise ValueError(f"mean values have shape {mean_values.V.shape}, expected {(H + 1, S)}")
    u = np.zeros((H + 1, S, A))
    for t in range(H):
        q = ensemble.reward + gamma * mean_values.V[t + 1][ensemble.next_state]
        u[t] = q.var(axis=0)
    return u


def _propagate(source, mdp: FiniteMdp, policy: TabularPolicy, gamma: float):
    g2 = gamma * gamma
    out = np.zeros_like(source)
    for t in range(mdp.horizon - 1, -1, -1):
        out[t] = source[t] + g2 * (mdp.transition @ (policy.probs * out[t + 1]).sum(axis=1))
    return out


def solve_uncertainty_exact(u, mean: FiniteMdp, policy: TabularPolicy, gamma: float = 1.0) -> np.ndarray:
    """Backward solve of ``U[t] = u[t] + sum_{s',a'} pi P_mean U[t+1]`` with ``U[H] = 0``."""
    u = _check_table(u, mean, "u")
    return _propagate(u, mean, policy, gamma)


def solve_uncertainty_iterative(
    u_sequence: Iterable[np.ndarray],
    mean: FiniteMdp,
    policy: TabularPolicy,
    init: np.ndarray,
    gamma: float = 1.0,
) -> Iterator[np.ndarray]:
    """Synchronous sweeps ``U_{i+1}[t] = u_i[t] + pi P_mean U_i[t+1]``, yielding each ``U_{i+1}``.

    The final slice is pinned to zero on every iterate, so with a constant
    source the ``H``-th iterate equals the exact solve for any ``init``.
    """
    g2 = gamma * gamma
    U = _check_table(init, mean, "init").copy()
    U[-1] = 0.0
    for u_i in u_sequence:
        u_i = _check_table(u_i, mean, "u_i")
        W = (policy.probs[None] * U[1:]).sum(axis=2)  # (H, S)
        nxt = np.zeros_like(U)
        for t in range(mean.horizon):
            nxt[t] = u_i[t] + g2 * (mean.transition @ W[t])
        U = nxt
        yield U


def ube_bound(
    ensemble: PosteriorEnsemble,
    q_max: float | None = None,
    mean: FiniteMdp | None = None,
    policy: TabularPolicy | None = None,
    gamma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """The UBE local term ``nu`` and its propagated bound ``B``.

    ``nu = q_max**2 * sum_{s'} Var[P(s'|s,a)] / P_mean(s'|s,a) + Var[R(s,a)]``,
    summing only over ``s'`` with positive mean probability.
    """
    H = ensemble.horizon
    if q_max is None:
        q_max = H * ensemble.r_max
    if q_max <= 0:
        raise ValueError(f"q_max must be positive, got {q_max}")
    mean = mean or mean_mdp(ensemble)
    if policy is None:
        raise ValueError("policy is required")
    p_bar = mean.transition
    indicator_var = p_bar * (1.0 - p_bar)
    ratio = np.divide(indicator_var, p_bar, out=np.zeros_like(p_bar), where=p_bar > 0)
    local = q_max**2 * ratio.sum(axis=2) + ensemble.reward.var(axis=0)
    nu = np.zeros((H + 1, ensemble.num_states, ensemble.num_actions))
    nu[:H] = local
    return nu, _propagate(nu, mean, policy, gamma)


def uncertainty_tables(
    ensemble: PosteriorEnsemble,
    policy: TabularPolicy,
    q_max: float | None = None,
    gamma: float = 1.0,
    with_oracle: bool = True,
    convention=None,
) -> UncertaintyTables:
    mean = mean_mdp(ensemble)
    values = exact_values(mean, policy, gamma)
    u = local_uncertainty(ensemble, values, gamma)
    U = solve_uncertainty_exact(u, mean, policy, gamma)
    nu, B = ube_bound(ensemble, q_max, mean, policy, gamma)
    var = variance_of_q_oracle(ensemble, policy, convention, gamma) if with_oracle else None
    return UncertaintyTables(u=u, U=U, nu=nu, B=B, var_oracle=var)


def member_target_variance(member_rewards, member_next_values, gamma: float = 1.0) -> np.ndarray:
    """Population variance over the leading member axis of ``r_j + gamma * v_j``."""
    q = np.asarray(member_rewards) + gamma * np.asarray(member_next_values)
    return q.var(axis=0)


def accumulate_uncertainty(d, gamma: float = 1.0, lengths=None) -> np.ndarray:
    """``D[i] = d[i] + gamma**2 * D[i+1]`` along the last axis, zero past each length."""
    d = np.asarray(d, dtype=np.float64)
    flat = d.reshape(-1, d.shape[-1])
    if lengths is None:
        lengths = np.full(flat.shape[0], flat.shape[1], dtype=np.int64)
    D = kernels.discounted_reverse_cumsum(flat, gamma * gamma, np.asarray(lengths, dtype=np.int64).ravel())
    return D.reshape(d.shape)


def estimate_uncertainty_trajectory(
    value_fn, ensemble, trajectory: Trajectory, gamma: float = 1.0
) -> TrajectoryUncertainty:
    """Per-step uncertainty estimates along one trajectory.

    ``ensemble.member_predictions(states, actions)`` returns every member's next
    states and rewards; ``value_fn(states, steps)`` evaluates the mean-model
    value at 0-based time indices (the next states of step ``i`` sit at ``i + 1``).
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    L = len(trajectory)
    next_states, rewards = ensemble.member_predictions(trajectory.states, trajectory.actions)
    K = rewards.shape[0]
    steps = np.broadcast_to(np.arange(1, L + 1), (K, L))
    flat_states = np.asarray(next_states).reshape((K * L,) + np.shape(next_states)[2:])
    values = np.asarray(value_fn(flat_states, steps.reshape(-1)), dtype=np.float64).reshape(K, L)
    d = member_target_variance(rewards, values, gamma)
    D = accumulate_uncertainty(d[None], gamma)[0]
    return TrajectoryUncertainty(d=d, D=D, gamma=gamma)


class TabularValue:
    """Adapter exposing a ``(H+1, S)`` value table through the ``value_fn(states, steps)`` protocol."""

    def __init__(self, V: np.ndarray):
        self.V = np.asarray(V)

    def __call__(self, states, steps):
        return self.V[np.asarray(steps), np.asarray(states)]
