"""Finite-horizon tabular MDPs: validation, backward induction and rollouts.

Time-indexed tables use 0-based slices: ``Q[t]`` holds the values at time
step ``t + 1`` and the final slice ``Q[H]`` is identically zero.
Trajectories record 1-based step indices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

STOCHASTIC_TOL = 1e-9


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class FiniteMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    horizon: int
    terminal_state: int | None = None
    r_max: float | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        self.horizon = int(self.horizon)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        S, A, _ = self.transition.shape
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {self.reward.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {self.initial_dist.shape}")
        if self.r_max is None:
            self.r_max = float(np.abs(self.reward).max()) if self.reward.size else 0.0

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal_state": self.terminal_state,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FiniteMdp":
        mdp = cls(
            transition=doc["transition"],
            reward=doc["reward"],
            initial_dist=doc["initial_dist"],
            horizon=doc["horizon"],
            terminal_state=doc.get("terminal_state"),
            r_max=doc.get("r_max"),
        )
        for key, actual in (("num_states", mdp.num_states), ("num_actions", mdp.num_actions)):
            if key in doc and doc[key] != actual:
                raise ValueError(f"{key}={doc[key]} disagrees with table shape ({actual})")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FiniteMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TabularPolicy:
    probs: np.ndarray  # (S, A)
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {self.probs.shape}")

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        logits = np.asarray(logits, dtype=np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return cls(p / p.sum(axis=1, keepdims=True), logits=logits.copy())

    def violations(self) -> list[str]:
        out = []
        if (self.probs < 0).any():
            out.append("policy has negative probabilities")
        sums = self.probs.sum(axis=1)
        for s in np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL):
            out.append(f"policy row sum {sums[s]:.6g} ≠ 1 at s={s}")
        return out


@dataclass
class Trajectory:
    """One episode. Arrays are aligned per step; ``states[i]`` is visited at step ``i + 1``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def steps(self) -> list[tuple]:
        return [
            (i + 1, self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i])
            for i in range(len(self))
        ]


@dataclass
class ValueTables:
    V: np.ndarray  # (H+1, S)
    Q: np.ndarray  # (H+1, S, A)
    A: np.ndarray = field(init=False)

    def __post_init__(self):
        self.A = self.Q - self.V[:, :, None]


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "pass" if self.ok else "; ".join(self.violations)


def validate_mdp(mdp: FiniteMdp) -> ValidationReport:
    """Check the stochastic-matrix, reward-bound and terminal-state invariants."""
    problems = []
    P, R, rho = mdp.transition, mdp.reward, mdp.initial_dist
    S, A = mdp.num_states, mdp.num_actions
    if mdp.horizon < 1:
        problems.append(f"horizon {mdp.horizon} < 1")
    for s, a, s2 in zip(*np.nonzero(P < 0)):
        problems.append(f"negative probability {P[s, a, s2]:.6g} at (s={s},a={a},s'={s2})")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)):
        problems.append(f"row sum {sums[s, a]:.6g} ≠ 1 at (s={s},a={a})")
    if (rho < 0).any():
        problems.append("initial distribution has negative entries")
    if abs(rho.sum() - 1.0) > STOCHASTIC_TOL:
        problems.append(f"initial distribution sums to {rho.sum():.6g}")
    if not np.isfinite(R).all():
        problems.append("reward table has non-finite entries")
    elif (np.abs(R) > mdp.r_max + STOCHASTIC_TOL).any():
        problems.append(f"|reward| exceeds declared r_max {mdp.r_max:.6g}")
    t = mdp.terminal_state
    if t is not None:
        if not 0 <= t < S:
            problems.append(f"terminal state {t} out of range")
        else:
            for a in range(A):
                if abs(P[t, a, t] - 1.0) > STOCHASTIC_TOL:
                    problems.append(f"terminal state {t} is not absorbing under a={a}")
                if R[t, a] != 0.0:
                    problems.append(f"terminal state {t} has nonzero reward under a={a}")
    return ValidationReport(problems)


def _check_policy(mdp: FiniteMdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )


def backward_induction(P, R, pi, horizon, gamma=1.0):
    """Time-indexed policy evaluation returning ``(V, Q)`` with zero final slices."""
    S, A = R.shape
    V = np.zeros((horizon + 1, S))
    Q = np.zeros((horizon + 1, S, A))
    for t in range(horizon - 1, -1, -1):
        Q[t] = R + gamma * (P @ V[t + 1])
        V[t] = (pi * Q[t]).sum(axis=1)
    return V, Q


def exact_values(mdp: FiniteMdp, policy: TabularPolicy, gamma: float = 1.0) -> ValueTables:
    _check_policy(mdp, policy)
    V, Q = backward_induction(mdp.transition, mdp.reward, policy.probs, mdp.horizon, gamma)
    return ValueTables(V=V, Q=Q)


def expected_return(mdp: FiniteMdp, policy: TabularPolicy, gamma: float = 1.0) -> float:
    return float(mdp.initial_dist @ exact_values(mdp, policy, gamma).V[0])


def occupancy(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    """State distribution ``d[t, s]`` at each time step (absorbing states keep their mass)."""
    _check_policy(mdp, policy)
    d = np.zeros((mdp.horizon, mdp.num_states))
    d[0] = mdp.initial_dist
    step = np.einsum("sa,sap->sp", policy.probs, mdp.transition)
    for t in range(1, mdp.horizon):
        d[t] = d[t - 1] @ step
    return d


def safe_cdf(probs: np.ndarray) -> np.ndarray:
    """Cumulative sums along the last axis, pinned to exactly 1 from the last positive entry on."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs, axis=-1)
    positive = probs > 0
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    cols = np.arange(probs.shape[-1])
    cdf[cols >= last[..., None]] = 1.0
    return cdf


@dataclass
class TabularRollouts:
    """Batch of tabular trajectories padded to the horizon (padding: index -1, reward 0)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    def trajectory(self, i: int) -> Trajectory:
        n = self.lengths[i]
        return Trajectory(
            self.states[i, :n].copy(),
            self.actions[i, :n].copy(),
            self.rewards[i, :n].copy(),
            self.next_states[i, :n].copy(),
        )

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        return kernels.discounted_reverse_cumsum(self.rewards, gamma, self.lengths)


def sample_trajectories(mdp: FiniteMdp, policy: TabularPolicy, n: int, seed=None, backend=None) -> TabularRollouts:
    """Sample ``n`` trajectories; a trajectory ends early when it enters the terminal state."""
    _check_policy(mdp, policy)
    rng = as_rng(seed)
    H = mdp.horizon
    u = rng.random((n, 2 * H + 1))
    impl = backend or kernels
    terminal = -1 if mdp.terminal_state is None else int(mdp.terminal_state)
    out = impl.sample_tabular(
        safe_cdf(mdp.initial_dist),
        safe_cdf(policy.probs),
        safe_cdf(mdp.transition),
        mdp.reward,
        H,
        terminal,
        np.ascontiguousarray(u[:, 0]),
        np.ascontiguousarray(u[:, 1 : H + 1]),
        np.ascontiguousarray(u[:, H + 1 :]),
    )
    return TabularRollouts(*out)


def sample_trajectory(mdp: FiniteMdp, policy: TabularPolicy, seed=None) -> Trajectory:
    return sample_trajectories(mdp, policy, 1, seed).trajectory(0)
