"""Posterior over MDPs induced by an ensemble of deterministic tabular models.

Each member maps ``(s, a)`` to ``(s', r)``; members are weighted uniformly.
The exact-enumeration oracle assigns one member per independent row, where a
row is a whole state (per-state convention) or a single state-action pair.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .mdp import FiniteMdp, TabularPolicy, Trajectory, as_rng, backward_induction, safe_cdf

DEFAULT_ENUMERATION_CAP = 2**20


class IndependenceConvention(str, enum.Enum):
    PER_STATE = "per-state"
    PER_STATE_ACTION = "per-state-action"


class EnumerationCapExceeded(ValueError):
    def __init__(self, required: int, cap: int):
        super().__init__(f"enumeration needs {required} MDPs, above the cap of {cap}")
        self.required = required
        self.cap = cap


@dataclass
class PosteriorEnsemble:
    next_state: np.ndarray  # (K, S, A) int
    reward: np.ndarray  # (K, S, A)
    horizon: int
    initial_dist: np.ndarray
    terminal_state: int | None = None
    convention: IndependenceConvention = IndependenceConvention.PER_STATE

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        self.convention = IndependenceConvention(self.convention)
        if self.next_state.ndim != 3 or self.next_state.shape != self.reward.shape:
            raise ValueError(
                f"member tables must share shape (K, S, A); got {self.next_state.shape} "
                f"and {self.reward.shape}"
            )
        K, S, _ = self.next_state.shape
        if K < 1:
            raise ValueError("ensemble needs at least one member")
        if (self.next_state < 0).any() or (self.next_state >= S).any():
            raise ValueError("member next-state index out of range")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}")

    @property
    def num_members(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_states(self) -> int:
        return self.next_state.shape[1]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[2]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.reward).max())

    def member_predictions(self, states, actions):
        """All members' ``(next_states, rewards)``, each shaped ``(K,) + states.shape``."""
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        return self.next_state[:, states, actions], self.reward[:, states, actions]

    def to_dict(self) -> dict:
        members = [
            {"transitions": np.stack([self.next_state[k], self.reward[k]], axis=-1).tolist()}
            for k in range(self.num_members)
        ]
        return {
            "members": members,
            "convention": self.convention.value,
            "horizon": self.horizon,
            "initial_dist": self.initial_dist.tolist(),
            "terminal_state": self.terminal_state,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PosteriorEnsemble":
        tables = [np.asarray(m["transitions"], dtype=np.float64) for m in doc["members"]]
        shapes = {t.shape for t in tables}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent member shapes: {sorted(shapes)}")
        stacked = np.stack(tables)
        next_state = stacked[..., 0]
        if not np.array_equal(next_state, np.round(next_state)):
            raise ValueError("member next states must be integers")
        return cls(
            next_state=next_state.astype(np.int64),
            reward=stacked[..., 1],
            horizon=doc["horizon"],
            initial_dist=doc["initial_dist"],
            terminal_state=doc.get("terminal_state"),
            convention=doc.get("convention", IndependenceConvention.PER_STATE.value),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PosteriorEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mean_mdp(ensemble: PosteriorEnsemble) -> FiniteMdp:
    """The MDP whose transition and reward tables are the posterior means."""
    K, S, A = ensemble.next_state.shape
    P = np.zeros((S, A, S))
    s_idx, a_idx = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
    for k in range(K):
        np.add.at(P, (s_idx, a_idx, ensemble.next_state[k]), 1.0)
    return FiniteMdp(
        transition=P / K,
        reward=ensemble.reward.mean(axis=0),
        initial_dist=ensemble.initial_dist,
        horizon=ensemble.horizon,
        terminal_state=ensemble.terminal_state,
        r_max=ensemble.r_max,
    )


def independent_rows(ensemble: PosteriorEnsemble, convention=None) -> tuple[np.ndarray, int]:
    """Map each ``(s, a)`` to its independent row index; terminal cells map to -1."""
    convention = IndependenceConvention(convention or ensemble.convention)
    S, A = ensemble.num_states, ensemble.num_actions
    row_of = np.full((S, A), -1, dtype=np.int64)
    r = 0
    for s in range(S):
        if s == ensemble.terminal_state:
            continue
        if convention is IndependenceConvention.PER_STATE:
            row_of[s, :] = r
            r += 1
        else:
            row_of[s, :] = np.arange(r, r + A)
            r += A
    return row_of, r


def enumeration_size(ensemble: PosteriorEnsemble, convention=None) -> int:
    _, n_rows = independent_rows(ensemble, convention)
    return ensemble.num_members**n_rows


def _check_cap(ensemble, convention, cap):
    required = enumeration_size(ensemble, convention)
    if required > cap:
        raise EnumerationCapExceeded(required, cap)
    return required


def iter_assignments(ensemble: PosteriorEnsemble, convention=None, cap: int = DEFAULT_ENUMERATION_CAP):
    """Yield ``(member_choice[S, A], probability)`` for every joint assignment."""
    total = _check_cap(ensemble, convention, cap)
    row_of, n_rows = independent_rows(ensemble, convention)
    K = ensemble.num_members
    for n in range(total):
        digits = [(n // K**r) % K for r in range(n_rows)]
        choice = np.array([[0 if r < 0 else digits[r] for r in row] for row in row_of], dtype=np.int64)
        yield choice, 1.0 / total


def _assignment_mdp(ensemble: PosteriorEnsemble, choice: np.ndarray) -> FiniteMdp:
    S, A = ensemble.num_states, ensemble.num_actions
    s_idx, a_idx = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
    P = np.zeros((S, A, S))
    P[s_idx, a_idx, ensemble.next_state[choice, s_idx, a_idx]] = 1.0
    return FiniteMdp(
        transition=P,
        reward=ensemble.reward[choice, s_idx, a_idx],
        initial_dist=ensemble.initial_dist,
        horizon=ensemble.horizon,
        terminal_state=ensemble.terminal_state,
        r_max=ensemble.r_max,
    )


def enumerate_posterior(
    ensemble: PosteriorEnsemble, convention=None, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[tuple[FiniteMdp, float]]:
    """Every MDP in the posterior's support with its probability."""
    return [(_assignment_mdp(ensemble, c), p) for c, p in iter_assignments(ensemble, convention, cap)]


def q_moments_oracle(
    ensemble: PosteriorEnsemble,
    policy: TabularPolicy,
    convention=None,
    gamma: float = 1.0,
    cap: int = DEFAULT_ENUMERATION_CAP,
    backend=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior mean and variance of ``Q`` by exhaustive enumeration.

    Returns two ``(H+1, S, A)`` tables with zero final slices. Moments are
    accumulated around the mean-MDP Q-values to limit cancellation.
    """
    _check_cap(ensemble, convention, cap)
    row_of, n_rows = independent_rows(ensemble, convention)
    mean = mean_mdp(ensemble)
    _, shift = backward_induction(mean.transition, mean.reward, policy.probs, ensemble.horizon, gamma)
    impl = backend or kernels
    m, v = impl.enum_q_moments(
        ensemble.next_state,
        ensemble.reward,
        row_of,
        n_rows,
        np.ascontiguousarray(policy.probs),
        ensemble.horizon,
        float(gamma),
        np.ascontiguousarray(shift[:-1]),
    )
    S, A = ensemble.num_states, ensemble.num_actions
    zero = np.zeros((1, S, A))
    return np.concatenate([m, zero]), np.concatenate([np.maximum(v, 0.0), zero])


def variance_of_q_oracle(
    ensemble: PosteriorEnsemble,
    policy: TabularPolicy,
    convention=None,
    gamma: float = 1.0,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> np.ndarray:
    return q_moments_oracle(ensemble, policy, convention, gamma, cap)[1]


def sample_member_per_step(ensemble: PosteriorEnsemble, policy: TabularPolicy, seed=None) -> Trajectory:
    """Roll out one episode, drawing a fresh member uniformly at every step."""
    rng = as_rng(seed)
    pi_cdf = safe_cdf(policy.probs)
    s = int(np.searchsorted(safe_cdf(ensemble.initial_dist), rng.random(), side="right"))
    states, actions, rewards, nexts = [], [], [], []
    for _ in range(ensemble.horizon):
        if s == ensemble.terminal_state:
            break
        a = int(min(np.searchsorted(pi_cdf[s], rng.random(), side="right"), ensemble.num_actions - 1))
        k = int(rng.integers(ensemble.num_members))
        s2 = int(ensemble.next_state[k, s, a])
        states.append(s)
        actions.append(a)
        rewards.append(float(ensemble.reward[k, s, a]))
        nexts.append(s2)
        s = s2
    return Trajectory(
        np.array(states, dtype=np.int64),
        np.array(actions, dtype=np.int64),
        np.array(rewards),
        np.array(nexts, dtype=np.int64),
    )


def is_acyclic(ensemble: PosteriorEnsemble) -> bool:
    """True if no member-reachable cycle exists outside the terminal self-loop."""
    S = ensemble.num_states
    adj = [set() for _ in range(S)]
    for k in range(ensemble.num_members):
        for s in range(S):
            if s == ensemble.terminal_state:
                continue
            adj[s].update(int(x) for x in ensemble.next_state[k, s])
    colour = [0] * S

    def visit(u) -> bool:
        colour[u] = 1
        for w in adj[u]:
            if colour[w] == 1:
                return False
            if colour[w] == 0 and not visit(w):
                return False
        colour[u] = 2
        return True

    return all(colour[s] != 0 or visit(s) for s in range(S))
