"""Reference environments.

* The two-member chain posterior used to compare the propagated bound with
  the UBE bound across horizons.
* The 2-D / 3-D point environments: ``s' = s + clip(a)``, ``r = -||s'||^2``.
* A wrapper adding Gaussian observation noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularPolicy, as_rng
from .posterior import IndependenceConvention, PosteriorEnsemble

CHAIN_TERMINAL = 0


def chain_state(i: int) -> int:
    """Table index of chain state ``s_i`` (index 0 is the terminal state ``s_t``)."""
    return i + 1


def build_chain_posterior(horizon: int, initial_state: int | None = None, convention="per-state") -> PosteriorEnsemble:
    """Two deterministic members over states ``{s_t, s_0, ..., s_H}`` and actions ``{a_0, a_1}``.

    Member 1 sends everything to ``s_t`` with reward 0. Member 2 moves
    ``s_i -> s_{i-1}`` with reward 1 under ``a_1`` for ``i > 0`` and otherwise
    behaves like member 1. The start state defaults to ``s_H``.
    """
    if horizon < 1:
        raise ValueError(f"chain horizon must be at least 1, got {horizon}")
    S = horizon + 2
    next_state = np.full((2, S, 2), CHAIN_TERMINAL, dtype=np.int64)
    reward = np.zeros((2, S, 2))
    for i in range(1, horizon + 1):
        next_state[1, chain_state(i), 1] = chain_state(i - 1)
        reward[1, chain_state(i), 1] = 1.0
    start = chain_state(horizon) if initial_state is None else int(initial_state)
    rho = np.zeros(S)
    rho[start] = 1.0
    return PosteriorEnsemble(
        next_state=next_state,
        reward=reward,
        horizon=horizon,
        initial_dist=rho,
        terminal_state=CHAIN_TERMINAL,
        convention=IndependenceConvention(convention),
    )


def uniform_policy(ensemble: PosteriorEnsemble) -> TabularPolicy:
    return TabularPolicy.uniform(ensemble.num_states, ensemble.num_actions)


def point_reward(s, a, s_next) -> np.ndarray:
    return -np.sum(np.asarray(s_next) ** 2, axis=-1)


@dataclass
class PointEnv:
    dim: int = 2
    horizon: int = 30
    action_bound: float = 0.1
    init_low: float = -2.0
    init_high: float = 2.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"point environment dimension must be 2 or 3, got {self.dim}")

    @property
    def state_dim(self) -> int:
        return self.dim

    @property
    def action_dim(self) -> int:
        return self.dim

    def reset(self, rng, n: int) -> np.ndarray:
        return as_rng(rng).uniform(self.init_low, self.init_high, size=(n, self.dim))

    def clip_action(self, a) -> np.ndarray:
        return np.clip(a, -self.action_bound, self.action_bound)

    def reward(self, s, a, s_next) -> np.ndarray:
        return point_reward(s, a, s_next)

    def step(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        s_next = s + self.clip_action(a)
        return s_next, self.reward(s, a, s_next)

    def observe(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64)


def point_step(env: PointEnv, s, a):
    return env.step(s, a)


@dataclass
class NoisyObservation:
    """Adds ``N(0, sigma^2)`` noise per coordinate to observations; dynamics are untouched."""

    env: PointEnv
    sigma: float
    seed: int | None = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise scale must be nonnegative, got {self.sigma}")
        self._rng = as_rng(self.seed)

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, rng, n):
        return self.env.reset(rng, n)

    def step(self, s, a):
        return self.env.step(s, a)

    def observe(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if self.sigma == 0:
            return states.copy()
        return states + self._rng.normal(0.0, self.sigma, size=states.shape)


def wrap_noisy(env: PointEnv, sigma: float, seed=0) -> NoisyObservation:
    return NoisyObservation(env, sigma, seed)


def make_env(name: str, horizon: int = 30, noise_sigma: float = 0.0, seed=0):
    dims = {"point2d": 2, "point3d": 3}
    if name not in dims:
        raise ValueError(f"unknown environment {name!r}; expected one of {sorted(dims)}")
    env = PointEnv(dim=dims[name], horizon=horizon)
    return wrap_noisy(env, noise_sigma, seed) if noise_sigma > 0 else env
