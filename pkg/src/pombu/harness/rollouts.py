"""Batched rollouts in the real point environments and in the mean model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import EnsemblePosterior, TransitionDataset
from ..policy import advantage_estimates
from ..uncertainty import accumulate_uncertainty, member_target_variance


@dataclass
class Rollouts:
    """``n`` trajectories of fixed length ``H``; ``states`` has ``H + 1`` entries per row.

    For model rollouts ``member_next``/``member_rewards`` hold every member's
    prediction at each visited pair, shaped ``(K, n, H, ...)``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    member_next: np.ndarray | None = None
    member_rewards: np.ndarray | None = None

    @property
    def num_trajectories(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        return self.rewards @ (gamma ** np.arange(self.horizon))

    def flat_states(self) -> np.ndarray:
        return self.states[:, :-1].reshape(-1, self.states.shape[-1])

    def flat_actions(self) -> np.ndarray:
        return self.actions.reshape(-1, self.actions.shape[-1])

    def flat_steps(self) -> np.ndarray:
        return np.tile(np.arange(self.horizon), self.num_trajectories)

    def transitions(self, clip) -> TransitionDataset:
        return TransitionDataset(self.flat_states(), clip(self.flat_actions()), self.states[:, 1:].reshape(-1, self.states.shape[-1]))


def real_rollouts(env, policy, n: int, rng, deterministic: bool = False) -> Rollouts:
    """Run ``policy`` on observations of ``env``; stored states are what the agent observes."""
    H = env.horizon
    s = env.reset(rng, n)
    obs = [env.observe(s)]
    actions, rewards = [], []
    for _ in range(H):
        a = policy.mean(obs[-1]) if deterministic else policy.sample(obs[-1], rng)
        s, r = env.step(s, a)
        obs.append(env.observe(s))
        actions.append(a)
        rewards.append(r)
    return Rollouts(np.stack(obs, axis=1), np.stack(actions, axis=1), np.stack(rewards, axis=1))


def model_rollouts(posterior: EnsemblePosterior, policy, start_states, horizon: int, rng, first_actions=None, deterministic=False) -> Rollouts:
    """Rollouts in the mean model: at every step a member is drawn uniformly at random.

    ``first_actions`` fixes the action at the first step (for Q-value estimates).
    """
    s = np.asarray(start_states, dtype=np.float64)
    n = len(s)
    K = posterior.num_members
    states, actions, rewards, m_next, m_rew = [s], [], [], [], []
    rows = np.arange(n)
    for t in range(horizon):
        if t == 0 and first_actions is not None:
            a = np.asarray(first_actions, dtype=np.float64)
        else:
            a = policy.mean(s) if deterministic else policy.sample(s, rng)
        nxt, rew = posterior.member_predictions(s, a)
        pick = rng.integers(K, size=n)
        s = nxt[pick, rows]
        states.append(s)
        actions.append(a)
        rewards.append(rew[pick, rows])
        m_next.append(nxt)
        m_rew.append(rew)
    return Rollouts(
        np.stack(states, axis=1),
        np.stack(actions, axis=1),
        np.stack(rewards, axis=1),
        np.stack(m_next, axis=2),
        np.stack(m_rew, axis=2),
    )


def trajectory_uncertainty(rollouts: Rollouts, value_fn, gamma: float = 1.0) -> np.ndarray:
    """Per-step ``D`` along each model rollout, from the stored member predictions."""
    K, n, H = rollouts.member_rewards.shape
    dim = rollouts.member_next.shape[-1]
    steps = np.broadcast_to(np.arange(1, H + 1), (K, n, H)).reshape(-1)
    values = value_fn(rollouts.member_next.reshape(-1, dim), steps).reshape(K, n, H)
    d = member_target_variance(rollouts.member_rewards, values, gamma)
    return accumulate_uncertainty(d, gamma)


def baseline_advantages(rollouts: Rollouts, value_fn, gamma: float = 1.0) -> np.ndarray:
    baseline = value_fn(rollouts.flat_states(), rollouts.flat_steps()).reshape(rollouts.rewards.shape)
    return advantage_estimates(rollouts.rewards, baseline, None, gamma)


def returns_to_go(rollouts: Rollouts, gamma: float = 1.0) -> np.ndarray:
    return advantage_estimates(rollouts.rewards, np.zeros_like(rollouts.rewards), None, gamma)
