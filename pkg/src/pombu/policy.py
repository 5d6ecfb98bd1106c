"""Policies, surrogate objectives and the conservative policy update.

All objectives are averages over trajectories of per-step sums, evaluated on
a :class:`SurrogateBatch` collected under the old policy. Each objective is
expressed through its derivative with respect to the new log-probabilities,
so one ``grad_log_prob`` routine serves every policy class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .approx import AdamState, DiffFunction, adam_step
from .mdp import FiniteMdp, TabularPolicy, as_rng, exact_values, occupancy

_LOG_2PI = math.log(2.0 * math.pi)


class TabularSoftmaxPolicy:
    def __init__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        self.shape = logits.shape
        self.params = logits.ravel().copy()

    @property
    def logits(self) -> np.ndarray:
        return self.params.reshape(self.shape)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def set_params(self, flat) -> None:
        self.params = np.asarray(flat, dtype=np.float64).copy()

    def copy(self) -> "TabularSoftmaxPolicy":
        return TabularSoftmaxPolicy(self.logits.copy())

    def as_tabular(self) -> TabularPolicy:
        return TabularPolicy(self.probs, logits=self.logits.copy())

    def log_prob(self, states, actions) -> np.ndarray:
        z = self.logits
        lse = np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1)) + z.max(axis=1)
        states = np.asarray(states, dtype=np.int64)
        return z[states, np.asarray(actions, dtype=np.int64)] - lse[states]

    def grad_log_prob(self, states, actions, weights) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        g = np.zeros(self.shape)
        np.add.at(g, (states, actions), w)
        np.add.at(g, states, -w[:, None] * self.probs[states])
        return g.ravel()

    def entropy(self, states) -> float:
        p = self.probs[np.asarray(states, dtype=np.int64)]
        return float(-(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1).mean())

    def sample(self, states, rng) -> np.ndarray:
        rng = as_rng(rng)
        p = self.probs[np.asarray(states, dtype=np.int64)]
        u = rng.random(len(p))
        return np.minimum((u[:, None] >= np.cumsum(p, axis=1)).sum(axis=1), self.shape[1] - 1)


class GaussianPolicy:
    """Diagonal Gaussian with a network mean and a free log-std vector."""

    def __init__(self, mean_net: DiffFunction, log_std, action_bound: float | None = None):
        self.mean_net = mean_net
        self.log_std = np.asarray(log_std, dtype=np.float64).copy()
        if self.log_std.shape != (mean_net.output_dim,):
            raise ValueError("log_std must have one entry per action dimension")
        self.action_bound = action_bound

    @classmethod
    def build(cls, state_dim, action_dim, hidden=(64, 64), init_std=0.05, action_bound=None, seed=0) -> "GaussianPolicy":
        net = DiffFunction([state_dim, *hidden, action_dim], "tanh", seed=seed, output_scale=0.01)
        return cls(net, np.full(action_dim, math.log(init_std)), action_bound)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.mean_net.params, self.log_std])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        n = self.mean_net.num_params
        self.mean_net.set_params(flat[:n])
        self.log_std = flat[n:].copy()

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_net.copy(), self.log_std.copy(), self.action_bound)

    def mean(self, states) -> np.ndarray:
        mu = self.mean_net(np.asarray(states, dtype=np.float64))
        if not np.isfinite(mu).all():
            raise FloatingPointError("policy mean is not finite")
        return mu

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        z = (np.asarray(actions, dtype=np.float64) - mu) / np.exp(self.log_std)
        return -0.5 * (z * z).sum(axis=-1) - self.log_std.sum() - 0.5 * len(self.log_std) * _LOG_2PI

    def grad_log_prob(self, states, actions, weights) -> np.ndarray:
        mu, cache = self.mean_net.forward_cached(np.asarray(states, dtype=np.float64))
        w = np.asarray(weights, dtype=np.float64)[:, None]
        inv_var = np.exp(-2.0 * self.log_std)
        diff = np.asarray(actions, dtype=np.float64) - mu
        g_net = self.mean_net.backward_cached(cache, w * diff * inv_var)
        g_log_std = (w * (diff * diff * inv_var - 1.0)).sum(axis=0)
        return np.concatenate([g_net, g_log_std])

    def entropy(self, states=None) -> float:
        return float((self.log_std + 0.5 * (_LOG_2PI + 1.0)).sum())

    def to_dict(self) -> dict:
        return {"mean_net": self.mean_net.to_dict(), "log_std": self.log_std.tolist(), "action_bound": self.action_bound}

    @classmethod
    def from_dict(cls, doc) -> "GaussianPolicy":
        return cls(DiffFunction.from_dict(doc["mean_net"]), doc["log_std"], doc.get("action_bound"))

    def sample(self, states, rng) -> np.ndarray:
        mu = self.mean(states)
        return mu + np.exp(self.log_std) * as_rng(rng).standard_normal(mu.shape)


def action_log_density(policy, state, action) -> float:
    return float(policy.log_prob(np.atleast_2d(state), np.atleast_2d(action))[0])


def sample_action(policy, state, seed=None) -> np.ndarray:
    return policy.sample(np.atleast_2d(state), as_rng(seed))[0]


@dataclass
class SurrogateBatch:
    states: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    sqrt_d: np.ndarray | None = None
    steps: np.ndarray | None = None
    num_trajectories: float | None = None
    policy_id: str = ""

    def __post_init__(self):
        self.old_log_prob = np.asarray(self.old_log_prob, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        n = len(self.advantages)
        if len(self.old_log_prob) != n:
            raise ValueError("old log-probabilities and advantages differ in length")
        if not np.isfinite(self.old_log_prob).all():
            raise ValueError("old action probabilities must be positive")
        if not np.isfinite(self.advantages).all():
            raise ValueError("advantages must be finite")
        if self.sqrt_d is not None:
            self.sqrt_d = np.asarray(self.sqrt_d, dtype=np.float64)
            if len(self.sqrt_d) != n or (self.sqrt_d < 0).any() or not np.isfinite(self.sqrt_d).all():
                raise ValueError("uncertainty weights must be finite and nonnegative")
        if self.num_trajectories is None:
            self.num_trajectories = float(n)

    def __len__(self) -> int:
        return len(self.advantages)

    def subset(self, idx) -> "SurrogateBatch":
        idx = np.asarray(idx)
        pick = lambda x: None if x is None else np.asarray(x)[idx]  # noqa: E731
        return SurrogateBatch(
            states=np.asarray(self.states)[idx],
            actions=np.asarray(self.actions)[idx],
            old_log_prob=self.old_log_prob[idx],
            advantages=self.advantages[idx],
            sqrt_d=pick(self.sqrt_d),
            steps=pick(self.steps),
            num_trajectories=self.num_trajectories * len(idx) / len(self),
            policy_id=self.policy_id,
        )


def _ratios(batch: SurrogateBatch, policy) -> np.ndarray:
    return np.exp(policy.log_prob(batch.states, batch.actions) - batch.old_log_prob)


def _require_sqrt_d(batch):
    if batch.sqrt_d is None:
        raise ValueError("batch has no uncertainty annotations")
    return batch.sqrt_d


def _clip_terms(r, adv, eps, n):
    positive = adv > 0
    r_hat = np.where(positive, np.minimum(1.0 + eps, r), np.maximum(1.0 - eps, r))
    passes = np.where(positive, r < 1.0 + eps, r > 1.0 - eps)
    return float((r_hat * adv).sum() / n), np.where(passes, r * adv, 0.0) / n


def _std_terms(r, sqrt_d, n):
    return float((np.abs(r - 1.0) * sqrt_d).sum() / n), np.sign(r - 1.0) * sqrt_d * r / n


OBJECTIVES = ("sr", "clip", "std", "conservative", "exploration")


def objective_terms(batch: SurrogateBatch, policy, kind: str, alpha=0.0, beta=0.0, eps=0.15):
    """Objective value and its derivative with respect to each record's new log-probability."""
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}")
    if eps <= 0:
        raise ValueError("clip radius must be positive")
    r = _ratios(batch, policy)
    n = batch.num_trajectories
    adv = batch.advantages
    if kind == "sr":
        return float((r * adv).sum() / n), r * adv / n
    if kind == "std":
        return _std_terms(r, _require_sqrt_d(batch), n)
    if kind == "exploration" and beta != 0:
        adv = adv + beta * _require_sqrt_d(batch)
    value, dlogp = _clip_terms(r, adv, eps, n)
    if kind == "conservative" and alpha != 0:
        pen, dpen = _std_terms(r, _require_sqrt_d(batch), n)
        value, dlogp = value - alpha * pen, dlogp - alpha * dpen
    return value, dlogp


def objective_gradient(batch: SurrogateBatch, policy, kind: str, alpha=0.0, beta=0.0, eps=0.15):
    value, dlogp = objective_terms(batch, policy, kind, alpha, beta, eps)
    return value, policy.grad_log_prob(batch.states, batch.actions, dlogp)


def surrogate_sr(batch: SurrogateBatch, policy) -> float:
    return objective_terms(batch, policy, "sr")[0]


def surrogate_clip(batch: SurrogateBatch, policy, eps: float = 0.15) -> float:
    return objective_terms(batch, policy, "clip", eps=eps)[0]


def surrogate_std(batch: SurrogateBatch, policy) -> float:
    return objective_terms(batch, policy, "std")[0]


def conservative_objective(batch: SurrogateBatch, policy, alpha: float = 0.5, eps: float = 0.15) -> float:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return objective_terms(batch, policy, "conservative", alpha=alpha, eps=eps)[0]


def exploration_objective(batch: SurrogateBatch, policy, beta: float = 10.0, eps: float = 0.15) -> float:
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return objective_terms(batch, policy, "exploration", beta=beta, eps=eps)[0]


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def improvement_probability(expected_gain: float, gain_std: float) -> float:
    """``F(expected_gain / gain_std)``, with 0.5 when the spread vanishes."""
    if gain_std <= 0:
        return 0.5
    return normal_cdf(expected_gain / gain_std)


def prob_improvement(batch: SurrogateBatch, policy) -> float:
    """Normal-approximation probability that the new policy beats the old one.

    The expected gain is estimated by ``mean sum (r - 1) * A``, which has the
    same expectation as the ratio-weighted surrogate and vanishes at the old
    policy.
    """
    r = _ratios(batch, policy)
    gain = float(((r - 1.0) * batch.advantages).sum() / batch.num_trajectories)
    spread = float((np.abs(r - 1.0) * _require_sqrt_d(batch)).sum() / batch.num_trajectories)
    return improvement_probability(gain, spread)


def returns_to_go(rewards, lengths=None, gamma: float = 1.0) -> np.ndarray:
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if lengths is None:
        lengths = np.full(len(rewards), rewards.shape[1], dtype=np.int64)
    return kernels.discounted_reverse_cumsum(rewards, gamma, np.asarray(lengths, dtype=np.int64))


def advantage_estimates(rewards, baseline, lengths=None, gamma: float = 1.0) -> np.ndarray:
    """Monte-Carlo return-to-go minus the baseline value at each visited step (zero past each length)."""
    rtg = returns_to_go(rewards, lengths, gamma)
    baseline = np.atleast_2d(np.asarray(baseline, dtype=np.float64))
    adv = rtg - baseline
    if lengths is not None:
        adv[np.arange(adv.shape[1])[None, :] >= np.asarray(lengths)[:, None]] = 0.0
    return adv


def exact_surrogate(mdp: FiniteMdp, old: TabularPolicy, new_probs) -> float:
    """Expectation of the ratio-weighted surrogate under the old policy, computed exactly."""
    d = occupancy(mdp, old)
    A = exact_values(mdp, old).A[:-1]
    return float(np.einsum("ts,sa,tsa->", d, np.asarray(new_probs), A))


def exact_surrogate_gradient(mdp: FiniteMdp, old: TabularPolicy, logits) -> np.ndarray:
    """Gradient of :func:`exact_surrogate` with respect to softmax logits of the new policy."""
    d = occupancy(mdp, old)
    A = exact_values(mdp, old).A[:-1]
    p = TabularPolicy.from_logits(logits).probs
    centred = A - np.einsum("sa,tsa->ts", p, A)[:, :, None]
    return np.einsum("ts,sa,tsa->sa", d, p, centred)


@dataclass
class OptimConfig:
    alpha: float = 0.5
    beta: float = 10.0
    epsilon: float = 0.15
    epochs: int = 10
    minibatch_size: int = 500
    learning_rate: float = 3e-4
    lr_schedule: str = "linear"
    lr_final_fraction: float = 0.1
    num_exploration_policies: int = 4

    def validate(self) -> list[str]:
        errors = []
        if self.alpha < 0:
            errors.append("alpha must be >= 0")
        if self.beta < 0:
            errors.append("beta must be >= 0")
        if self.epsilon <= 0:
            errors.append("epsilon must be > 0")
        if self.epochs < 1 or self.minibatch_size < 1 or self.num_exploration_policies < 1:
            errors.append("epochs, minibatch_size and num_exploration_policies must be >= 1")
        if self.learning_rate < 0:
            errors.append("learning_rate must be >= 0")
        if self.lr_schedule not in ("constant", "linear"):
            errors.append("lr_schedule must be 'constant' or 'linear'")
        return errors

    def learning_rate_at(self, iteration: int, total: int) -> float:
        if self.lr_schedule == "constant" or total <= 1:
            return self.learning_rate
        frac = min(iteration, total - 1) / (total - 1)
        return self.learning_rate * (1.0 - (1.0 - self.lr_final_fraction) * frac)


@dataclass
class UpdateDiagnostics:
    entropy: float
    kl: float
    penalty: float
    p_improve: float
    objective_before: float
    objective_after: float
    steps: int
    aborted: bool = False
    message: str = ""
    history: list[float] = field(default_factory=list)


def optimize_policy(policy, batch: SurrogateBatch, config: OptimConfig, objective: str = "conservative", learning_rate=None, seed=0):
    """Minibatch Adam ascent on the chosen objective; returns ``(new_policy, diagnostics)``.

    ``objective`` is ``"conservative"`` (clip minus ``alpha`` times the
    penalty), ``"exploration"`` (clip on advantages plus ``beta * sqrt(D)``) or
    ``"clip"``. The input policy is never modified; on a non-finite objective the
    returned policy carries the old parameters.
    """
    if objective not in ("conservative", "exploration", "clip"):
        raise ValueError(f"unsupported objective {objective!r}")
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    lr = config.learning_rate if learning_rate is None else learning_rate
    rng = as_rng(seed)
    new = policy.copy()
    kw = dict(alpha=config.alpha, beta=config.beta, eps=config.epsilon)
    start_value = objective_terms(batch, new, objective, **kw)[0]
    adam = AdamState.zeros(len(new.params))
    history = []
    steps = 0
    aborted, message = False, ""
    n = len(batch)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            mb = batch.subset(order[start : start + config.minibatch_size])
            value, grad = objective_gradient(mb, new, objective, **kw)
            if not np.isfinite(value) or not np.isfinite(grad).all():
                aborted, message = True, "non-finite objective"
                break
            params, adam = adam_step(adam, new.params, -grad, lr)
            new.set_params(params)
            steps += 1
        if aborted:
            break
        history.append(objective_terms(batch, new, objective, **kw)[0])
    if aborted:
        new = policy.copy()
    final = objective_terms(batch, new, objective, **kw)[0]
    kl = float(np.mean(batch.old_log_prob - new.log_prob(batch.states, batch.actions)))
    penalty = surrogate_std(batch, new) if batch.sqrt_d is not None else 0.0
    p_imp = prob_improvement(batch, new) if batch.sqrt_d is not None else 0.5
    diag = UpdateDiagnostics(
        entropy=new.entropy(batch.states),
        kl=kl,
        penalty=penalty,
        p_improve=p_imp,
        objective_before=start_value,
        objective_after=final,
        steps=steps,
        aborted=aborted,
        message=message,
        history=history,
    )
    return new, diag
