"""Deterministic dynamics-model ensembles for continuous environments.

Each member predicts the normalized change in state from the normalized
``(s, a)`` pair; rewards are always recomputed with the environment's known
reward function ``mu(s, a, s')``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approx import AdamState, DiffFunction, Normalizer, adam_step

RewardFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ModelTrainConfig:
    ensemble_size: int = 5
    hidden: tuple = (64, 64)
    activation: str = "relu"
    batch_size: int = 1000
    learning_rate: float = 2e-4
    train_ratio: float = 0.8
    validation_period: int = 5
    patience: int = 25
    max_epochs: int = 500
    warm_start: bool = True

    def validate(self) -> list[str]:
        errors = []
        if self.ensemble_size < 1:
            errors.append("ensemble_size must be >= 1")
        if not 0.0 < self.train_ratio < 1.0:
            errors.append("train_ratio must lie in (0, 1)")
        if self.validation_period < 1 or self.patience < 1:
            errors.append("validation_period and patience must be >= 1")
        elif self.patience % self.validation_period:
            errors.append("patience must be a multiple of validation_period")
        if self.batch_size < 1 or self.max_epochs < 1:
            errors.append("batch_size and max_epochs must be >= 1")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        return errors


@dataclass
class TransitionDataset:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.next_states = np.atleast_2d(np.asarray(self.next_states, dtype=np.float64))
        if not len(self.states) == len(self.actions) == len(self.next_states):
            raise ValueError("dataset arrays must have equal length")

    @classmethod
    def empty(cls, state_dim: int, action_dim: int) -> "TransitionDataset":
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros((0, state_dim)))

    def __len__(self) -> int:
        return len(self.states)

    def extend(self, states, actions, next_states) -> None:
        self.states = np.vstack([self.states, np.reshape(states, (-1, self.states.shape[1]))])
        self.actions = np.vstack([self.actions, np.reshape(actions, (-1, self.actions.shape[1]))])
        self.next_states = np.vstack([self.next_states, np.reshape(next_states, (-1, self.next_states.shape[1]))])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s, a, s2 in zip(self.states, self.actions, self.next_states):
                fh.write(json.dumps({"s": s.tolist(), "a": a.tolist(), "s_next": s2.tolist()}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TransitionDataset":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path} holds no transitions")
        return cls([r["s"] for r in rows], [r["a"] for r in rows], [r["s_next"] for r in rows])


@dataclass
class TrainReport:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    val_history: list[tuple[int, float]] = field(default_factory=list)


class DynamicsModel:
    def __init__(self, network: DiffFunction, input_norm: Normalizer, output_norm: Normalizer):
        self.network = network
        self.input_norm = input_norm
        self.output_norm = output_norm
        self.train_idx: np.ndarray | None = None
        self.val_idx: np.ndarray | None = None
        self.report: TrainReport | None = None

    @classmethod
    def build(cls, state_dim: int, action_dim: int, hidden=(64, 64), activation="relu", seed=0) -> "DynamicsModel":
        net = DiffFunction([state_dim + action_dim, *hidden, state_dim], activation, seed=seed)
        return cls(net, Normalizer.identity(state_dim + action_dim), Normalizer.identity(state_dim))

    def delta(self, s, a) -> np.ndarray:
        x = np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)], axis=-1)
        return self.output_norm.denormalize(self.network(self.input_norm.normalize(x)))

    def next_state(self, s, a) -> np.ndarray:
        return np.asarray(s, dtype=np.float64) + self.delta(s, a)

    def copy(self) -> "DynamicsModel":
        twin = DynamicsModel(
            self.network.copy(),
            Normalizer(self.input_norm.mean.copy(), self.input_norm.std.copy()),
            Normalizer(self.output_norm.mean.copy(), self.output_norm.std.copy()),
        )
        twin.train_idx, twin.val_idx, twin.report = self.train_idx, self.val_idx, self.report
        return twin

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "input_norm": self.input_norm.to_dict(),
            "output_norm": self.output_norm.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc) -> "DynamicsModel":
        return cls(
            DiffFunction.from_dict(doc["network"]),
            Normalizer.from_dict(doc["input_norm"]),
            Normalizer.from_dict(doc["output_norm"]),
        )


def predict(model: DynamicsModel, reward: RewardFunction, s, a):
    """Next state ``s + delta(s, a)`` and reward ``mu(s, a, s')``."""
    s_next = model.next_state(s, a)
    if not np.isfinite(s_next).all():
        raise FloatingPointError("dynamics model produced non-finite output")
    return s_next, reward(s, a, s_next)


def _split(n: int, ratio: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_train = min(max(1, int(round(ratio * n))), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _train_member(model: DynamicsModel, x, y, config: ModelTrainConfig, rng) -> TrainReport:
    tr, va = model.train_idx, model.val_idx
    xt, yt, xv, yv = x[tr], y[tr], x[va], y[va]

    def val_loss():
        return float(np.mean((model.network(xv) - yv) ** 2))

    adam = AdamState.zeros(model.network.num_params)
    best = val_loss()
    best_epoch, best_params = 0, model.network.params.copy()
    history = [(0, best)]
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(xt))
        for start in range(0, len(xt), config.batch_size):
            idx = order[start : start + config.batch_size]
            pred, cache = model.network.forward_cached(xt[idx])
            g = 2.0 * (pred - yt[idx]) / pred.size
            params, adam = adam_step(adam, model.network.params, model.network.backward_cached(cache, g), config.learning_rate)
            model.network.set_params(params)
        if epoch % config.validation_period:
            continue
        loss = val_loss()
        history.append((epoch, loss))
        if loss < best:
            best, best_epoch, best_params = loss, epoch, model.network.params.copy()
        elif epoch - best_epoch >= config.patience:
            break
    model.network.set_params(best_params)
    return TrainReport(best_epoch=best_epoch, best_val_loss=best, epochs_run=epoch, val_history=history)


def train_ensemble(
    dataset: TransitionDataset,
    config: ModelTrainConfig,
    seed=0,
    previous: list[DynamicsModel] | None = None,
) -> list[DynamicsModel]:
    """Train ``config.ensemble_size`` members, each on its own train/validation split.

    Members stop individually once the validation loss (checked every
    ``validation_period`` epochs) has not improved for ``patience`` epochs and
    keep their best checkpoint. With ``previous`` and ``warm_start`` set, each
    member resumes from the matching previous network.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(dataset) < 10 * config.ensemble_size:
        raise ValueError(f"dataset of {len(dataset)} transitions is too small for {config.ensemble_size} members")
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    x_raw = np.hstack([dataset.states, dataset.actions])
    y_raw = dataset.next_states - dataset.states
    state_dim, action_dim = dataset.states.shape[1], dataset.actions.shape[1]
    seeds = np.random.SeedSequence(seed).spawn(config.ensemble_size)
    models = []
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        net_seed = int(rng.integers(2**31))
        if previous is not None and config.warm_start and k < len(previous):
            model = previous[k].copy()
        else:
            model = DynamicsModel.build(state_dim, action_dim, tuple(config.hidden), config.activation, net_seed)
        model.train_idx, model.val_idx = _split(len(dataset), config.train_ratio, rng)
        model.input_norm = Normalizer.fit(x_raw[model.train_idx])
        model.output_norm = Normalizer.fit(y_raw[model.train_idx])
        x = model.input_norm.normalize(x_raw)
        y = model.output_norm.normalize(y_raw)
        model.report = _train_member(model, x, y, config, rng)
        models.append(model)
    return models


class EnsemblePosterior:
    """Adapter exposing a list of dynamics models through ``member_predictions``."""

    def __init__(self, models: list[DynamicsModel], reward: RewardFunction, action_clip=None):
        if not models:
            raise ValueError("ensemble needs at least one model")
        self.models = models
        self.reward = reward
        self.action_clip = action_clip

    @property
    def num_members(self) -> int:
        return len(self.models)

    def member_predictions(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if self.action_clip is not None:
            actions = self.action_clip(actions)
        nexts, rewards = [], []
        for model in self.models:
            s2, r = predict(model, self.reward, states, actions)
            nexts.append(s2)
            rewards.append(r)
        return np.stack(nexts), np.stack(rewards)


def ensemble_as_posterior(models, reward: RewardFunction, action_clip=None) -> EnsemblePosterior:
    return EnsemblePosterior(list(models), reward, action_clip)


def save_ensemble(models: list[DynamicsModel], path, config: ModelTrainConfig | None = None) -> None:
    doc = {"members": [m.to_dict() for m in models]}
    if config is not None:
        doc["config"] = asdict(config)
    Path(path).write_text(json.dumps(doc))


def load_ensemble(path) -> list[DynamicsModel]:
    doc = json.loads(Path(path).read_text())
    return [DynamicsModel.from_dict(m) for m in doc["members"]]
