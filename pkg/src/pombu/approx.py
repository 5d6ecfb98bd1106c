"""Small feedforward networks with hand-written reverse mode and Adam.

Parameters live in one flat float64 vector; per-layer weight and bias arrays
are views into it, so optimizers work on the flat vector directly.
"""
from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import as_rng

_ACTIVATIONS = ("tanh", "relu", "linear")


class DiffFunction:
    """Fully connected network ``x -> y`` with per-layer nonlinearities.

    Weights are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` and biases
    start at zero. ``output_scale`` multiplies the initial last-layer weights.
    """

    def __init__(self, layer_sizes, activations=None, seed=0, output_scale: float = 1.0):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output size")
        n_layers = len(self.layer_sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["linear"]
        elif isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers:
            raise ValueError(f"expected {n_layers} activations, got {len(activations)}")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.activations = list(activations)
        self.params = np.zeros(self.num_params)
        self._bind()
        rng = as_rng(seed)
        for i, (W, _b) in enumerate(self.layers):
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            if i == n_layers - 1:
                W *= output_scale

    @property
    def num_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def _bind(self):
        self.layers = []
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self.params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.params[off : off + fan_out]
            off += fan_out
            self.layers.append((W, b))

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ValueError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[...] = flat

    def copy(self) -> "DiffFunction":
        twin = object.__new__(DiffFunction)
        twin.layer_sizes = list(self.layer_sizes)
        twin.activations = list(self.activations)
        twin.params = self.params.copy()
        twin._bind()
        return twin

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[-1]} does not match {self.input_dim}")
        return x, single

    def forward_cached(self, x):
        x, single = self._as_batch(x)
        cache = [x]
        h = x
        for (W, b), act in zip(self.layers, self.activations):
            z = h @ W + b
            if act == "tanh":
                h = np.tanh(z)
            elif act == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
            cache.append(h)
        return (h[0] if single else h), cache

    def __call__(self, x):
        return self.forward_cached(x)[0]

    def backward_cached(self, cache, output_grad) -> np.ndarray:
        g = np.asarray(output_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        grad = np.empty_like(self.params)
        off = self.num_params
        for i in range(len(self.layers) - 1, -1, -1):
            W, b = self.layers[i]
            out = cache[i + 1]
            act = self.activations[i]
            if act == "tanh":
                g = g * (1.0 - out * out)
            elif act == "relu":
                g = g * (out > 0)
            h_in = cache[i]
            off -= b.size
            grad[off : off + b.size] = g.sum(axis=0)
            off -= W.size
            grad[off : off + W.size] = (h_in.T @ g).ravel()
            if i > 0:
                g = g @ W.T
        return grad

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "activations": self.activations,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DiffFunction":
        fn = cls(doc["layer_sizes"], doc["activations"], seed=0)
        fn.set_params(doc["params"])
        return fn

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DiffFunction":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(fn: DiffFunction, x):
    return fn(x)


def backward(fn: DiffFunction, x, output_grad) -> np.ndarray:
    """Gradient of ``sum(output_grad * fn(x))`` with respect to the flat parameters."""
    _, cache = fn.forward_cached(x)
    g = np.asarray(output_grad, dtype=np.float64)
    expected = cache[-1].shape if np.ndim(x) > 1 else (fn.output_dim,)
    if g.shape != expected:
        raise ValueError(f"output gradient shape {g.shape} does not match {expected}")
    return fn.backward_cached(cache, g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam descent step. Returns ``(new_params, new_state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.isfinite(grads).all():
        raise FloatingPointError("non-finite gradient passed to adam_step")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, step, state.beta1, state.beta2, state.eps)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, x, min_std: float = 1e-6) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), min_std))

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": np.atleast_1d(self.mean).tolist(), "std": np.atleast_1d(self.std).tolist()}

    @classmethod
    def from_dict(cls, doc) -> "Normalizer":
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


@dataclass
class ValueFitBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if len(self.targets) == 0:
            raise ValueError("value-fit batch is empty")
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if not np.isfinite(self.targets).all():
            raise ValueError("value-fit targets must be finite")


@dataclass
class FitConfig:
    epochs: int = 10
    minibatch_size: int = 500
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class FitReport:
    losses: list[float] = field(default_factory=list)
    adam: AdamState | None = None
    steps: int = 0


def mse(fn: DiffFunction, inputs, targets) -> float:
    pred = fn(inputs)[:, 0]
    return float(np.mean((pred - targets) ** 2))


def fit_value(fn: DiffFunction, batches: Iterable[ValueFitBatch], config: FitConfig, adam: AdamState | None = None) -> FitReport:
    """Minimize the mean squared error between ``fn(inputs)`` and the targets.

    Each batch is swept ``config.epochs`` times in shuffled minibatches; the
    report holds the full-batch loss after every epoch. Updates ``fn`` in place.
    """
    rng = as_rng(config.seed)
    adam = adam or AdamState.zeros(fn.num_params)
    report = FitReport(adam=adam)
    seen = False
    for batch in batches:
        seen = True
        n = len(batch.targets)
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                idx = order[start : start + config.minibatch_size]
                x, y = batch.inputs[idx], batch.targets[idx]
                pred, cache = fn.forward_cached(x)
                g = 2.0 * (pred[:, 0] - y)[:, None] / len(idx)
                params, adam = adam_step(adam, fn.params, fn.backward_cached(cache, g), config.learning_rate)
                fn.set_params(params)
                report.steps += 1
            report.losses.append(mse(fn, batch.inputs, batch.targets))
    if not seen:
        raise ValueError("fit_value needs at least one batch")
    report.adam = adam
    return report


class ValueFunction:
    """Time-conditioned value estimate ``V(s, t)`` built on a :class:`DiffFunction`.

    The network sees the encoded state followed by ``t / horizon``; outputs are
    multiplied by ``target_scale``. Values at ``t >= horizon`` are zero.
    """

    def __init__(self, net: DiffFunction, horizon: int, encoder=None, target_scale: float = 1.0):
        self.net = net
        self.horizon = int(horizon)
        self.encoder = encoder
        self.target_scale = float(target_scale)
        self.adam = AdamState.zeros(net.num_params)

    @classmethod
    def build(cls, state_dim: int, horizon: int, hidden=(64, 64), activation="tanh", seed=0, encoder=None):
        net = DiffFunction([state_dim + 1, *hidden, 1], activation, seed=seed)
        return cls(net, horizon, encoder)

    def features(self, states, steps) -> np.ndarray:
        x = np.asarray(states)
        if self.encoder is not None:
            x = self.encoder(x)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        t = np.asarray(steps, dtype=np.float64).reshape(-1, 1) / self.horizon
        return np.hstack([x, np.broadcast_to(t, (len(x), 1))])

    def __call__(self, states, steps) -> np.ndarray:
        steps = np.asarray(steps)
        out = self.net(self.features(states, steps))[:, 0] * self.target_scale
        return np.where(steps.reshape(-1) >= self.horizon, 0.0, out)

    def fit(self, states, steps, targets, config: FitConfig) -> FitReport:
        batch = ValueFitBatch(self.features(states, steps), np.asarray(targets) / self.target_scale)
        report = fit_value(self.net, [batch], config, self.adam)
        self.adam = report.adam
        return report


def one_hot_encoder(num_states: int):
    eye = np.eye(num_states)

    def encode(states):
        return eye[np.asarray(states, dtype=np.int64)]

    return encode
