"""The model-based training loop with uncertainty-penalized policy updates."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..approx import FitConfig, ValueFunction
from ..envs import make_env
from ..models import EnsemblePosterior, TransitionDataset, train_ensemble
from ..policy import GaussianPolicy, SurrogateBatch, UpdateDiagnostics, optimize_policy
from .config import ExperimentConfig, validate_config
from .rollouts import (
    Rollouts,
    baseline_advantages,
    model_rollouts,
    real_rollouts,
    returns_to_go,
    trajectory_uncertainty,
)

TRAIN_COLUMNS = (
    "iteration",
    "update",
    "entropy",
    "kl",
    "penalty",
    "p_improve",
    "return_model",
    "return_real",
    "model_val_loss",
    "real_samples",
    "imagined_samples",
    "seed",
    "clock",
)

_STAGE_IDS = {
    "collect_initial": 1,
    "train_ensemble": 2,
    "virtual_rollouts": 3,
    "fit_value": 4,
    "update_policy": 5,
    "train_exploration": 6,
    "collect_real": 7,
    "evaluate": 8,
    "init": 9,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, iteration: int, cause: Exception):
        super().__init__(f"stage {stage} failed at iteration {iteration}: {cause}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class RunLog:
    """Per-iteration rows plus the stage trace.

    ``clock`` is a logical timestamp (the row index) so identical runs log
    identical bytes.
    """

    seed: int
    config_digest: str
    rows: list[dict] = field(default_factory=list)
    trace: list[tuple[int, str]] = field(default_factory=list)
    error: str | None = None

    def add_row(self, **values) -> None:
        row = {name: values.get(name, math.nan) for name in TRAIN_COLUMNS}
        row["seed"] = self.seed
        row["clock"] = len(self.rows)
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAIN_COLUMNS)
            for row in self.rows:
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in TRAIN_COLUMNS])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_digest": self.config_digest,
            "rows": self.rows,
            "trace": [list(t) for t in self.trace],
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> dict:
        real = [r["return_real"] for r in self.rows]
        return {
            "initial_return": real[0] if real else math.nan,
            "final_return": real[-1] if real else math.nan,
            "iterations": len(self.rows) - 1,
            "real_samples": self.rows[-1]["real_samples"] if self.rows else 0,
            "imagined_samples": self.rows[-1]["imagined_samples"] if self.rows else 0,
        }


@dataclass
class RunResult:
    log: RunLog
    policy: GaussianPolicy
    models: list = field(default_factory=list)


class _Run:
    def __init__(self, cfg: ExperimentConfig, trace_hook=None):
        self.cfg = cfg
        self.log = RunLog(seed=cfg.seed, config_digest=cfg.digest())
        self.trace_hook = trace_hook
        self.real_samples = 0
        self.imagined_samples = 0

    def rng(self, iteration: int, stage: str, sub: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, iteration, _STAGE_IDS[stage], sub])

    def stage(self, iteration: int, name: str, fn, *args):
        self.log.trace.append((iteration, name))
        try:
            if self.trace_hook is not None:
                self.trace_hook(iteration, name)
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
            raise StageError(name, iteration, exc) from exc


def _virtual_batch(run: _Run, posterior, env, policy, iteration: int, sub: int) -> Rollouts:
    rng = run.rng(iteration, "virtual_rollouts", sub)
    starts = env.reset(rng, run.cfg.loop.virtual_trajectories)
    starts = env.observe(starts) if hasattr(env, "sigma") else starts
    ro = model_rollouts(posterior, policy, starts, env.horizon, rng)
    run.imagined_samples += ro.rewards.size
    return ro


def _fit_value(run: _Run, value_fn: ValueFunction, ro: Rollouts, iteration: int, sub: int):
    cfg = run.cfg
    lr = cfg.value.learning_rate * _decay(cfg.value.lr_final_fraction, iteration - 1, cfg.loop.iterations)
    fit = FitConfig(cfg.value.epochs, cfg.value.minibatch_size, lr, seed=int(run.rng(iteration, "fit_value", sub).integers(2**31)))
    targets = returns_to_go(ro, cfg.gamma).reshape(-1)
    return value_fn.fit(ro.flat_states(), ro.flat_steps(), targets, fit)


def _decay(final_fraction: float, i: int, total: int) -> float:
    if total <= 1:
        return 1.0
    return 1.0 - (1.0 - final_fraction) * min(i, total - 1) / (total - 1)


def _surrogate_batch(run: _Run, ro: Rollouts, policy, value_fn, scale: float, tag: str) -> SurrogateBatch:
    gamma = run.cfg.gamma
    adv = baseline_advantages(ro, value_fn, gamma) / scale
    sqrt_d = np.sqrt(trajectory_uncertainty(ro, value_fn, gamma)) / scale
    states, actions = ro.flat_states(), ro.flat_actions()
    return SurrogateBatch(
        states=states,
        actions=actions,
        old_log_prob=policy.log_prob(states, actions),
        advantages=adv.reshape(-1),
        sqrt_d=sqrt_d.reshape(-1),
        steps=ro.flat_steps() + 1,
        num_trajectories=float(ro.num_trajectories),
        policy_id=tag,
    )


def _return_scale(ro: Rollouts, gamma: float) -> float:
    sd = float(np.std(ro.returns(gamma)))
    return sd if sd > 1e-8 else 1.0


def run_pombu(cfg: ExperimentConfig, trace_hook=None, objectives=("conservative", "exploration")) -> RunResult:
    """Train a Gaussian policy with the uncertainty-penalized model-based loop.

    Stage order per iteration: train the ensemble; ``policy_updates`` times
    {model rollouts, value fit, conservative policy update}; then
    ``real_trajectories`` times {model rollouts, exploration-policy update,
    one real trajectory}; finally evaluate. A failing stage raises
    :class:`StageError`; the partial log is attached as ``exc.log``.
    ``objectives`` names the target and exploration objectives; passing
    ``("clip", "clip")`` runs the plain clipped-surrogate path.
    """
    validate_config(cfg)
    run = _Run(cfg, trace_hook)
    run.objectives = objectives
    try:
        return _run(run)
    except StageError as exc:
        run.log.error = str(exc)
        exc.log = run.log
        raise


def _run(run: _Run) -> RunResult:
    cfg = run.cfg
    loop = cfg.loop
    env = make_env(cfg.env.name, cfg.env.horizon, cfg.env.noise_sigma, seed=int(run.rng(0, "init", 1).integers(2**31)))
    dim = env.state_dim
    init_seeds = run.rng(0, "init").integers(2**31, size=2)
    policy = GaussianPolicy.build(dim, env.action_dim, tuple(cfg.policy.hidden), cfg.policy.init_std, env.action_bound, int(init_seeds[0]))
    value_fn = ValueFunction.build(dim, env.horizon, tuple(cfg.value.hidden), "tanh", int(init_seeds[1]))
    dataset = TransitionDataset.empty(dim, env.action_dim)

    def collect(iteration, stage, pol, n, sub=0):
        ro = real_rollouts(env, pol, n, run.rng(iteration, stage, sub))
        dataset.extend(*_transition_arrays(ro, env))
        run.real_samples += ro.rewards.size
        return ro

    def evaluate(iteration):
        ro = real_rollouts(env, policy, loop.eval_trajectories, run.rng(iteration, "evaluate"))
        return float(np.mean(ro.returns(cfg.gamma)))

    run.stage(0, "collect_initial", collect, 0, "collect_initial", policy, loop.real_trajectories)
    ret0 = run.stage(0, "evaluate", evaluate, 0)
    run.log.add_row(iteration=0, update=0, return_real=ret0, real_samples=run.real_samples, imagined_samples=run.imagined_samples)

    models = None
    updates = 0
    for it in range(1, loop.iterations + 1):
        model_seed = int(run.rng(it, "train_ensemble").integers(2**31))
        models = run.stage(it, "train_ensemble", train_ensemble, dataset, cfg.model, model_seed, models)
        posterior = EnsemblePosterior(models, env.reward, env.clip_action)
        lr = cfg.optim.learning_rate_at(it - 1, loop.iterations)
        diags: list[UpdateDiagnostics] = []
        model_returns = []
        scale = None
        for m in range(loop.policy_updates):
            ro = run.stage(it, "virtual_rollouts", _virtual_batch, run, posterior, env, policy, it, m)
            if scale is None:
                scale = _return_scale(ro, cfg.gamma)
                value_fn.target_scale = scale
            model_returns.append(float(np.mean(ro.returns(cfg.gamma))))
            run.stage(it, "fit_value", _fit_value, run, value_fn, ro, it, m)
            batch = _surrogate_batch(run, ro, policy, value_fn, scale, "target")
            policy, diag = run.stage(
                it, "update_policy", optimize_policy, policy, batch, cfg.optim, run.objectives[0], lr, int(run.rng(it, "update_policy", m).integers(2**31))
            )
            diags.append(diag)
            updates += 1

        explorers: dict[int, GaussianPolicy] = {}
        for i in range(loop.real_trajectories):
            slot = i % cfg.optim.num_exploration_policies
            base = explorers.get(slot, policy)
            ro = run.stage(it, "virtual_rollouts", _virtual_batch, run, posterior, env, base, it, loop.policy_updates + i)
            batch = _surrogate_batch(run, ro, base, value_fn, scale, f"explore-{slot}")
            explorers[slot], _ = run.stage(
                it, "train_exploration", optimize_policy, base, batch, cfg.optim, run.objectives[1], lr, int(run.rng(it, "train_exploration", i).integers(2**31))
            )
            run.stage(it, "collect_real", collect, it, "collect_real", explorers[slot], 1, i)

        ret = run.stage(it, "evaluate", evaluate, it)
        run.log.add_row(
            iteration=it,
            update=updates,
            entropy=float(np.mean([d.entropy for d in diags])),
            kl=float(np.mean([d.kl for d in diags])),
            penalty=float(np.mean([d.penalty for d in diags])),
            p_improve=float(np.mean([d.p_improve for d in diags])),
            return_model=float(np.mean(model_returns)),
            return_real=ret,
            model_val_loss=float(np.mean([mdl.report.best_val_loss for mdl in models])),
            real_samples=run.real_samples,
            imagined_samples=run.imagined_samples,
        )
        if loop.return_threshold is not None and ret >= loop.return_threshold:
            break
    return RunResult(log=run.log, policy=policy, models=models or [])


def _transition_arrays(ro: Rollouts, env):
    ds = ro.transitions(env.clip_action)
    return ds.states, ds.actions, ds.next_states


def write_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.log.write_csv(out / "train.csv")
    (out / "runlog.json").write_text(result.log.to_json())
    (out / "policy.json").write_text(json.dumps(result.policy.to_dict()))


def evaluate_policy(cfg: ExperimentConfig, policy: GaussianPolicy, seed: int, n: int | None = None) -> dict:
    env = make_env(cfg.env.name, cfg.env.horizon, cfg.env.noise_sigma, seed=seed)
    ro = real_rollouts(env, policy, n or cfg.loop.eval_trajectories, np.random.default_rng([seed, _STAGE_IDS["evaluate"]]))
    returns = ro.returns(cfg.gamma)
    return {"mean_return": float(returns.mean()), "std_return": float(returns.std()), "trajectories": len(returns)}

