"""Reproduction drivers: the chain-posterior bound comparison and the ratio calibration study."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..approx import DiffFunction, FitConfig, ValueFunction
from ..envs import build_chain_posterior, make_env, uniform_policy
from ..models import EnsemblePosterior, train_ensemble
from ..posterior import DEFAULT_ENUMERATION_CAP, EnumerationCapExceeded, enumeration_size
from ..policy import GaussianPolicy
from ..uncertainty import UncertaintyTables, uncertainty_tables
from .config import ExperimentConfig, validate_config
from .rollouts import model_rollouts, real_rollouts, returns_to_go, trajectory_uncertainty

ORDER_TOL = 1e-9


@dataclass
class ChainComparison:
    tables: dict[int, UncertaintyTables] = field(default_factory=dict)
    ratios: dict[int, float] = field(default_factory=dict)
    refused: dict[int, str] = field(default_factory=dict)
    violations: dict[int, list[str]] = field(default_factory=dict)

    def ratios_increasing(self) -> bool:
        hs = sorted(self.ratios)
        return all(self.ratios[a] < self.ratios[b] for a, b in zip(hs, hs[1:]))


def _order_violations(t: UncertaintyTables) -> list[str]:
    H = t.U.shape[0] - 1
    out = []
    if (t.var_oracle[:H] > t.U[:H] + ORDER_TOL).any():
        out.append("Var exceeds U")
    if (t.U[:H] > t.B[:H] + ORDER_TOL).any():
        out.append("U exceeds B")
    return out


def reproduce_appendix_c(horizons, output_path=None, cap: int = DEFAULT_ENUMERATION_CAP) -> ChainComparison:
    """Exact variance, propagated bound ``U`` and UBE bound ``B`` on the chain posterior for each horizon.

    Writes one CSV row per ``(H, h, s, a)`` when ``output_path`` is given.
    Horizons whose enumeration exceeds ``cap`` are refused and recorded.
    """
    horizons = [int(h) for h in horizons]
    if not horizons:
        raise ValueError("need at least one horizon")
    result = ChainComparison()
    for H in horizons:
        ens = build_chain_posterior(H)
        try:
            if enumeration_size(ens) > cap:
                raise EnumerationCapExceeded(enumeration_size(ens), cap)
            tables = uncertainty_tables(ens, uniform_policy(ens))
        except EnumerationCapExceeded as exc:
            result.refused[H] = str(exc)
            continue
        result.tables[H] = tables
        result.ratios[H] = float(tables.B[:H].mean() / tables.U[:H].mean())
        result.violations[H] = _order_violations(tables)
    if output_path is not None:
        with open(output_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["H", "h", "s", "a", "var_oracle", "U", "B"])
            for H, t in result.tables.items():
                for h in range(H):
                    for s in range(t.U.shape[1]):
                        for a in range(t.U.shape[2]):
                            w.writerow([H, h + 1, s, a, repr(float(t.var_oracle[h, s, a])), repr(float(t.U[h, s, a])), repr(float(t.B[h, s, a]))])
    return result


def write_chain_summary(result: ChainComparison, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["H", "mean_U", "mean_B", "ratio", "status"])
        for H in sorted(set(result.ratios) | set(result.refused)):
            if H in result.refused:
                w.writerow([H, "", "", "", f"refused: {result.refused[H]}"])
                continue
            t = result.tables[H]
            status = "ok" if not result.violations[H] else "; ".join(result.violations[H])
            w.writerow([H, repr(float(t.U[:H].mean())), repr(float(t.B[:H].mean())), repr(result.ratios[H]), status])


CALIBRATION_COLUMNS = ("epoch", "mean_ratio", "std_ratio", "frac_1sigma", "frac_2sigma")


@dataclass
class CalibrationResult:
    rows: list[dict]
    ratios: dict[int, np.ndarray]
    errors: np.ndarray
    spreads: dict[int, np.ndarray]
    model_val_losses: list[float]

    def row(self, epoch: int) -> dict:
        return next(r for r in self.rows if r["epoch"] == epoch)


def ratio_statistics(ratios) -> dict:
    r = np.asarray(ratios, dtype=np.float64)
    return {
        "mean_ratio": float(r.mean()),
        "std_ratio": float(r.std()),
        "frac_1sigma": float(np.mean(np.abs(r) <= 1.0)),
        "frac_2sigma": float(np.mean(np.abs(r) <= 2.0)),
    }


def _deterministic_policy(dim: int, seed) -> GaussianPolicy:
    net = DiffFunction([dim, 64, 64, dim], "tanh", seed=seed)
    return GaussianPolicy(net, np.full(dim, -5.0))


def calibration_study(cfg: ExperimentConfig, epochs_list=None, output_path=None, chunk: int = 250, models=None) -> CalibrationResult:
    """Compare model-based Q errors with the trajectory uncertainty estimate.

    A randomly initialized deterministic policy collects real trajectories,
    an ensemble is trained on them, and a value network is trained on fresh
    model rollouts for each epoch. For every evaluated pair
    ``ratio = (real Q - mean-model Q) / sqrt(D)``, where the mean-model Q
    and ``D`` are averaged over ``q_rollouts`` model rollouts.
    """
    validate_config(cfg)
    cal = cfg.calibration
    epochs_list = sorted(int(e) for e in (cal.value_epochs if epochs_list is None else epochs_list))
    if not epochs_list or epochs_list[0] < 0:
        raise ValueError("epochs_list must hold nonnegative epoch counts")
    if (cfg.model.ensemble_size if models is None else len(models)) < 2:
        raise ValueError("calibration needs an ensemble of at least 2 members; with one member every uncertainty is zero")
    env = make_env(cfg.env.name, cfg.env.horizon, cfg.env.noise_sigma, seed=cfg.seed)
    H = env.horizon
    if cal.real_trajectories * H < 10 * cfg.model.ensemble_size:
        raise ValueError("not enough real transitions to train the ensemble")
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng = [np.random.default_rng(s) for s in seeds]
    policy = _deterministic_policy(env.state_dim, rng[0])

    model_seed = int(rng[2].integers(2**31))
    if models is None:
        real = real_rollouts(env, policy, cal.real_trajectories, rng[1], deterministic=True)
        model_cfg = type(cfg.model)(**{**cfg.model.__dict__, "batch_size": cal.model_batch_size})
        models = train_ensemble(real.transitions(env.clip_action), model_cfg, seed=model_seed)
    posterior = EnsemblePosterior(models, env.reward, env.clip_action)

    value_fn = ValueFunction.build(env.state_dim, H, tuple(cal.value_hidden), "tanh", int(rng[3].integers(2**31)))
    snapshots = {}
    fit_rng = rng[4]
    for epoch in range(epochs_list[-1] + 1):
        if epoch in epochs_list:
            snapshots[epoch] = ValueFunction(value_fn.net.copy(), H, target_scale=value_fn.target_scale)
        if epoch == epochs_list[-1]:
            break
        ro = model_rollouts(posterior, policy, env.reset(fit_rng, cal.value_virtual_per_epoch), H, fit_rng, deterministic=True)
        targets = returns_to_go(ro, cfg.gamma).reshape(-1)
        if epoch == 0:
            value_fn.target_scale = max(float(np.abs(targets).std()), 1e-8)
        fit = FitConfig(cal.value_passes, cal.value_minibatch_size, cal.value_learning_rate, seed=int(fit_rng.integers(2**31)))
        value_fn.fit(ro.flat_states(), ro.flat_steps(), targets, fit)

    eval_rng = rng[5]
    starts = env.reset(eval_rng, cal.pairs)
    first = env.clip_action(policy.mean(starts))
    errors = np.empty(cal.pairs)
    spreads = {e: np.empty(cal.pairs) for e in epochs_list}
    for lo in range(0, cal.pairs, chunk):
        sl = slice(lo, min(lo + chunk, cal.pairs))
        s0, a0 = starts[sl], first[sl]
        q_real = _real_q(env, policy, s0, a0, cfg.gamma)
        reps = np.repeat(s0, cal.q_rollouts, axis=0)
        ro = model_rollouts(posterior, policy, reps, H, eval_rng, first_actions=np.repeat(a0, cal.q_rollouts, axis=0), deterministic=True)
        q_model = ro.returns(cfg.gamma).reshape(-1, cal.q_rollouts).mean(axis=1)
        errors[sl] = q_real - q_model
        for e, vf in snapshots.items():
            D1 = trajectory_uncertainty(ro, vf, cfg.gamma)[:, 0]
            spreads[e][sl] = np.sqrt(D1.reshape(-1, cal.q_rollouts).mean(axis=1))
    ratios, rows = {}, []
    for e in epochs_list:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = errors / spreads[e]
        if not np.isfinite(r).all():
            raise FloatingPointError(f"zero estimated uncertainty at epoch {e}")
        ratios[e] = r
        rows.append({"epoch": e, **ratio_statistics(r)})
    if output_path is not None:
        with open(output_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CALIBRATION_COLUMNS)
            for row in rows:
                w.writerow([row["epoch"]] + [repr(row[c]) for c in CALIBRATION_COLUMNS[1:]])
    return CalibrationResult(rows, ratios, errors, spreads, [m.report.best_val_loss if m.report else math.nan for m in models])


def _real_q(env, policy, s0, a0, gamma):
    s, r = env.step(s0, a0)
    total = r.copy()
    disc = 1.0
    for _ in range(env.horizon - 1):
        disc *= gamma
        s, r = env.step(s, policy.mean(env.observe(s)))
        total += disc * r
    return total
