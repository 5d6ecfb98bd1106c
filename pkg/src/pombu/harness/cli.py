"""Command-line front end.

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__, kernels
from ..mdp import TabularPolicy
from ..policy import GaussianPolicy
from ..posterior import PosteriorEnsemble
from ..uncertainty import uncertainty_tables
from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .experiments import calibration_study, reproduce_appendix_c, write_chain_summary
from .loop import StageError, evaluate_policy, run_pombu, write_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="experiment configuration JSON")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pombu", description="Uncertainty-aware model-based policy optimization tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve-uncertainty", help="exact uncertainty tables for a tabular posterior")
    _common(p)
    p.add_argument("--posterior", type=Path, required=True, help="posterior ensemble JSON")
    p.add_argument("--policy", type=Path, help="JSON array of per-state action probabilities (default uniform)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--q-max", type=float)
    p.add_argument("--no-oracle", action="store_true", help="skip the exact variance enumeration")

    p = sub.add_parser("appendix-c", help="bound comparison on the chain posterior")
    _common(p)
    p.add_argument("--horizons", default="2,4,8,16", help="comma-separated horizons")

    p = sub.add_parser("calibrate", help="ratio calibration study on a point environment")
    _common(p)
    p.add_argument("--epochs", help="comma-separated value-training epoch checkpoints")

    p = sub.add_parser("train", help="run the training loop")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a trained policy")
    _common(p)
    p.add_argument("--policy", type=Path, help="policy JSON (default <out>/policy.json)")
    p.add_argument("--trajectories", type=int)

    p = sub.add_parser("validate-config", help="check a configuration file")
    _common(p)
    return parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return validate_config(cfg)


def _manifest(args, out: Path, cfg: ExperimentConfig | None, extra=None) -> None:
    doc = {
        "command": args.command,
        "argv": args.argv,
        "seed": None if cfg is None else cfg.seed,
        "config_hash": None if cfg is None else cfg.digest(),
        "config": None if cfg is None else cfg.to_dict(),
        "versions": {
            "pombu": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
        },
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _cmd_solve(args, out):
    try:
        ens = PosteriorEnsemble.load(args.posterior)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid posterior file {args.posterior}: {exc}") from exc
    if args.policy:
        policy = TabularPolicy(np.asarray(json.loads(args.policy.read_text()), dtype=np.float64))
    else:
        policy = TabularPolicy.uniform(ens.num_states, ens.num_actions)
    tables = uncertainty_tables(ens, policy, q_max=args.q_max, gamma=args.gamma, with_oracle=not args.no_oracle)
    tables.write_csv(out / "uncertainty.csv")
    _manifest(args, out, None, {"posterior": str(args.posterior)})
    print(f"wrote {out / 'uncertainty.csv'}")


def _cmd_appendix_c(args, out):
    horizons = _int_list(args.horizons)
    if not horizons or min(horizons) < 1:
        raise ConfigError("horizons must be a nonempty list of positive integers")
    result = reproduce_appendix_c(horizons, out / "appendix_c.csv")
    write_chain_summary(result, out / "appendix_c_summary.csv")
    _manifest(args, out, None, {"horizons": horizons, "ratios": {str(k): v for k, v in result.ratios.items()}})
    for H in horizons:
        if H in result.refused:
            print(f"H={H}: refused ({result.refused[H]})")
        else:
            status = "ok" if not result.violations[H] else ", ".join(result.violations[H])
            print(f"H={H}: mean(B)/mean(U) = {result.ratios[H]:.4f} [{status}]")
    return EXIT_OK if not any(result.violations.values()) else EXIT_RUNTIME


def _cmd_calibrate(args, out):
    cfg = _config(args)
    epochs = _int_list(args.epochs) if args.epochs else None
    result = calibration_study(cfg, epochs, out / "calibrate.csv")
    _manifest(args, out, cfg)
    for row in result.rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def _cmd_train(args, out):
    cfg = _config(args)
    try:
        result = run_pombu(cfg)
    except StageError as exc:
        exc.log.write_csv(out / "train.csv")
        _manifest(args, out, cfg, {"error": str(exc)})
        raise
    write_run(result, out)
    _manifest(args, out, cfg, {"summary": result.log.summary()})
    s = result.log.summary()
    print(f"return {s['initial_return']:.3f} -> {s['final_return']:.3f} over {s['iterations']} iterations")


def _cmd_eval(args, out):
    cfg = _config(args)
    path = args.policy or out / "policy.json"
    if not path.exists():
        raise ConfigError(f"policy file {path} does not exist")
    policy = GaussianPolicy.from_dict(json.loads(path.read_text()))
    report = evaluate_policy(cfg, policy, cfg.seed, args.trajectories)
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    _manifest(args, out, cfg, {"policy": str(path)})
    print(f"mean return {report['mean_return']:.3f} over {report['trajectories']} trajectories")


def _cmd_validate(args, out):
    if args.config is None:
        raise ConfigError("validate-config needs --config")
    cfg = _config(args)
    print(f"{args.config}: ok (hash {cfg.digest()[:12]})")


_COMMANDS = {
    "solve-uncertainty": _cmd_solve,
    "appendix-c": _cmd_appendix_c,
    "calibrate": _cmd_calibrate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "validate-config": _cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    args.argv = list(sys.argv[1:] if argv is None else argv)
    out = args.out
    try:
        if args.command != "validate-config":
            out.mkdir(parents=True, exist_ok=True)
        status = _COMMANDS[args.command](args, out)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
