"""Command-line entry points: train, run, roc, sweep.

Each subcommand reads an optional YAML experiment config and writes
plot-ready CSV/JSONL files plus a manifest for exact reproduction.
"""

from __future__ import annotations

import argparse
import json
import os
import pickle
import sys

import numpy as np

from .errors import ConfigurationError
from .harness import ExperimentConfig, run_experiment, sweep_alpha_beta, train_pipeline
from .neural import save_checkpoint


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_yaml(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.trials is not None:
        cfg.n_trials = args.trials
    if args.p_t:
        cfg.p_t_list = [float(p) for p in args.p_t]
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def _artifacts_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, "artifacts.pkl")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    artifacts = train_pipeline(cfg)
    with open(_artifacts_path(cfg), "wb") as fh:
        pickle.dump(artifacts, fh)
    save_checkpoint(artifacts.net, os.path.join(cfg.out_dir, "predictor.ckpt"))
    print(f"trained: gamma={artifacts.threshold.gamma:.3f} m, "
          f"final loss={artifacts.train_history[-1]:.3f}")
    return 0


def _load_or_train(cfg: ExperimentConfig):
    path = _artifacts_path(cfg)
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    return train_pipeline(cfg)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = run_experiment(cfg, artifacts=_load_or_train(cfg))
    for row in summary["metrics"]:
        print(f"{row.estimator:6s} P_t={row.p_t:g} dBm  RMSE={row.rmse:.2f} m  MAPE={row.mape:.3f}%")
    return 0


def cmd_roc(args) -> int:
    cfg = _load_config(args)
    cfg.attacks = True
    summary = run_experiment(cfg, artifacts=_load_or_train(cfg))
    for p_t, curves in summary["roc"].items():
        for name in sorted(curves):
            print(f"P_t={p_t:g} dBm  {name:10s} AUC={curves[name].auc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    result = sweep_alpha_beta(cfg, artifacts=_load_or_train(cfg))
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, "sweep.csv")
    with open(out, "w") as fh:
        fh.write("alpha,beta,mape_pct\n")
        for i, a in enumerate(result["alphas"]):
            for j, b in enumerate(result["betas"]):
                fh.write(f"{a},{b},{result['mape'][i, j]!r}\n")
    best = np.unravel_index(int(np.nanargmin(result["mape"])), result["mape"].shape)
    print(f"minimum MAPE {result['mape'][best]:.3f}% at "
          f"alpha={result['alphas'][best[0]]}, beta={result['betas'][best[1]]}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ridpla", description="Drone Remote-ID physical-layer authentication experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, desc in [
        ("train", cmd_train, "fit the gain regressor, sequence predictor, and threshold"),
        ("run", cmd_run, "run the Monte-Carlo experiment and write metrics"),
        ("roc", cmd_roc, "run with balanced replay attacks and write ROC curves"),
        ("sweep", cmd_sweep, "grid-sweep the noise smoothing factors"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("-c", "--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override experiment seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--trials", type=int, help="Monte-Carlo trial count")
        p.add_argument("--p-t", nargs="*", help="transmit power sweep (dBm)")
        p.add_argument("--workers", type=int, help="parallel trial workers")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
