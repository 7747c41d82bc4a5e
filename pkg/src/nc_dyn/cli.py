"""Command-line entry point: ``nc-dyn gen|train|eval|study|config``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .nbody import generate, read_dataset, write_dataset
from .rollout import RolloutConfig
from .studies import STUDIES, run_study
from .training import TrainConfig, evaluate, load_splits, train


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    changes = {}
    for key in ("epochs", "seed", "backbone", "data_path", "out_dir", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    rc = {}
    if getattr(args, "order", None) is not None:
        rc["order"] = args.order
    if getattr(args, "plus", False):
        rc["use_velocity_reg"] = True
    if rc:
        changes["rollout"] = replace(cfg.rollout, **rc)
    return replace(cfg, **changes) if changes else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--data", dest="data_path", help="JSONL dataset (overrides config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--backbone", choices=["egnn", "rf"])
    p.add_argument("--order", type=int, help="Newton-Cotes order K")
    p.add_argument("--plus", action="store_true", help="add intermediate velocity supervision (NC+)")


def cmd_gen(args) -> int:
    samples = generate(args.seed, args.count, args.n, t_window=args.t_window, k=args.k, dt=args.dt)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.out_dir is None:
        cfg = replace(cfg, out_dir="run")
    res = train(cfg)
    print(f"best epoch {res.best_epoch}: valid MSE {res.best_valid_mse:.6g}, "
          f"test MSE {res.test_mse:.6g} ({res.test_mse * 100:.4f} x1e-2)")
    print(f"checkpoint {res.checkpoint_path}\nmetrics {res.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    rc = RolloutConfig(**json.loads(Path(args.rollout).read_text())) if args.rollout else None
    samples = read_dataset(args.data)
    if args.last is not None:
        samples = samples[-args.last:] if args.last else []
    out = evaluate(args.checkpoint, samples, rc)
    print(f"MSE {out['mse']:.6g} ({out['mse_x100']:.4f} x1e-2)")
    for k, v in enumerate(out["vel_mse"]):
        print(f"velocity MSE at node {k}: {v:.6g}")
    return 0


def cmd_study(args) -> int:
    cfg = _load_config(args)
    splits = load_splits(cfg)
    rows = run_study(args.kind, cfg, splits, seeds=args.seeds, out_path=args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_config(args) -> int:
    print(json.dumps(TrainConfig().to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nc-dyn", description="Newton-Cotes rollouts for N-body prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate a JSONL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=700)
    p.add_argument("--n", type=int, default=5, help="particles per system")
    p.add_argument("--t", "--t-window", dest="t_window", type=float, default=1.0, help="window duration T")
    p.add_argument("--k", type=int, default=2, help="recorded frames per window minus one")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.add_argument("--out", dest="out_dir", help="output directory (default ./run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--last", type=int, help="only the last N samples (the test split)")
    p.add_argument("--rollout", help="JSON rollout config overriding the checkpoint's")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", help="run an experiment and write report.csv")
    p.add_argument("kind", choices=STUDIES)
    _add_config_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("config", help="print the default training config as JSON")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"nc-dyn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
