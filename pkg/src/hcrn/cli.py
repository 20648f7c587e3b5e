"""Command-line entry point: ``hcrn {train,eval,gen-data,bench}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, synthetic, training


def _cmd_train(args) -> int:
    config = training.load_config(args.config, seed=args.seed, out_dir=args.out)
    result = training.train(config, log_every=args.log_every)
    summary = {
        "best_epoch": result.best_epoch,
        "val": result.best_val,
        "test": result.test,
        "checkpoint": str(result.checkpoint),
        "metrics": str(result.metrics_path),
    }
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_eval(args) -> int:
    metrics = training.evaluate_checkpoint(args.checkpoint, args.dataset, args.split)
    print(json.dumps(metrics))
    return 0


def _cmd_gen_data(args) -> int:
    spec = synthetic.spec_from_dict(training.parse_flat(Path(args.spec).read_text(), synthetic.DataSpec))
    datasets = synthetic.generate(spec)
    out = synthetic.save_dataset(datasets, args.out)
    for name, ds in datasets.items():
        print(f"{name}: {len(ds)} samples, oracle accuracy {synthetic.oracle_solvability(ds):.3f}")
    print(f"written to {out}")
    return 0


def _cmd_bench(args) -> int:
    values = training.parse_flat(Path(args.config).read_text(), bench.BenchConfig)
    sys.stdout.write(bench.run_bench(bench.BenchConfig(**values)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a flat key = value config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="overrides the config out_dir")
    p.add_argument("--log-every", type=int, default=0, help="print running loss every N steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a saved dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=synthetic.SPLITS)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("bench", help="predicted vs measured CRN cost table")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (training.ConfigError, training.CheckpointMismatch, training.TrainingAborted, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
