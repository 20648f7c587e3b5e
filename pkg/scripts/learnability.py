"""Transition task: full model against the k_max=1 ablation over a learning-rate grid.

    python scripts/learnability.py --lr 1e-4 3e-4 1e-3 --out runs/learnability
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from hcrn.synthetic import generate, oracle_solvability
from hcrn.training import RunConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, nargs="+", default=[3e-4])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--out", default="runs/learnability")
    args = ap.parse_args()

    base = RunConfig(task="transition", n_train=2000, n_val=500, n_test=500, noise_sigma=0.1, epochs=args.epochs)
    datasets = generate(base.data_spec())
    print(f"oracle accuracy on test split: {oracle_solvability(datasets['test']):.3f}")
    rows = []
    for lr in args.lr:
        for seed in args.seeds:
            for k_max in ("n-1", "1"):
                out = Path(args.out) / f"lr{lr:g}_seed{seed}_k{k_max}"
                result = train(replace(base, lr=lr, seed=seed, k_max=k_max, out_dir=str(out)), datasets)
                row = {"lr": lr, "seed": seed, "k_max": k_max, "best_epoch": result.best_epoch,
                       "val": result.best_val["accuracy"], "test": result.test["accuracy"]}
                rows.append(row)
                print(json.dumps(row))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
