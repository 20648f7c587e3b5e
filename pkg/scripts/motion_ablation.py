"""Count task: full model against the model with both motion conditioning units removed.

    python scripts/motion_ablation.py --seeds 0 1 2 --out runs/motion
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from hcrn.synthetic import generate
from hcrn.training import RunConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--out", default="runs/motion")
    args = ap.parse_args()

    base = RunConfig(task="count", n_train=args.n_train, n_val=300, n_test=300, noise_sigma=0.1, lr=args.lr)
    results = {"full": [], "w/o motion": []}
    for seed in args.seeds:
        cfg = replace(base, seed=seed, data_seed=seed)
        datasets = generate(cfg.data_spec())
        variants = {"full": cfg, "w/o motion": replace(cfg, clip_motion=False, video_motion=False)}
        for name, variant in variants.items():
            out = Path(args.out) / f"{name.replace('/', '').replace(' ', '_')}_seed{seed}"
            mse = train(replace(variant, out_dir=str(out)), datasets).test["mse"]
            results[name].append(mse)
            print(json.dumps({"seed": seed, "variant": name, "test_mse": mse}))
    for name, values in results.items():
        print(f"{name}: mean test MSE {np.mean(values):.3f} over {len(values)} seeds")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
