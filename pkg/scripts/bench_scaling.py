"""Print the predicted-vs-measured cost table and the saving-vs-length fit.

    OMP_NUM_THREADS=1 python scripts/bench_scaling.py --d 64
"""

import argparse

from hcrn.bench import BenchConfig, CostModel, measure_cost, predict_cost, run_bench, scaling_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--clip-len", type=int, default=16)
    ap.add_argument("--n-subvideos", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    T, M, F = args.clip_len, args.n_subvideos, args.d
    print(run_bench(BenchConfig(clip_len=T, n_subvideos=M, d=F, repeats=args.repeats)))

    cm = CostModel(T=T, N=24, M=M, F=F)
    two, three = measure_cost(cm, "2"), measure_cost(cm, "3")
    pred = predict_cost(cm)
    print(f"N=24 ratio 2-level/3-level: formula {pred['2-level'] / pred['3-level']:.4f}, "
          f"h^k linear {two.linear / three.linear:.4f}, aggregation {two.relation / three.relation:.4f}, "
          f"wallclock {two.wallclock_ms / three.wallclock_ms:.2f}")

    report = scaling_report([CostModel(T=T, N=n, M=M, F=F) for n in (8, 16, 32)])
    print(report.to_table())
    print(f"fit coefficient {report.coefficient:.4g}, max residual {report.residual:.1%}, doubling {report.doubling}")


if __name__ == "__main__":
    main()
