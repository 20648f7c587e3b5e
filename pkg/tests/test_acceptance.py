"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Criteria 5 and 6 train real models and take roughly twenty minutes together on
one CPU core; select them out with ``-m "not slow"`` for a quick pass.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from hcrn.bench import CostModel, measure_cost, predict_cost, scaling_report
from hcrn.crn import crn_forward, crn_apply
from hcrn.decoders import (
    AnswerSpace,
    count_predict,
    cross_entropy,
    hinge_loss,
    init_head_params,
    loss,
    multichoice_scores,
    openended_logits,
    round_count,
)
from hcrn.gradcheck import finite_diff_check
from hcrn.model import HierarchyConfig, PlanSource, forward
from hcrn.params import ModelParams
from hcrn.sampler import build_plan
from hcrn.synthetic import generate, oracle_solvability
from hcrn.tensor import Tensor, parameter, tsum
from hcrn.training import (
    RunConfig,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    train,
)

import oracles
from test_crn import exhaustive_plan, make_params, weights_by_k
from test_model import batch_for, build
from test_tensor import PRIMITIVES


def report(n, ok, detail):
    ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_paper_scale_out_of_scope():
    ACCEPTANCE.append("criterion 1: SKIP  full-scale benchmark numbers need real video features and GPUs")
    pytest.skip("out of scope at desk scale")


def test_criterion_2_shape_laws():
    start = time.perf_counter()
    bad = []
    grid = (5, 6, 8, 16)
    for N in grid:
        for T in grid:
            cfg, params = build(n_clips=N, clip_len=T, d=4, d_in=3)
            for n in (N, T):
                plan = build_plan(n, n - 1, 2, 0)
                X = Tensor(np.ones((n, 4)))
                out = crn_apply(X, Tensor(np.ones(4)), make_params(n, n - 1, 4, False).scope("u"), plan, False)
                if out.shape[0] != max(n - 2, 1):
                    bad.append(("crn", n, out.shape))
            pooled, _ = forward(batch_for(cfg), params, cfg, PlanSource(cfg, 0))
            shapes = cfg.shapes()
            if shapes["clip"] != (T - 4, 4) or shapes["video"] != (N - 4, T - 4, 4):
                bad.append(("shapes", N, T, shapes))
            if pooled.weights.shape[1] != (N - 4) * (T - 4):
                bad.append(("pooled", N, T, pooled.weights.shape))
    elapsed = time.perf_counter() - start
    report(2, not bad and elapsed < 10, f"16 grid points, violations={bad}, {elapsed:.1f}s (limit 10s)")


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    errors = {}
    for i, (name, op) in enumerate(sorted(PRIMITIVES.items())):
        rng = np.random.default_rng(100 + i)
        a, b = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 3)))

        def prim(op=op, a=a, b=b):
            out = op(a, b)
            return tsum(out * Tensor(np.cos(np.arange(out.size)).reshape(out.shape)))

        errors[f"prim:{name}"] = finite_diff_check(prim, [a, b])

    cfg, params = build(seed=21, n_clips=5, clip_len=5, d=4, d_in=3)
    init_head_params(params, AnswerSpace("openended", n_labels=3), 4, np.random.default_rng(5))
    batch, plans = batch_for(cfg, B=2, seed=8), PlanSource(cfg, 0)

    def micro():
        pooled, q = forward(batch, params, cfg, plans)
        return loss("openended", openended_logits(pooled.pooled, q, params), [0, 2])

    errors["micro-model"] = finite_diff_check(micro, list(params.values()), max_entries=12, seed=1)

    gated = make_params(5, 4, 3, True, seed=4)
    rng = np.random.default_rng(3)
    X, c = parameter(rng.normal(size=(5, 3))), parameter(rng.normal(size=3))
    plan = build_plan(5, 4, 2, 1)
    errors["gated"] = finite_diff_check(
        lambda: tsum(crn_apply(X, c, gated.scope("u"), plan, True) * 0.7), [X, c, *gated.values()]
    )

    for kind in ("openended", "count", "multichoice"):
        head = ModelParams()
        init_head_params(head, AnswerSpace(kind, n_labels=3, lo=0, hi=5), 3, np.random.default_rng(7))
        o, q = Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(3, 3)))
        o_a, a = Tensor(rng.normal(size=(3, 4, 3))), Tensor(rng.normal(size=(3, 4, 3)))

        def head_loss(kind=kind, head=head):
            if kind == "openended":
                return loss(kind, openended_logits(o, q, head), [0, 2, 1])
            if kind == "count":
                return loss(kind, count_predict(o, q, head)[0], [1, 4, 2])
            return loss(kind, multichoice_scores(o, q, o_a, a, head), [0, 3, 1])

        errors[f"loss:{kind}"] = finite_diff_check(head_loss, list(head.values()))
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    report(3, ok, f"{len(errors)} checks, worst {worst}={errors[worst]:.2e} (limit 1e-4), {elapsed:.1f}s (limit 60s)")


def test_criterion_4_crn_oracle():
    start = time.perf_counter()
    worst = 0.0
    for gated in (False, True):
        rng = np.random.default_rng(7)
        params = make_params(3, 2, 2, gated, seed=5, scale=0.5)
        S, c = rng.normal(size=(3, 2)).tolist(), rng.normal(size=2).tolist()
        got = crn_forward([Tensor(s) for s in S], Tensor(c), params.scope("u"), exhaustive_plan(3), gated)
        want = oracles.crn_exhaustive(S, c, weights_by_k(params), gated)
        worst = max(worst, float(np.max(np.abs(np.array([r.data for r in got]) - np.array(want)))))
    elapsed = time.perf_counter() - start
    report(4, worst <= 1e-10 and elapsed < 1, f"max abs diff {worst:.1e} (limit 1e-10), {elapsed:.2f}s")


# The learning rate is the smallest on {1e-4, 3e-4, 1e-3} at which the full
# model clears 0.80 on this task; chosen on the full model alone.
TRANSITION = RunConfig(task="transition", n_train=2000, n_val=500, n_test=500, noise_sigma=0.1, lr=3e-4, seed=0)


@pytest.mark.slow
def test_criterion_5_learnability(tmp_path):
    start = time.perf_counter()
    datasets = generate(TRANSITION.data_spec())
    solvable = oracle_solvability(datasets["test"])
    full = train(replace(TRANSITION, out_dir=str(tmp_path / "full")), datasets).test["accuracy"]
    single = train(replace(TRANSITION, k_max="1", out_dir=str(tmp_path / "kmax1")), datasets).test["accuracy"]
    minutes = (time.perf_counter() - start) / 60
    ok = solvable >= 0.98 and full >= 0.80 and full - single >= 0.05
    report(5, ok, f"oracle {solvable:.3f}, full {full:.3f} (>=0.80), k_max=1 {single:.3f} "
                  f"(gap {100 * (full - single):.1f} pts, >=5), {minutes:.1f} min")


COUNT = RunConfig(task="count", n_train=1000, n_val=300, n_test=300, noise_sigma=0.1, lr=3e-4)


@pytest.mark.slow
def test_criterion_6_motion_ablation(tmp_path):
    full, still = [], []
    for seed in (0, 1, 2):
        cfg = replace(COUNT, seed=seed, data_seed=seed)
        datasets = generate(cfg.data_spec())
        full.append(train(replace(cfg, out_dir=str(tmp_path / f"full{seed}")), datasets).test["mse"])
        ablated = replace(cfg, clip_motion=False, video_motion=False, out_dir=str(tmp_path / f"still{seed}"))
        still.append(train(ablated, datasets).test["mse"])
    ok = np.mean(still) >= np.mean(full)
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(full, still))
    report(6, ok, f"mean MSE full {np.mean(full):.3f} vs w/o motion {np.mean(still):.3f} (per seed {per_seed})")


def test_criterion_7_complexity_model():
    start = time.perf_counter()
    cm = CostModel(T=16, N=24, M=4, F=64)
    ratio = measure_cost(cm, "2").linear / measure_cost(cm, "3").linear
    formula = predict_cost(cm)["2-level"] / predict_cost(cm)["3-level"]
    ratio_err = abs(ratio / formula - 1)
    fit = scaling_report([CostModel(T=16, N=n, M=4, F=64) for n in (8, 16, 32)])
    elapsed = time.perf_counter() - start
    ok = ratio_err <= 0.15 and fit.residual <= 0.15 and elapsed < 300
    report(7, ok, f"h^k MAC ratio {ratio:.4f} vs {formula:.4f} ({ratio_err:.1%}, limit 15%); "
                  f"saving ~ L^2/T fit residual {fit.residual:.1%} (limit 15%), "
                  f"doubling ratios {[round(x, 2) for x in fit.doubling]}, {elapsed:.1f}s")


TINY = RunConfig(n_clips=5, clip_len=5, d=8, d_in=6, min_segment=2, n_train=24, n_val=12, n_test=12,
                 batch_size=8, epochs=2, seed=4)


def test_criterion_8_determinism(tmp_path):
    a = train(replace(TINY, out_dir=str(tmp_path / "a")))
    b = train(replace(TINY, out_dir=str(tmp_path / "b")))
    same_metrics = read_metrics(a.metrics_path, drop_wallclock=True) == read_metrics(b.metrics_path, drop_wallclock=True)

    blob = checkpoint_bytes(a.model.params, TINY)
    save_checkpoint(tmp_path / "c.ckpt", a.model.params, TINY)
    fresh = build_model(TINY, len(generate(TINY.data_spec())["train"].vocab), seed=99)
    load_checkpoint(tmp_path / "c.ckpt", fresh.params)
    round_trip = checkpoint_bytes(fresh.params, TINY) == blob == (tmp_path / "c.ckpt").read_bytes()
    report(8, same_metrics and round_trip, f"identical metrics streams {same_metrics}, bit-identical round trip {round_trip}")


def test_criterion_9_loss_units():
    checks = {
        "hinge(2, 0.5)": float(hinge_loss(Tensor([2.0, 0.5]), 0).data) == 0.0,
        "hinge(0.2, 0.5)": float(hinge_loss(Tensor([0.2, 0.5]), 0).data) == 1.3,
        "CE perfect": float(cross_entropy(Tensor([[0.0, 1.0, 0.0]]), [1]).data) == 0.0,
        "round 3.4": int(round_count(3.4)) == 3,
        "round 3.5": int(round_count(3.5)) == 4,
    }
    report(9, all(checks.values()), " ".join(f"{k}={'ok' if v else 'WRONG'}" for k, v in checks.items()))
