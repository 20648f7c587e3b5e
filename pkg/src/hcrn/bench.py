"""Closed-form CRN cost model against instrumented forward passes.

With ``t = 2`` and ``k_max = n - 1`` a CRN over ``n`` objects of size ``P``
costs about ``2 n P``.  For ``N`` clips of ``T`` frames, ``L = N T`` and
feature size ``F`` this gives ``2 (T + N) L F`` for two levels and
``2 (T + N/M + M) L F`` once clips are grouped into ``M`` sub-videos.

Measured cost is the multiply-accumulate count of every ``h_k`` linear map
inside the CRN units (:class:`hcrn.crn.MacTally.linear`).  The subset
aggregation count is reported alongside it; encoder and pooling work is
estimated separately and never mixed into either figure.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .crn import count_macs
from .model import HierarchyConfig, PlanSource, VideoBatch, forward, init_hierarchy_params
from .params import ModelParams
from .tensor import no_grad


@dataclass
class CostModel:
    T: int = 16
    N: int = 8
    M: int = 4
    F: int = 64
    t: int = 2
    k_max: str = "n-1"

    @property
    def L(self) -> int:
        return self.N * self.T


def predict_cost(cm: CostModel) -> dict[str, float]:
    """Formula costs for both depths and their difference."""
    if cm.t != 2 or cm.k_max != "n-1":
        warnings.warn(
            f"cost formulas assume t=2, k_max=n-1 (got t={cm.t}, k_max={cm.k_max}); computing anyway",
            stacklevel=2,
        )
    two = 2 * (cm.T + cm.N) * cm.L * cm.F
    three = 2 * (cm.T + cm.N / cm.M + cm.M) * cm.L * cm.F
    return {"2-level": float(two), "3-level": float(three), "saving": float(two - three)}


@dataclass
class Measured:
    linear: int
    relation: int
    other: int
    wallclock_ms: float


def _other_macs(cfg: HierarchyConfig, rows: int, q_len: int) -> int:
    N, T, d, din = cfg.n_clips, cfg.clip_len, cfg.d, cfg.d_in
    proj = (N * T + N) * din * d
    lstm = N * 8 * d * d
    if cfg.levels == "3":
        lstm += N * 8 * d * d
    question = q_len * 2 * 4 * (cfg.embedding_width * d // 2 + (d // 2) ** 2)
    attn = d * d + rows * (d * d + 2 * d * d + d)
    return proj + lstm + question + attn


def measure_cost(cm: CostModel, level: str, seed: int = 0, d_in: int = 8, repeats: int = 1) -> Measured:
    """Run one forward pass of a randomly initialised model (``d`` tied to ``F``)."""
    cfg = HierarchyConfig(
        n_clips=cm.N, clip_len=cm.T, d=cm.F, d_in=d_in, t=cm.t, k_max=cm.k_max, levels=level, n_subvideos=cm.M,
        vocab_size=8,
    )
    rng = np.random.default_rng(seed)
    params = ModelParams()
    init_hierarchy_params(params, cfg, rng)
    batch = VideoBatch(
        rng.normal(size=(1, cm.N, cm.T, d_in)),
        rng.normal(size=(1, cm.N, d_in)),
        np.array([[1, 2]]),
        np.array([2]),
    )
    plans = PlanSource(cfg, seed)
    best = float("inf")
    with no_grad():
        for _ in range(max(repeats, 1)):
            start = time.perf_counter()
            with count_macs() as tally:
                pooled, _ = forward(batch, params, cfg, plans)
            best = min(best, (time.perf_counter() - start) * 1e3)
    rows = pooled.weights.shape[1]
    return Measured(tally.linear, tally.relation, _other_macs(cfg, rows, 2), best)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingRow:
    L: int
    predicted_saving: float
    measured_saving: float
    measured_2: int
    measured_3: int


@dataclass
class ScalingReport:
    rows: list[ScalingRow]
    coefficient: float  # a in saving = a L^2 / T
    residual: float  # max relative deviation of the fit
    doubling: list[float]  # successive measured saving ratios, by increasing L
    fitted: list[float]

    def to_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "predicted_saving", "measured_saving", "fit", "measured_2level", "measured_3level"])
        for r, fit in zip(self.rows, self.fitted):
            w.writerow([r.L, r.predicted_saving, r.measured_saving, f"{fit:.1f}", r.measured_2, r.measured_3])
        return buf.getvalue()


def scaling_report(configs: list[CostModel], seed: int = 0) -> ScalingReport:
    """Measure the 2- vs 3-level saving and fit ``saving = a L^2 / T``."""
    if len(configs) < 3:
        raise ValueError(f"scaling report needs at least three configurations, got {len(configs)}")
    rows = []
    for cm in configs:
        two = measure_cost(cm, "2", seed).linear
        three = measure_cost(cm, "3", seed).linear
        rows.append(ScalingRow(cm.L, predict_cost(cm)["saving"], float(two - three), two, three))
    x = np.array([cm.L**2 / cm.T for cm in configs], dtype=float)
    y = np.array([r.measured_saving for r in rows])
    a = float(x @ y / (x @ x))
    fitted = a * x
    residual = float(np.max(np.abs(fitted - y) / np.abs(y)))
    ordered = sorted(rows, key=lambda r: r.L)
    doubling = [b.measured_saving / a_.measured_saving for a_, b in zip(ordered, ordered[1:])]
    return ScalingReport(rows, a, residual, doubling, list(fitted))


# ---------------------------------------------------------------------------
# table driven benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    clip_len: int = 16
    n_clips: str = "8,16,24,32"  # comma separated
    n_subvideos: int = 4
    d: int = 64
    t: int = 2
    levels: str = "2,3"
    seed: int = 0
    repeats: int = 1


def run_bench(bc: BenchConfig) -> str:
    """Delimited table: config id, level, predicted, measured, wallclock_ms."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config_id", "level", "predicted", "measured", "wallclock_ms", "relation_macs", "other_macs"])
    for n in (int(v) for v in bc.n_clips.split(",") if v.strip()):
        cm = CostModel(T=bc.clip_len, N=n, M=bc.n_subvideos, F=bc.d, t=bc.t)
        pred = predict_cost(cm)
        for level in (v.strip() for v in bc.levels.split(",") if v.strip()):
            m = measure_cost(cm, level, bc.seed, repeats=bc.repeats)
            w.writerow(
                [f"T{cm.T}_N{cm.N}_M{cm.M}_F{cm.F}", level, int(pred[f"{level}-level"]), m.linear,
                 f"{m.wallclock_ms:.2f}", m.relation, m.other]
            )
    return buf.getvalue()
