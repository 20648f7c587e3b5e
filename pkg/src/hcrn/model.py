"""Hierarchical assembly of CRN units and question-guided attention pooling.

Each level stacks a motion-conditioned CRN followed by a question-conditioned
(gated) CRN.  Level layouts:

``"2"``    frames -> clip CRNs -> video CRNs -> attention pool
``"3"``    frames -> clip CRNs -> sub-video CRNs -> video CRNs -> attention pool
``"1"``    middle frame of every clip -> video CRNs -> attention pool
``"1.5"``  frames -> clip CRNs -> mean over clips -> attention pool

Tensors are batched: clip-level work folds the clip axis into the batch.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .crn import crn_apply, init_crn_params
from .encoders import encode_question, init_encoder_params, init_lstm, project_features, run_lstm
from .params import ModelParams
from .sampler import SubsetPlan, build_plan, plan_sizes
from .tensor import (
    ShapeError,
    Tensor,
    apply_linear,
    broadcast_to,
    concat,
    elu,
    getitem,
    hadamard,
    reshape,
    softmax,
    stack,
    tmean,
    tsum,
    mul,
)

LEVELS = ("1", "1.5", "2", "3")


@dataclass
class HierarchyConfig:
    n_clips: int = 8
    clip_len: int = 16
    d: int = 64
    d_in: int = 32
    t: int = 2
    k_max: str = "n-1"  # "n-1", "n/2" or an integer
    levels: str = "2"
    n_subvideos: int = 4
    gate_question: bool = True
    gate_motion: bool = False
    clip_motion: bool = True
    video_motion: bool = True
    clip_question: bool = True
    video_question: bool = True
    vocab_size: int = 32
    embed_dim: int = 0  # 0 means d // 2

    def __post_init__(self):
        self.levels = str(self.levels)
        if self.levels.endswith(".0"):
            self.levels = self.levels[:-2]
        self.k_max = str(self.k_max)

    @property
    def embedding_width(self) -> int:
        return self.embed_dim or self.d // 2

    @property
    def clips_per_subvideo(self) -> int:
        return self.n_clips // self.n_subvideos

    def resolve_k_max(self, n: int) -> int:
        if n == 1:
            return 1  # a lone object is its own only subset
        if self.k_max == "n-1":
            k = n - 1
        elif self.k_max == "n/2":
            k = n // 2
        else:
            p = int(self.k_max)
            if p < 1:
                raise ValueError(f"k_max must be >= 1, got {p}")
            k = 1 if p == 1 else min(p, n - 1)
        if k < 1:
            raise ValueError(f"no valid k_max for an array of {n} objects under policy {self.k_max!r}")
        return k

    def out_len(self, n: int) -> int:
        return len(plan_sizes(n, self.resolve_k_max(n)))

    def level_units(self, level: str) -> list[tuple[str, str]]:
        """``(unit name, condition kind)`` pairs for one level, in order."""
        motion = {"clip": self.clip_motion, "sub": self.video_motion, "video": self.video_motion}[level]
        question = {"clip": self.clip_question, "sub": self.video_question, "video": self.video_question}[
            level
        ]
        units = []
        if motion:
            units.append((f"{level}.motion", "motion"))
        if question:
            units.append((f"{level}.question", "question"))
        return units

    def gated(self, kind: str) -> bool:
        return self.gate_question if kind == "question" else self.gate_motion

    def stack_len(self, level: str, n: int) -> list[int]:
        """Array lengths entering each unit of ``level``, then the final length."""
        sizes = [n]
        for _ in self.level_units(level):
            sizes.append(self.out_len(sizes[-1]))
        return sizes

    def validate(self) -> None:
        if self.levels not in LEVELS:
            raise ValueError(f"levels must be one of {LEVELS}, got {self.levels!r}")
        if self.d % 2:
            raise ValueError("d must be even")
        if self.levels == "2" and (self.clip_len < 5 or self.n_clips < 5):
            raise ValueError(f"2-level hierarchy needs T >= 5 and N >= 5, got T={self.clip_len}, N={self.n_clips}")
        if self.levels == "3" and (self.n_subvideos < 1 or self.n_clips % self.n_subvideos):
            raise ValueError(f"N={self.n_clips} is not divisible by M={self.n_subvideos}")
        self.shapes()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Shape law of every stage for one sample (no batch axis)."""
        T, N, d = self.clip_len, self.n_clips, self.d
        out: dict[str, tuple[int, ...]] = {}
        if self.levels == "1":
            n_vid = self.stack_len("video", N)[-1]
            out["video"] = (n_vid, d)
            out["pooled_rows"] = (n_vid,)
            return out
        H = self.stack_len("clip", T)[-1]
        out["clip"] = (H, d)
        if self.levels == "1.5":
            out["pooled_rows"] = (H,)
            return out
        if self.levels == "2":
            n_vid = self.stack_len("video", N)[-1]
            out["video"] = (n_vid, H, d)
            out["pooled_rows"] = (n_vid * H,)
            return out
        M, Q = self.n_subvideos, self.clips_per_subvideo
        q_out = self.stack_len("sub", Q)[-1]
        out["sub"] = (q_out, H, d)
        n_vid = self.stack_len("video", M)[-1]
        out["video"] = (n_vid, q_out * H, d)
        out["pooled_rows"] = (n_vid * q_out * H,)
        return out


@dataclass
class PooledOutput:
    pooled: Tensor  # (batch, d)
    weights: Tensor  # (batch, H')


class PlanSource:
    """Hands out subset plans per CRN unit.

    ``resample=True`` draws a fresh plan on every request from one advancing
    stream; otherwise each ``(unit, n)`` gets a plan frozen from ``seed``.
    """

    def __init__(self, config: HierarchyConfig, seed: int, resample: bool = False):
        self.config = config
        self.seed = int(seed)
        self.resample = resample
        self._rng = np.random.default_rng(self.seed)
        self._frozen: dict[tuple[str, int], SubsetPlan] = {}

    def plan(self, unit: str, n: int) -> SubsetPlan:
        k_max = self.config.resolve_k_max(n)
        if self.resample:
            return build_plan(n, k_max, self.config.t, self._rng)
        key = (unit, n)
        if key not in self._frozen:
            seq = np.random.SeedSequence([self.seed, zlib.crc32(unit.encode())])
            self._frozen[key] = build_plan(n, k_max, self.config.t, seq)
        return self._frozen[key]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_hierarchy_params(params: ModelParams, cfg: HierarchyConfig, rng) -> None:
    cfg.validate()
    init_encoder_params(params, cfg.d_in, cfg.d, cfg.vocab_size, cfg.embedding_width, rng)
    levels = []
    if cfg.levels in ("1.5", "2", "3"):
        levels.append(("clip", cfg.clip_len))
    if cfg.levels == "3":
        levels.append(("sub", cfg.clips_per_subvideo))
        levels.append(("video", cfg.n_subvideos))
        init_lstm(params, "subvideo_motion_lstm", cfg.d, cfg.d, rng)
    elif cfg.levels in ("1", "2"):
        levels.append(("video", cfg.n_clips))
    for level, n in levels:
        sizes = cfg.stack_len(level, n)
        for (unit, kind), n_in in zip(cfg.level_units(level), sizes):
            init_crn_params(params, unit, n_in, cfg.resolve_k_max(n_in), cfg.d, cfg.gated(kind), rng)
    d = cfg.d
    params.glorot("attn.wo.w", d, d, rng)
    params.glorot("attn.wq.w", d, d, rng)
    params.linear("attn.wi", 2 * d, d, rng)
    params.linear("attn.wg", d, 1, rng)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _repeat_rows(x: Tensor, times: int) -> Tensor:
    """``(B, d) -> (B * times, d)`` with each row repeated ``times`` times."""
    B, d = x.shape
    return reshape(broadcast_to(reshape(x, (B, 1, d)), (B, times, d)), (B * times, d))


def _run_level(
    X: Tensor,
    conditions: Mapping[str, Tensor],
    level: str,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
) -> Tensor:
    for unit, kind in cfg.level_units(level):
        plan = plans.plan(unit, X.shape[1])
        X = crn_apply(X, conditions[kind], _unit_params(params, unit), plan, cfg.gated(kind))
    return X


def _unit_params(params: Mapping[str, Tensor], unit: str) -> dict[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.scope(unit)
    cut = len(unit) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(unit + ".")}


def clip_stack(
    frames: Tensor,
    clip_motion: Tensor,
    q: Tensor,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
) -> Tensor:
    """Clip-level CRN stack.

    ``frames`` is ``(B, T, d)`` (or a list of ``T`` tensors of shape ``(B, d)``);
    ``clip_motion`` and ``q`` are ``(B, d)``.  Returns ``(B, T - 4, d)`` under the
    default configuration.
    """
    if isinstance(frames, (list, tuple)):
        frames = stack(frames, axis=1)
    if frames.shape[1] < 5 and cfg.k_max == "n-1" and len(cfg.level_units("clip")) == 2:
        raise ShapeError(f"clip stack needs at least 5 frames, got {frames.shape[1]}")
    return _run_level(frames, {"motion": clip_motion, "question": q}, "clip", params, cfg, plans)


def video_stack(
    clips: Tensor,
    motion_vid: Tensor,
    q: Tensor,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
    level: str = "video",
) -> Tensor:
    """Video-level CRN stack over ``(B, N, *positions, d)`` clip summaries."""
    if isinstance(clips, (list, tuple)):
        clips = stack(clips, axis=1)
    if level == "video" and cfg.levels == "2" and clips.shape[1] < 5:
        raise ShapeError(f"video stack needs at least 5 clips, got {clips.shape[1]}")
    return _run_level(clips, {"motion": motion_vid, "question": q}, level, params, cfg, plans)


def attention_pool(O, q: Tensor, params: Mapping[str, Tensor]) -> PooledOutput:
    """Question-guided convex combination of all output rows.

    ``O`` is ``(B, n, *positions, d)`` (or a non-empty list of ``(B, *positions, d)``).
    """
    if isinstance(O, (list, tuple)):
        if not O:
            raise ShapeError("attention_pool: empty object array")
        O = stack(O, axis=1)
    if O.shape[1] == 0:
        raise ShapeError("attention_pool: empty object array")
    B, d = O.shape[0], O.shape[-1]
    rows = int(np.prod(O.shape[1:-1]))
    flat = reshape(O, (B, rows, d))
    proj = apply_linear(flat, params["attn.wo.w"])
    qproj = reshape(apply_linear(q, params["attn.wq.w"]), (B, 1, d))
    joint = concat([proj, hadamard(proj, qproj)], axis=-1)
    inner = elu(apply_linear(joint, params["attn.wi.w"], params["attn.wi.b"]))
    logits = reshape(apply_linear(inner, params["attn.wg.w"], params["attn.wg.b"]), (B, rows))
    gamma = softmax(logits, axis=1)
    pooled = tsum(mul(flat, reshape(gamma, (B, rows, 1))), axis=1)
    return PooledOutput(pooled, gamma)


# ---------------------------------------------------------------------------
# full forward passes
# ---------------------------------------------------------------------------


def encode_video(
    app: Tensor,
    motion: Tensor,
    cue: Tensor,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
) -> PooledOutput:
    """Projected features ``app (B, N, T, d)`` and ``motion (B, N, d)`` to pooled output."""
    B, N, T, d = app.shape
    motion_steps = [getitem(motion, (slice(None), i)) for i in range(N)]
    needs_video_motion = cfg.video_motion and cfg.levels in ("1", "2", "3")
    motion_vid = run_lstm(motion_steps, _lstm(params, "motion_lstm")) if needs_video_motion else None

    if cfg.levels == "1":
        key = getitem(app, (slice(None), slice(None), T // 2))
        out = video_stack(key, motion_vid, cue, params, cfg, plans)
        return attention_pool(out, cue, params)

    frames = reshape(app, (B * N, T, d))
    clip_out = clip_stack(
        frames, reshape(motion, (B * N, d)), _repeat_rows(cue, N), params, cfg, plans
    )
    H = clip_out.shape[1]
    clips = reshape(clip_out, (B, N, H, d))

    if cfg.levels == "1.5":
        return attention_pool(tmean(clips, axis=1, keepdims=True), cue, params)
    if cfg.levels == "2":
        return attention_pool(video_stack(clips, motion_vid, cue, params, cfg, plans), cue, params)

    M, Q = cfg.n_subvideos, cfg.clips_per_subvideo
    groups = reshape(clips, (B * M, Q, H, d))
    sub_motion = None
    if cfg.level_units("sub") and any(kind == "motion" for _, kind in cfg.level_units("sub")):
        grouped = reshape(motion, (B * M, Q, d))
        sub_motion = run_lstm(
            [getitem(grouped, (slice(None), i)) for i in range(Q)], _lstm(params, "subvideo_motion_lstm")
        )
    sub_out = video_stack(groups, sub_motion, _repeat_rows(cue, M), params, cfg, plans, level="sub")
    Qo = sub_out.shape[1]
    subvideos = reshape(sub_out, (B, M, Qo * H, d))
    out = video_stack(subvideos, motion_vid, cue, params, cfg, plans)
    return attention_pool(out, cue, params)


def _lstm(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {key: params[f"{prefix}.{key}"] for key in ("wx", "wh", "b")}


@dataclass
class VideoBatch:
    appearance: np.ndarray  # (B, N, T, d_in)
    motion: np.ndarray  # (B, N, d_in)
    question: np.ndarray  # (B, L) int, right padded
    question_len: np.ndarray  # (B,)
    answer: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    candidates: np.ndarray | None = None  # (B, C, La)
    candidate_len: np.ndarray | None = None  # (B, C)

    def __len__(self) -> int:
        return self.appearance.shape[0]


def forward(
    batch: VideoBatch,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
) -> tuple[PooledOutput, Tensor]:
    """Project, encode the question and run the configured hierarchy."""
    dtype = params["proj.app.w"].dtype
    app, mot = project_features(
        Tensor(batch.appearance, dtype=dtype), Tensor(batch.motion, dtype=dtype), params
    )
    q = encode_question(batch.question, params, batch.question_len)
    return encode_video(app, mot, q, params, cfg, plans), q


def forward_2level(batch, params, cfg: HierarchyConfig, plans: PlanSource):
    if cfg.levels != "2":
        raise ValueError("forward_2level needs levels='2'")
    pooled, q = forward(batch, params, cfg, plans)
    return pooled.pooled, q


def forward_3level(batch, params, cfg: HierarchyConfig, plans: PlanSource):
    if cfg.levels != "3":
        raise ValueError("forward_3level needs levels='3'")
    pooled, q = forward(batch, params, cfg, plans)
    return pooled.pooled, q


def forward_candidates(
    batch: VideoBatch,
    params: Mapping[str, Tensor],
    cfg: HierarchyConfig,
    plans: PlanSource,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Shared-parameter passes conditioned on the question and on every candidate.

    Returns ``(o_q (B, d), q (B, d), o_a (B, C, d), a (B, C, d))``.
    """
    if batch.candidates is None or batch.candidates.shape[1] < 2:
        raise ShapeError("multi-choice needs at least two candidates")
    dtype = params["proj.app.w"].dtype
    app, mot = project_features(
        Tensor(batch.appearance, dtype=dtype), Tensor(batch.motion, dtype=dtype), params
    )
    B, C, La = batch.candidates.shape
    q = encode_question(batch.question, params, batch.question_len)
    a = encode_question(batch.candidates.reshape(B * C, La), params, batch.candidate_len.reshape(-1))
    cues = concat([reshape(q, (B, 1, cfg.d)), reshape(a, (B, C, cfg.d))], axis=1)
    cues = reshape(cues, (B * (C + 1), cfg.d))
    N, T = app.shape[1], app.shape[2]
    app_rep = reshape(
        broadcast_to(reshape(app, (B, 1, N, T, cfg.d)), (B, C + 1, N, T, cfg.d)),
        (B * (C + 1), N, T, cfg.d),
    )
    mot_rep = reshape(
        broadcast_to(reshape(mot, (B, 1, N, cfg.d)), (B, C + 1, N, cfg.d)), (B * (C + 1), N, cfg.d)
    )
    pooled = reshape(encode_video(app_rep, mot_rep, cues, params, cfg, plans).pooled, (B, C + 1, cfg.d))
    o_q = getitem(pooled, (slice(None), 0))
    o_a = getitem(pooled, (slice(None), slice(1, None)))
    return o_q, q, o_a, reshape(a, (B, C, cfg.d))
