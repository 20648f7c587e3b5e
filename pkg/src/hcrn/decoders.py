"""Answer heads and their losses.

* open-ended: two ELU layers over ``[o, Wq q + b]`` then a softmax over labels;
* count: the same trunk followed by a scalar linear regression, rounded at
  inference;
* multi-choice: a scalar score per candidate from
  ``[o_q, o_a, Wq q + b, Wa a + b]``, trained with a pairwise hinge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .params import ModelParams
from .tensor import (
    ShapeError,
    Tensor,
    apply_linear,
    as_tensor,
    broadcast_to,
    concat,
    elu,
    getitem,
    log,
    log_softmax,
    relu,
    reshape,
    softmax,
    tmean,
    tsum,
)

KINDS = ("openended", "count", "multichoice")


@dataclass
class AnswerSpace:
    kind: str
    n_labels: int = 0
    lo: int = 0
    hi: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"answer kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "openended" and self.n_labels < 2:
            raise ValueError("open-ended answer space needs at least two labels")
        if self.kind == "count" and self.lo > self.hi:
            raise ValueError(f"count range [{self.lo}, {self.hi}] is empty")

    def check_target(self, target) -> None:
        target = np.asarray(target)
        if self.kind == "openended" and ((target < 0) | (target >= self.n_labels)).any():
            raise ValueError(f"label out of range [0, {self.n_labels})")
        if self.kind == "count" and ((target < self.lo) | (target > self.hi)).any():
            raise ValueError(f"count target out of range [{self.lo}, {self.hi}]")


def init_head_params(params: ModelParams, space: AnswerSpace, d: int, rng) -> None:
    if space.kind == "multichoice":
        params.linear("head.wq", d, d, rng)
        params.linear("head.wa", d, d, rng)
        params.linear("head.wy", 4 * d, d, rng)
        params.linear("head.out", d, 1, rng)
        return
    params.linear("head.wq", d, d, rng)
    params.linear("head.wo", 2 * d, d, rng)
    params.linear("head.wy", d, d, rng)
    if space.kind == "openended":
        params.linear("head.out", d, space.n_labels, rng)
    else:
        params.linear("head.count", d, 1, rng)


def _lin(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return apply_linear(x, params[f"{name}.w"], params[f"{name}.b"])


def _trunk(pooled: Tensor, q: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    if pooled.shape != q.shape:
        raise ShapeError(f"visual {pooled.shape} and question {q.shape} shapes differ")
    y = elu(_lin(concat([pooled, _lin(q, params, "head.wq")], axis=-1), params, "head.wo"))
    return elu(_lin(y, params, "head.wy"))


def openended_logits(pooled: Tensor, q: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return _lin(_trunk(pooled, q, params), params, "head.out")


def openended_probs(pooled: Tensor, q: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return softmax(openended_logits(pooled, q, params), axis=-1)


def round_count(raw, lo: int | None = None, hi: int | None = None) -> np.ndarray:
    """Round half away from zero, then clamp to ``[lo, hi]`` when given."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.sign(raw) * np.floor(np.abs(raw) + 0.5)
    if lo is not None or hi is not None:
        out = np.clip(out, lo, hi)
    return out.astype(np.int64)


def count_predict(
    pooled: Tensor, q: Tensor, params: Mapping[str, Tensor], lo: int | None = None, hi: int | None = None
) -> tuple[Tensor, np.ndarray]:
    """Raw regression output (shape ``(...,)``) and its rounded, clamped integer."""
    raw = _lin(_trunk(pooled, q, params), params, "head.count")
    raw = reshape(raw, raw.shape[:-1])
    return raw, round_count(raw.data, lo, hi)


def multichoice_scores(
    o_q: Tensor, q: Tensor, o_a: Tensor, a: Tensor, params: Mapping[str, Tensor]
) -> Tensor:
    """Scores ``(B, C)`` for candidates ``o_a, a`` of shape ``(B, C, d)``."""
    if o_a.ndim != 3 or o_a.shape[1] < 1:
        raise ShapeError("multichoice_scores: need candidate tensors of shape (B, C, d)")
    B, C, d = o_a.shape
    rep = lambda x: broadcast_to(reshape(x, (B, 1, d)), (B, C, d))  # noqa: E731
    y = concat(
        [rep(o_q), o_a, rep(_lin(q, params, "head.wq")), _lin(a, params, "head.wa")], axis=-1
    )
    s = _lin(elu(_lin(y, params, "head.wy")), params, "head.out")
    return reshape(s, (B, C))


# ---------------------------------------------------------------------------
# losses (batch means)
# ---------------------------------------------------------------------------


def _index_last(x: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.int64)
    if x.ndim == 1:
        return getitem(x, int(target))
    return getitem(x, (np.arange(x.shape[0]), target))


def cross_entropy(probs: Tensor, target) -> Tensor:
    """``-log p[target]`` from probabilities, averaged over the batch."""
    return tmean(-log(_index_last(as_tensor(probs), target)))


def cross_entropy_logits(logits: Tensor, target) -> Tensor:
    return tmean(-_index_last(log_softmax(logits, axis=-1), target))


def mse_loss(raw: Tensor, target) -> Tensor:
    diff = as_tensor(raw) - Tensor(np.asarray(target, dtype=np.float64), dtype=as_tensor(raw).dtype)
    return tmean(diff * diff)


def hinge_loss(scores: Tensor, correct) -> Tensor:
    """Sum over wrong candidates of ``max(0, 1 + s_wrong - s_right)``, batch mean."""
    scores = as_tensor(scores)
    single = scores.ndim == 1
    if single:
        scores = reshape(scores, (1,) + scores.shape)
    correct = np.atleast_1d(np.asarray(correct, dtype=np.int64))
    B, C = scores.shape
    if C < 2:
        raise ShapeError("hinge_loss: need at least two candidates")
    s_pos = reshape(getitem(scores, (np.arange(B), correct)), (B, 1))
    margins = relu(1.0 + scores - broadcast_to(s_pos, (B, C)))
    wrong = np.ones((B, C))
    wrong[np.arange(B), correct] = 0.0
    return tmean(tsum(margins * Tensor(wrong, dtype=scores.dtype), axis=1))


def loss(kind: str, prediction: Tensor, target) -> Tensor:
    """Task loss: ``prediction`` is logits (open-ended), raw counts, or scores."""
    if kind == "openended":
        n = prediction.shape[-1]
        t = np.asarray(target)
        if ((t < 0) | (t >= n)).any():
            raise ValueError(f"label out of range [0, {n})")
        return cross_entropy_logits(prediction, target)
    if kind == "count":
        return mse_loss(prediction, target)
    if kind == "multichoice":
        C = prediction.shape[-1]
        t = np.asarray(target)
        if ((t < 0) | (t >= C)).any():
            raise ValueError(f"correct candidate index out of range [0, {C})")
        return hinge_loss(prediction, target)
    raise ValueError(f"unknown task kind {kind!r}")
