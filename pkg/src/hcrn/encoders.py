"""Input encoders: feature projections, LSTM cell, question biLSTM, motion LSTM."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .params import ModelParams
from .tensor import (
    ShapeError,
    Tensor,
    add,
    apply_linear,
    concat,
    getitem,
    mul,
    reshape,
    sigmoid,
    tanh,
)

EMBED_INIT = 0.08


def init_lstm(params: ModelParams, prefix: str, d_x: int, d_h: int, rng) -> None:
    params.glorot(f"{prefix}.wx", d_x, 4 * d_h, rng)
    params.glorot(f"{prefix}.wh", d_h, 4 * d_h, rng)
    params.zeros(f"{prefix}.b", 4 * d_h)


def init_encoder_params(
    params: ModelParams, d_in: int, d: int, vocab_size: int, embed_dim: int, rng
) -> None:
    if d % 2:
        raise ValueError(f"model width d={d} must be even for the bidirectional question encoder")
    params.linear("proj.app", d_in, d, rng)
    params.linear("proj.motion", d_in, d, rng)
    params.new("question.embed", rng.uniform(-EMBED_INIT, EMBED_INIT, size=(vocab_size, embed_dim)))
    init_lstm(params, "question.fwd", embed_dim, d // 2, rng)
    init_lstm(params, "question.bwd", embed_dim, d // 2, rng)
    init_lstm(params, "motion_lstm", d, d, rng)


def project_features(
    appearance: Tensor, motion: Tensor, params: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """Map raw frame and clip-motion features into the model width."""
    w = params["proj.app.w"]
    if appearance.shape[-1] != w.shape[0] or motion.shape[-1] != params["proj.motion.w"].shape[0]:
        raise ShapeError(
            f"feature width {appearance.shape[-1]}/{motion.shape[-1]} != projection input {w.shape[0]}"
        )
    app = apply_linear(appearance, w, params["proj.app.b"])
    mot = apply_linear(motion, params["proj.motion.w"], params["proj.motion.b"])
    return app, mot


def lstm_step(
    x: Tensor, state: tuple[Tensor, Tensor], weights: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate blocks are ordered input, forget, cell, output."""
    h, c = state
    wx, wh, b = weights["wx"], weights["wh"], weights["b"]
    d_h = wh.shape[0]
    if x.shape[-1] != wx.shape[0] or h.shape[-1] != d_h or c.shape[-1] != d_h:
        raise ShapeError(
            f"lstm_step: input {x.shape} / state {h.shape} do not match weights {wx.shape}, {wh.shape}"
        )
    z = add(apply_linear(x, wx, b), apply_linear(h, wh))
    i = sigmoid(getitem(z, (..., slice(0, d_h))))
    f = sigmoid(getitem(z, (..., slice(d_h, 2 * d_h))))
    g = tanh(getitem(z, (..., slice(2 * d_h, 3 * d_h))))
    o = sigmoid(getitem(z, (..., slice(3 * d_h, 4 * d_h))))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def _scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {key: params[f"{prefix}.{key}"] for key in ("wx", "wh", "b")}


def run_lstm(
    steps: Sequence[Tensor], weights: Mapping[str, Tensor], masks: Sequence[np.ndarray] | None = None
) -> Tensor:
    """Run from a zero state and return the final hidden state.

    ``masks[t]`` (shape ``(batch, 1)``, 0 or 1) freezes the state of finished
    sequences so that padding after the last real token has no effect.
    """
    if len(steps) == 0:
        raise ShapeError("run_lstm: empty sequence")
    d_h = weights["wh"].shape[0]
    zero = Tensor(np.zeros(steps[0].shape[:-1] + (d_h,)), dtype=steps[0].dtype)
    h, c = zero, zero
    for t, x in enumerate(steps):
        h_new, c_new = lstm_step(x, (h, c), weights)
        if masks is None or masks[t].all():
            h, c = h_new, c_new
        else:
            keep = Tensor(masks[t], dtype=x.dtype)
            drop = Tensor(1.0 - masks[t], dtype=x.dtype)
            h = add(mul(keep, h_new), mul(drop, h))
            c = add(mul(keep, c_new), mul(drop, c))
    return h


def encode_question(tokens, params: Mapping[str, Tensor], lengths=None) -> Tensor:
    """biLSTM question encoding: ``[final forward h, final backward h]``.

    ``tokens`` is a 1-D id sequence (returns shape ``(d,)``) or a right-padded
    ``(batch, L)`` id matrix with per-row ``lengths`` (returns ``(batch, d)``).
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    batch, width = ids.shape
    lengths = np.full(batch, width) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if width == 0 or (lengths < 1).any():
        raise ShapeError("encode_question: questions need at least one token")
    embed = params["question.embed"]
    vocab = embed.shape[0]
    live = np.arange(width)[None, :] < lengths[:, None]
    if ((ids >= vocab) | (ids < 0))[live].any():
        bad = int(ids[live][(ids[live] >= vocab) | (ids[live] < 0)][0])
        raise KeyError(f"unknown token id {bad} (vocabulary size {vocab})")
    ids = np.where(live, ids, 0)

    rev = np.zeros_like(ids)
    for row in range(batch):
        n = lengths[row]
        rev[row, :n] = ids[row, :n][::-1]

    masks = None
    if not live.all():
        masks = [live[:, t : t + 1].astype(float) for t in range(width)]
    fwd_x = getitem(embed, ids)
    bwd_x = getitem(embed, rev)
    fwd_steps = [getitem(fwd_x, (slice(None), t)) for t in range(width)]
    bwd_steps = [getitem(bwd_x, (slice(None), t)) for t in range(width)]
    h_f = run_lstm(fwd_steps, _scope(params, "question.fwd"), masks)
    h_b = run_lstm(bwd_steps, _scope(params, "question.bwd"), masks)
    q = concat([h_f, h_b], axis=-1)
    return reshape(q, q.shape[1:]) if single else q


def summarize_motion(clip_motion, params: Mapping[str, Tensor]) -> Tensor:
    """Final hidden state of the motion LSTM run over clips in order.

    Accepts a list of ``N`` tensors of shape ``(..., d)`` or one tensor of shape
    ``(batch, N, d)``.
    """
    if isinstance(clip_motion, Tensor):
        steps = [getitem(clip_motion, (slice(None), i)) for i in range(clip_motion.shape[1])]
    else:
        steps = list(clip_motion)
    if not steps:
        raise ShapeError("summarize_motion: no clips")
    return run_lstm(steps, _scope(params, "motion_lstm"))

