"""The Conditional Relation Network unit.

A CRN maps an array of ``n`` same-shaped objects and a conditioning feature to
an array of relation summaries, one per tuple size ``k`` in its subset plan:

    r_k = mean over selected k-subsets q of  h_k(mean(q), c)

``h_k`` is ``ELU(W1 [x, c] + b1)``, optionally multiplied by the self-gate
``sigmoid(W2 [x, c] + b2)``.  Weights are tied across subsets of one size.

Objects may carry positional extents before the feature extent; the condition
is then repeated at every position before concatenation.

Two entry points share one implementation: :func:`crn_forward` takes and
returns plain lists of tensors, :func:`crn_apply` works on the stacked form
``(*batch, n, *positions, d)`` that the hierarchy uses.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .params import ModelParams
from .sampler import SubsetPlan, plan_sizes
from .tensor import (
    ShapeError,
    Tensor,
    apply_linear,
    broadcast_to,
    concat,
    elu,
    matmul,
    mul,
    reduce_mean,
    reshape,
    sigmoid,
    stack,
    tmean,
    unstack,
)

ObjectArray = list  # list[Tensor], all items sharing one shape


@dataclass
class MacTally:
    """Multiply-accumulates spent inside CRN units.

    ``relation`` counts the subset aggregation feeding each ``h_k`` (one MAC per
    member element); ``linear`` counts the weight products of the ``h_k`` maps.
    """

    relation: int = 0
    linear: int = 0
    subsets: int = 0


_local = threading.local()


@contextmanager
def count_macs():
    tally = MacTally()
    stack_ = getattr(_local, "tallies", None)
    if stack_ is None:
        stack_ = _local.tallies = []
    stack_.append(tally)
    try:
        yield tally
    finally:
        stack_.pop()


def _tally(relation: int, linear: int, subsets: int) -> None:
    for t in getattr(_local, "tallies", ()):
        t.relation += relation
        t.linear += linear
        t.subsets += subsets


def init_crn_params(
    params: ModelParams, prefix: str, n: int, k_max: int, d: int, gated: bool, rng
) -> None:
    for k in plan_sizes(n, k_max):
        params.linear(f"{prefix}.k{k}.h1", 2 * d, d, rng)
        if gated:
            params.linear(f"{prefix}.k{k}.h2", 2 * d, d, rng)


def g_aggregate(subset: Sequence[Tensor]) -> Tensor:
    """Average-pool the members of one subset."""
    if len(subset) == 0:
        raise ShapeError("g_aggregate: empty subset")
    return reduce_mean(subset)


def _expand_condition(c: Tensor, target_shape: tuple[int, ...]) -> Tensor:
    """Repeat ``c`` of shape ``(*batch, d)`` to ``(*batch, *middle, d)``."""
    b = c.ndim - 1
    if target_shape[:b] != c.shape[:b] or target_shape[-1] != c.shape[-1]:
        raise ShapeError(f"condition shape {c.shape} does not fit objects of shape {target_shape}")
    middle = len(target_shape) - c.ndim
    lifted = reshape(c, c.shape[:b] + (1,) * middle + c.shape[-1:])
    return broadcast_to(lifted, target_shape)


def h_condition(
    g_out: Tensor, c: Tensor, weights: Mapping[str, Tensor], gated: bool
) -> Tensor:
    """Condition aggregated objects on ``c``.

    ``weights`` holds ``h1.w``, ``h1.b`` and, when gated, ``h2.w``, ``h2.b``.
    ``g_out`` has shape ``(*batch, ..., d)`` and ``c`` has shape ``(*batch, d)``.
    """
    if g_out.shape[-1] != c.shape[-1]:
        raise ShapeError(
            f"h_condition: object feature extent {g_out.shape[-1]} != condition extent {c.shape[-1]}"
        )
    joint = concat([g_out, _expand_condition(c, g_out.shape)], axis=-1)
    out = elu(apply_linear(joint, weights["h1.w"], weights["h1.b"]))
    if gated:
        out = mul(out, sigmoid(apply_linear(joint, weights["h2.w"], weights["h2.b"])))
    return out


def _weights_for(params: Mapping[str, Tensor], k: int, gated: bool) -> dict[str, Tensor]:
    keys = ["h1.w", "h1.b"] + (["h2.w", "h2.b"] if gated else [])
    try:
        return {key: params[f"k{k}.{key}"] for key in keys}
    except KeyError as exc:
        raise ShapeError(f"CRN parameters missing tuple size {k}: {exc}") from None


def crn_apply(
    X: Tensor, c: Tensor, params: Mapping[str, Tensor], plan: SubsetPlan, gated: bool
) -> Tensor:
    """Stacked CRN: ``X`` is ``(*batch, n, *positions, d)``, ``c`` is ``(*batch, d)``.

    ``params`` maps ``k{k}.h1.w`` etc. to tensors (see :meth:`ModelParams.scope`).
    Returns ``(*batch, len(plan), *positions, d)``.
    """
    b = c.ndim - 1
    n = X.shape[b]
    if plan.n != n:
        raise ShapeError(f"plan built for n={plan.n} but the array has {n} objects")
    lead, rest = X.shape[:b], X.shape[b + 1 :]
    width = int(np.prod(rest))
    flat = reshape(X, lead + (n, width))
    outputs = []
    for k in plan.sizes:
        weights = _weights_for(params, k, gated)
        avg = plan.averaging_matrix(k)
        m = avg.shape[0]
        g = reshape(matmul(Tensor(avg, dtype=X.dtype), flat), lead + (m,) + rest)
        h = h_condition(g, c, weights, gated)
        outputs.append(tmean(h, axis=b))
        rows = int(np.prod(lead)) * m * (width // rest[-1])
        d = rest[-1]
        _tally(
            relation=int(np.prod(lead)) * m * k * width,
            linear=rows * 2 * d * d * (2 if gated else 1),
            subsets=m,
        )
    return stack(outputs, axis=b)


def crn_forward(
    S: Sequence[Tensor], c: Tensor, params: Mapping[str, Tensor], plan: SubsetPlan, gated: bool
) -> ObjectArray:
    """List-in, list-out CRN over objects sharing one shape."""
    if len(S) == 0:
        raise ShapeError("crn_forward: empty object array")
    shape = S[0].shape
    if any(s.shape != shape for s in S):
        raise ShapeError("crn_forward: objects must share one shape")
    b = c.ndim - 1
    return unstack(crn_apply(stack(S, axis=b), c, params, plan, gated), axis=b)
