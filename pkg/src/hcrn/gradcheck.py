"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class NondeterminismError(RuntimeError):
    pass


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and reads the current values of ``params``; it is
    re-evaluated with each parameter entry nudged by ``+eps`` and ``-eps``.

    Returns max over checked entries of
    ``|analytic - numeric| / (|analytic| + |numeric| + eps)``.

    ``max_entries`` caps the number of entries checked per parameter (a random
    subset drawn from ``seed``); ``None`` checks every entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    loss = fn()
    again = fn()
    if not np.array_equal(loss.data, again.data):
        raise NondeterminismError("fn returned different values for identical parameters")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
