"""Subset-selection plans for CRN units.

A plan fixes, for every tuple size ``k``, which size-``k`` index subsets of the
``n`` input objects a CRN unit aggregates.  Subsets are drawn uniformly without
replacement; small families are enumerated and shuffled, large ones are
rejection sampled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

ENUMERATE_LIMIT = 1024


def count_subsets(n: int, k: int) -> int:
    if k < 0 or n < 0:
        raise ValueError(f"count_subsets: negative argument (n={n}, k={k})")
    if k > n:
        raise ValueError(f"count_subsets: k={k} exceeds n={n}")
    return comb(n, k)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_subsets(n: int, k: int, t: int, rng_seed) -> list[tuple[int, ...]]:
    """Draw ``min(t, C(n, k))`` distinct sorted ``k``-subsets of ``range(n)``.

    ``rng_seed`` is an int, a ``SeedSequence`` or a ``numpy.random.Generator``
    (which is advanced in place).  ``k == 1`` is accepted for the no-relation
    ablation, where each "subset" is a single object.
    """
    if not 1 <= k <= n:
        raise ValueError(f"sample_subsets: k={k} out of range for n={n}")
    if t < 1:
        raise ValueError(f"sample_subsets: t must be >= 1, got {t}")
    rng = _rng(rng_seed)
    total = comb(n, k)
    want = min(t, total)
    if total <= ENUMERATE_LIMIT:
        family = list(itertools.combinations(range(n), k))
        order = rng.permutation(total)[:want]
        return [family[i] for i in order]
    picked: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    while len(picked) < want:
        subset = tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))
        if subset not in seen:
            seen.add(subset)
            picked.append(subset)
    return picked


@dataclass
class SubsetPlan:
    n: int
    k_max: int
    t: int
    selected: dict[int, list[tuple[int, ...]]] = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return sorted(self.selected)

    def __len__(self) -> int:
        """Number of relation outputs this plan produces."""
        return len(self.selected)

    def averaging_matrix(self, k: int) -> np.ndarray:
        """Row ``i`` averages the members of the ``i``-th selected ``k``-subset."""
        subsets = self.selected[k]
        mat = np.zeros((len(subsets), self.n))
        for row, subset in enumerate(subsets):
            mat[row, list(subset)] = 1.0 / len(subset)
        return mat

    def to_text(self) -> str:
        lines = [f"# n={self.n} k_max={self.k_max} t={self.t}"]
        for k in self.sizes:
            for subset in self.selected[k]:
                lines.append(f"{k}: " + " ".join(str(i) for i in subset))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SubsetPlan":
        header, *rows = [ln for ln in text.splitlines() if ln.strip()]
        meta = dict(tok.split("=") for tok in header.lstrip("# ").split())
        plan = cls(int(meta["n"]), int(meta["k_max"]), int(meta["t"]))
        for row in rows:
            k, members = row.split(":")
            plan.selected.setdefault(int(k), []).append(tuple(int(i) for i in members.split()))
        return plan


def plan_sizes(n: int, k_max: int) -> list[int]:
    """Tuple sizes a plan over ``n`` objects holds; mirrors :func:`build_plan`."""
    if n == 2:
        return [2]
    if k_max == 1:
        return [1]
    return list(range(2, k_max + 1))


def build_plan(n: int, k_max: int, t: int, rng_seed) -> SubsetPlan:
    """Select ``t`` subsets for every tuple size ``k = 2 .. k_max``.

    Corner cases follow the unit's length law ``max(n - 2, 1)``:

    * ``n == 2`` holds the single pair ``{0, 1}`` under ``k = 2``;
    * ``k_max == 1`` with ``n != 2`` is the no-relation ablation and holds
      ``min(t, n)`` singletons under ``k = 1`` (``n == 1`` is allowed here).
    """
    if n < 1:
        raise ValueError(f"build_plan: need at least one object, got n={n}")
    if k_max < 1:
        raise ValueError(f"build_plan: k_max must be >= 1, got {k_max}")
    if k_max >= n and not (n == 1 and k_max == 1):
        raise ValueError(f"build_plan: k_max={k_max} must be below n={n}")
    rng = _rng(rng_seed)
    plan = SubsetPlan(n, k_max, t)
    if n == 2:
        plan.selected[2] = [(0, 1)]
    elif k_max == 1:
        plan.selected[1] = sample_subsets(n, 1, t, rng)
    else:
        for k in range(2, k_max + 1):
            plan.selected[k] = sample_subsets(n, k, t, rng)
    return plan
