"""Named parameter storage and initialisers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_default_dtype


class ModelParams(dict):
    """Ordered ``name -> Tensor`` mapping; names are dotted paths."""

    def new(self, name: str, data: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)
        self[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.new(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.new(name, np.zeros(shape))

    def linear(self, prefix: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
        self.glorot(f"{prefix}.w", fan_in, fan_out, rng)
        if bias:
            self.zeros(f"{prefix}.b", fan_out)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Entries under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def shape_map(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self.values())

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None
