"""Named parameter registry shared by all model components.

Every learnable tensor is registered under a dotted name together with a
bias flag; the optimizer skips weight decay on bias-flagged entries and the
checkpoint format serializes the registry by sorted name.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class ParamRegistry:
    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def register(self, name: str, tensor: Tensor, bias: bool = False) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"parameter {name!r} registered twice")
        tensor.requires_grad = True
        self._entries[name] = (tensor, bias)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def is_bias(self, name: str) -> bool:
        return self._entries[name][1]

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n][0]) for n in self.names()]

    def zero_grad(self) -> None:
        for _, (t, _) in self._entries.items():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for _, (t, _) in self._entries.items())

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite registered tensors in place from name -> array."""
        missing = set(self._entries) - set(values)
        extra = set(values) - set(self._entries)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, (t, _) in self._entries.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(
                    f"parameter {name!r}: stored shape {arr.shape} != {t.shape}"
                )
            t.data = arr.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
