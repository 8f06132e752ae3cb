"""AdamW with decoupled weight decay, warmup-decay schedule, gradient clipping.

Two learning-rate groups mirror the training recipe: the encoder gets its
own base rate, everything downstream (pair features, segmentation,
classification head) another. Weight decay never touches bias-flagged
parameters. Gradients are clipped by their global L2 norm before stepping.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .params import ParamRegistry


def lr_schedule(step: int, total_steps: int, warmup: float = 0.06) -> float:
    """Linear 0 -> 1 over the warmup fraction of steps, then linear 1 -> 0."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warmup_steps = warmup * total_steps
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return 0.0
    return (total_steps - step) / remaining


def clip_gradients(registry: ParamRegistry, max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the applied scale (1.0 when no clipping happened).
    """
    total = 0.0
    for _, t in registry.items():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for _, t in registry.items():
        if t.grad is not None:
            t.grad = t.grad * scale
    return scale


class AdamW:
    """Decoupled-weight-decay Adam over a parameter registry.

    ``lr_groups`` maps a name prefix to a base learning rate; the longest
    matching prefix wins, and ``default_lr`` covers the rest. The effective
    rate each step is base * schedule multiplier.
    """

    def __init__(self, registry: ParamRegistry, default_lr: float,
                 lr_groups: dict[str, float] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.registry = registry
        self.default_lr = default_lr
        self.lr_groups = dict(lr_groups or {})
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in registry.items()}
        self.v = {name: np.zeros(t.shape) for name, t in registry.items()}

    def base_lr(self, name: str) -> float:
        best, rate = -1, self.default_lr
        for prefix, lr in self.lr_groups.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, rate = len(prefix), lr
        return rate

    def step(self, lr_multiplier: float = 1.0) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for name, param in self.registry.items():
            g = param.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DataError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            lr = self.base_lr(name) * lr_multiplier
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and not self.registry.is_bias(name):
                update = update + self.weight_decay * param.data
            param.data = param.data - lr * update

    # -- checkpoint plumbing -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.registry.names():
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name in self.registry.names():
            self.m[name] = np.array(arrays[f"opt.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"opt.v.{name}"], dtype=np.float64)
        self.step_count = step
