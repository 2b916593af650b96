"""AdamW that only ever allocates state for trainable parameters."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import StateError
from .tensor import Parameter


class AdamW:
    """Decoupled-weight-decay Adam.

    Moment buffers are created for non-frozen parameters only, so the optimizer
    footprint is exactly ``2 * sum(|p|)`` over trainable ``p``.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def state_size(self) -> int:
        """Number of float elements held in moment buffers."""
        return int(sum(m.size for m in self.m.values()) + sum(v.size for v in self.v.values()))

    def state_names(self) -> list[str]:
        return sorted(self.m)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise StateError(f"parameter {p.name!r} has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
