"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


def default_step(dtype) -> float:
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-2


def default_tolerance(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: Optional[float] = None,
    max_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the scalar graph from ``inputs`` each call. The error per element
    is ``|a - n| / max(1, |a| + |n|)``. ``max_per_input`` samples that many elements
    per input (without replacement) instead of sweeping all of them.
    """
    for t in inputs:
        t.grad = None
    reset_tape()
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            step = h if h is not None else default_step(t.dtype)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_input, replace=False)
            a_flat = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = float(flat[i])
                fp = float(fn().data)
                flat[i] = orig - step
                down = float(flat[i])
                fm = float(fn().data)
                flat[i] = orig
                # divide by the representable step, not the nominal one
                numeric = (fp - fm) / (up - down)
                ai = float(a_flat[i])
                err = abs(ai - numeric) / max(1.0, abs(ai) + abs(numeric))
                worst = max(worst, err)
    return worst
