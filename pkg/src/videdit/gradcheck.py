"""Shared central finite-difference gradient harness.

Checks analytic reverse-mode gradients against (f(x+h) - f(x-h)) / 2h on
a sample of coordinates.  Meaningful only in float64; float32 finite
differences are too noisy for the 1e-4 tolerance used here.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def fd_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor],
             rng: np.random.Generator, h: float = 1e-5,
             max_coords: int = 24) -> float:
    """Return the max relative error between analytic and FD gradients.

    ``fn`` rebuilds a scalar loss from the ``wrt`` tensors on every call.
    At most ``max_coords`` coordinates per tensor are probed (all of them
    when the tensor is small).
    """
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("fd_check requires float64 tensors")
        t.zero_grad()
    T.clear_tape()
    loss = fn()
    T.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    T.clear_tape()

    worst = 0.0
    with T.no_grad():
        for t, an in zip(wrt, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            if n <= max_coords:
                coords = np.arange(n)
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            for c in coords:
                old = flat[c]
                flat[c] = old + h
                f1 = fn().item()
                flat[c] = old - h
                f2 = fn().item()
                flat[c] = old
                fd = (f1 - f2) / (2.0 * h)
                worst = max(worst, rel_err(an.reshape(-1)[c], fd))
    return worst


def weighted_scalar(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Collapse a tensor to a scalar with fixed random weights.

    A plain sum can hide sign errors through cancellation; random
    weights make the probe directionally informative.
    """
    w = T.constant(rng.standard_normal(out.shape).astype(out.data.dtype))
    return T.tsum(T.mul(out, w))
