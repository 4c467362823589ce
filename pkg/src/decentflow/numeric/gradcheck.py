"""Central finite-difference checks for :mod:`decentflow.numeric.tensor` graphs."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .rng import RngStream, normal
from .tensor import Tensor


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def elementwise_check(
    loss_fn: Callable[[], Tensor], tensors: list[Tensor], step: float = 1e-5
) -> list[float]:
    """Perturb every entry of every tensor; returns one relative error per tensor."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    errors = []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        errors.append(relative_error(analytic, numeric))
    return errors


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    stream: RngStream,
    step: float = 1e-5,
) -> dict[str, float]:
    """Compare <grad, v> with the central difference along a random direction v, per group."""
    for t in params.values():
        t.grad = None
    loss_fn().backward()
    errors = {}
    for name, t in params.items():
        v = normal(stream, t.shape)
        analytic = 0.0 if t.grad is None else float(np.sum(t.grad * v))
        base = t.data.copy()
        t.data = base + step * v
        up = loss_fn().item()
        t.data = base - step * v
        down = loss_fn().item()
        t.data = base
        numeric = (up - down) / (2.0 * step)
        errors[name] = relative_error(analytic, numeric)
    return errors
