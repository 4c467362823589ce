"""Sample-quality and model-fidelity metrics for the toy pipeline."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from . import oracle as orc
from .flow import forward_noise
from .numeric.rng import RngStream, normal, uniform


class MetricError(ValueError):
    pass


def w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical measures of any sizes."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("w2_1d: empty sample")
    if a.size == b.size:
        return math.sqrt(float(np.mean((a - b) ** 2)))
    # integrate the squared quantile difference over the merged breakpoints
    cuts = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    cuts[-1] = 1.0
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mids = cuts - widths / 2
    qa = a[np.minimum((mids * a.size).astype(np.int64), a.size - 1)]
    qb = b[np.minimum((mids * b.size).astype(np.int64), b.size - 1)]
    return math.sqrt(float(np.sum(widths * (qa - qb) ** 2)))


def random_directions(stream: RngStream, n: int, dim: int) -> np.ndarray:
    u = normal(stream, (n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def wasserstein2_1d_sliced(a, b, projections: int = 128, stream: RngStream | None = None) -> float:
    """Mean over random unit directions of the exact 1-D W2 between the projected samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("sliced W2: empty sample set")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"sliced W2: dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    if a.shape[1] == 1:
        return w2_1d(a[:, 0], b[:, 0])
    stream = stream if stream is not None else RngStream.from_label(0, "sliced-w2")
    dirs = random_directions(stream, projections, a.shape[1])
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([w2_1d(pa[:, j], pb[:, j]) for j in range(projections)]))


def mean_abs_projection(dim: int) -> float:
    """E|<u, e>| for u uniform on the unit sphere in ``dim`` dimensions."""
    return math.exp(gammaln(dim / 2) - gammaln((dim + 1) / 2)) / math.sqrt(math.pi)


def validation_states(ds: orc.DiscreteDataset, n: int, stream: RngStream, t_min: float = 1e-3):
    """(x_t, t) pairs formed by noising random training points at uniform times."""
    idx = np.minimum((uniform(stream, n) * len(ds.points)).astype(np.int64), len(ds.points) - 1)
    t = uniform(stream, n, t_min, 1.0)
    eps = normal(stream, (n, ds.dim))
    return forward_noise(ds.points[idx], eps, t), t


def oracle_velocities(ds: orc.DiscreteDataset, xt: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.stack([orc.marginal_velocity(x, float(s), ds) for x, s in zip(xt, t)])


def velocity_mse(predict, ds: orc.DiscreteDataset, xt: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    """(model MSE, zero-predictor MSE) against the exact marginal velocity, per-sample squared norms."""
    u = oracle_velocities(ds, xt, t)
    v = np.asarray(predict(xt.reshape((-1,) + ds.sample_shape), t), dtype=np.float64).reshape(u.shape)
    return float(np.mean(np.sum((v - u) ** 2, axis=1))), float(np.mean(np.sum(u**2, axis=1)))


def router_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def mean_kl(p: np.ndarray, q: np.ndarray, floor: float = 1e-300) -> float:
    """Mean over rows of KL(p || q)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, floor)) - np.log(q)), 0.0)
    return float(np.mean(terms.sum(axis=1)))
