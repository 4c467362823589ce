"""Exact marginal flow of a finite weighted dataset and its per-cluster decomposition.

Under p_t(x_t | x0) = N((1 - t) x0, t^2 I) the posterior over training points is
a softmax of ``log q_i - |x_t - (1 - t) x0_i|^2 / (2 t^2)``.  Everything here is
computed in log space so that tiny ``t`` and far-away queries stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _kernels


class OracleError(ValueError):
    """Invalid dataset or query for the exact oracle."""


@dataclass
class DiscreteDataset:
    """Points ``(N, *sample_shape)`` with weights q summing to 1 and optional 0-based cluster labels."""

    points: np.ndarray
    weights: np.ndarray | None = None
    labels: np.ndarray | None = None
    n_clusters: int | None = None
    sample_shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim < 2 or pts.shape[0] == 0:
            raise OracleError(f"points must be (N, ...) with N >= 1, got shape {pts.shape}")
        self.sample_shape = tuple(pts.shape[1:])
        self.points = np.ascontiguousarray(pts.reshape(pts.shape[0], -1))
        n = self.points.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (n,) or np.any(self.weights < 0):
            raise OracleError("weights must be N nonnegative values")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise OracleError(f"weights sum to {self.weights.sum()!r}, expected 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise OracleError("labels must have one entry per point")
            if self.n_clusters is None:
                self.n_clusters = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.n_clusters:
                raise OracleError(f"labels must lie in 0..{self.n_clusters - 1}")
            counts = np.bincount(self.labels, minlength=self.n_clusters)
            if np.any(counts == 0):
                raise OracleError(f"empty clusters: {np.flatnonzero(counts == 0).tolist()}")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def log_q(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def restrict(self, k: int) -> "DiscreteDataset":
        """The points of cluster ``k`` with weights renormalized inside the cluster."""
        labels = self._require_labels()
        if not 0 <= k < self.n_clusters:
            raise OracleError(f"cluster {k} outside 0..{self.n_clusters - 1}")
        mask = labels == k
        if not mask.any():
            raise OracleError(f"cluster {k} is empty")
        w = self.weights[mask]
        total = w.sum()
        if total <= 0:
            raise OracleError(f"cluster {k} carries zero weight")
        pts = self.points[mask].reshape((-1,) + self.sample_shape)
        return DiscreteDataset(pts, w / total)

    def _require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise OracleError("dataset has no cluster labels")
        return self.labels


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise OracleError(f"t must lie in (0, 1], got {t}")
    return t


def _flat_query(xt, ds: DiscreteDataset) -> np.ndarray:
    x = np.asarray(xt, dtype=np.float64).reshape(-1)
    if x.size != ds.dim:
        raise OracleError(f"query has {x.size} entries, dataset dimension is {ds.dim}")
    return x


def log_posterior_weights(xt, t: float, ds: DiscreteDataset) -> np.ndarray:
    t = _check_t(t)
    return _kernels.log_weights(_flat_query(xt, ds), ds.points, ds.log_q, 1.0 - t, t)


def marginal_velocity(xt, t: float, ds: DiscreteDataset) -> np.ndarray:
    """E[x0 | x_t] - x_t for one query (``sample_shape``) or a batch (``(B, *sample_shape)``)."""
    t = _check_t(t)
    x = np.asarray(xt, dtype=np.float64)
    single = x.size == ds.dim
    flat = x.reshape(1 if single else -1, ds.dim)
    mean = _kernels.posterior_mean_batch(flat, ds.points, ds.log_q, 1.0 - t, t)
    return (mean - flat).reshape(x.shape)


def cluster_posterior(xt, t: float, ds: DiscreteDataset) -> np.ndarray:
    labels = ds._require_labels()
    logw = log_posterior_weights(xt, t, ds)
    out = np.empty(ds.n_clusters)
    for k in range(ds.n_clusters):
        out[k] = np.exp(logsumexp(logw[labels == k]))
    return out / out.sum()


def cluster_posterior_batch(xs, t: float, ds: DiscreteDataset) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, ds.dim)
    return np.stack([cluster_posterior(x, t, ds) for x in xs])


def per_cluster_velocity(xt, t: float, ds: DiscreteDataset, k: int) -> np.ndarray:
    return marginal_velocity(xt, t, ds.restrict(k))


def decomposition_residual(xt, t: float, ds: DiscreteDataset) -> float:
    """|sum_k p(k|x_t) u_k - u| / (1 + |u|); zero up to rounding for any labelled dataset."""
    ds._require_labels()
    u = marginal_velocity(xt, t, ds).reshape(-1)
    post = cluster_posterior(xt, t, ds)
    fused = np.zeros_like(u)
    for k in range(ds.n_clusters):
        if post[k] > 0.0:
            fused += post[k] * per_cluster_velocity(xt, t, ds, k).reshape(-1)
    return float(np.linalg.norm(fused - u) / (1.0 + np.linalg.norm(u)))


def random_instance(stream, max_n: int = 256, max_d: int = 8, max_k: int = 8, t_min: float = 1e-3):
    """A random labelled dataset, query and timestep for property checks."""
    from .numeric.rng import normal, uniform

    u = uniform(stream, 6)
    k = 1 + int(u[0] * max_k)
    n = k + int(u[1] * (max_n - k + 1))
    d = 1 + int(u[2] * max_d)
    t = t_min + (1.0 - t_min) * float(u[3])
    spread = 10.0 ** (2.0 * float(u[4]) - 1.0)
    points = spread * normal(stream, (n, d))
    raw = uniform(stream, n) + 1e-3
    weights = raw / raw.sum()
    labels = np.concatenate([np.arange(k), (uniform(stream, n - k) * k).astype(np.int64)])
    labels = labels[np.argsort(uniform(stream, n), kind="stable")]
    ds = DiscreteDataset(points, weights, labels, k)
    anchor = points[int(u[5] * n)]
    xt = (1.0 - t) * anchor + t * normal(stream, d) * (1.0 + spread * float(uniform(stream, 1)[0]))
    return ds, xt, t
