"""numpy versions of the compiled kernels; same signatures and semantics."""

import numpy as np
from scipy.special import logsumexp

_CHUNK_ELEMS = 1 << 22


def _sq_dists(xs: np.ndarray, refs: np.ndarray) -> np.ndarray:
    # direct differences, not the expanded |x|^2 - 2xy + |y|^2 form: exact ties must stay ties
    diff = xs[:, None, :] - refs[None, :, :]
    return np.einsum("bnd,bnd->bn", diff, diff)


def _rows_per_chunk(n: int, d: int) -> int:
    return max(1, _CHUNK_ELEMS // max(1, n * d))


def log_weights(x, points, log_q, alpha, t):
    diff = x[None, :] - alpha * points
    s = log_q - np.einsum("nd,nd->n", diff, diff) / (2.0 * t * t)
    return s - logsumexp(s)


def posterior_mean_batch(xs, points, log_q, alpha, t):
    out = np.empty_like(xs)
    step = _rows_per_chunk(points.shape[0], points.shape[1])
    scaled = alpha * points
    for lo in range(0, xs.shape[0], step):
        block = xs[lo:lo + step]
        s = log_q[None, :] - _sq_dists(block, scaled) / (2.0 * t * t)
        s -= s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[lo:lo + step] = w @ points
    return out


def nearest_centroid(xs, centroids):
    labels = np.empty(xs.shape[0], dtype=np.int64)
    dist = np.empty(xs.shape[0], dtype=np.float64)
    step = _rows_per_chunk(centroids.shape[0], xs.shape[1])
    for lo in range(0, xs.shape[0], step):
        d2 = _sq_dists(xs[lo:lo + step], centroids)
        idx = np.argmin(d2, axis=1)
        labels[lo:lo + step] = idx
        dist[lo:lo + step] = d2[np.arange(d2.shape[0]), idx]
    return labels, dist
