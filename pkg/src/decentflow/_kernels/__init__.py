"""Hot loops: compiled extension when built, numpy otherwise.

Set ``DECENTFLOW_PURE_PYTHON=1`` to force the numpy path.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DECENTFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        pass


def _c(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def log_weights(x, points, log_q, alpha: float, t: float) -> np.ndarray:
    """Normalized log posterior weights of every point given one noisy query."""
    return _impl.log_weights(_c(x), _c(points), _c(log_q), float(alpha), float(t))


def posterior_mean_batch(xs, points, log_q, alpha: float, t: float) -> np.ndarray:
    """E[x0 | x_t] for each row of ``xs``."""
    return _impl.posterior_mean_batch(_c(xs), _c(points), _c(log_q), float(alpha), float(t))


def nearest_centroid(xs, centroids) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid index (lowest id on ties) and squared distance per row."""
    return _impl.nearest_centroid(_c(xs), _c(centroids))


def implementations() -> dict:
    """Both backends, for benchmarking and cross-checks."""
    impls = {"python": _pykernels}
    try:
        from . import _ckernels

        impls["compiled"] = _ckernels
    except ImportError:
        pass
    return impls
