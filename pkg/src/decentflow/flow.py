"""Linear noise path x_t = (1 - t) x0 + t eps and its probability-flow Euler sampler.

The regression target is ``x0 - x_t`` (which equals ``t (x0 - eps)``), so the
reverse-time ODE velocity is ``(x0 - x_t) / t`` and an Euler step of size
``dt`` is ``x_t + (dt / t) v``.  With ``dt == t`` the step lands on the
predicted clean sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric.rng import RngStream, uniform

T_MIN = 1e-3


class RangeError(ValueError):
    """A timestep or step size lies outside its valid interval."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"
    t_min: float = T_MIN
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ValueError(f"need 0 < t_min < t_max <= 1, got {self.t_min}, {self.t_max}")

    @staticmethod
    def alpha(t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    @staticmethod
    def sigma(t):
        return np.asarray(t, dtype=np.float64)


def _per_sample(t, like: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def forward_noise(x0, eps, t) -> np.ndarray:
    """(1 - t) x0 + t eps.  ``t`` is a scalar or one value per leading-axis sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise RangeError(f"forward_noise: t must lie in [0, 1], got {t}")
    tb = _per_sample(t_arr, x0)
    return (1.0 - tb) * x0 + tb * eps


def velocity_target(x0, xt) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if x0.shape != xt.shape:
        raise ValueError(f"velocity_target: shapes {x0.shape} and {xt.shape} differ")
    return x0 - xt


def euler_denoise_step(xt, v, t, dt) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    dt_arr = np.asarray(dt, dtype=np.float64)
    if np.any(t_arr <= 0.0):
        raise RangeError(f"euler_denoise_step: t must be positive, got {t}")
    if np.any(dt_arr <= 0.0) or np.any(dt_arr > t_arr) or np.any(t_arr > 1.0):
        raise RangeError(f"euler_denoise_step: need 0 < dt <= t <= 1, got t={t}, dt={dt}")
    xt = np.asarray(xt, dtype=np.float64)
    if dt_arr.ndim == 0 and t_arr.ndim == 0 and float(dt_arr) == float(t_arr):
        # final jump lands exactly on the predicted clean sample
        return xt + np.asarray(v, dtype=np.float64)
    ratio = _per_sample(dt_arr / t_arr, xt)
    return xt + ratio * np.asarray(v, dtype=np.float64)


def sample_timestep(stream: RngStream, t_min: float = T_MIN) -> float:
    return float(sample_timesteps(stream, 1, t_min)[0])


def sample_timesteps(stream: RngStream, n: int, t_min: float = T_MIN) -> np.ndarray:
    """``n`` draws from U[t_min, 1]."""
    return uniform(stream, n, t_min, 1.0)


def time_grid(steps: int, t_min: float = T_MIN) -> np.ndarray:
    """``steps + 1`` times: uniform from 1 down to ``t_min``, then 0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return np.concatenate([np.linspace(1.0, t_min, steps), [0.0]])
