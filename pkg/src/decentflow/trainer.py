"""Independent training loops for experts (velocity regression) and the router (cross-entropy).

Every sample's timestep and noise come from its own counter-based stream keyed
by (seed, job label, global sample index) and advanced once per visit, so the
noise a sample receives does not depend on shard order, batch composition or
gradient-accumulation layout.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import denoiser as dn
from . import router as rt
from .checkpoint import Checkpoint
from .datafile import SampleSet, round_f32
from .flow import T_MIN, forward_noise, velocity_target
from .numeric import tensor as T
from .numeric.rng import RngStream, normal, permutation, uniform
from .numeric.tensor import ShapeError, Tensor

LOG_CLAMP = -30.0


class ConfigError(ValueError):
    """Training configuration or input shard is inconsistent."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contains NaN or Inf; carries the parameter name."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    grad_accum: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.99
    seed: int = 0
    t_min: float = T_MIN
    schedule: str = "constant"
    epochs: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("steps", "batch_size", "grad_accum"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not 0.0 < self.t_min < 1.0:
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.epochs is not None and not self.epochs > 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def total_steps(self, n_samples: int) -> int:
        if self.epochs is None:
            return self.steps
        return max(1, math.ceil(self.epochs * n_samples / (self.batch_size * self.grad_accum)))

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 0-based ``step`` of ``total``."""
        if self.schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- optimizer and EMA ------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    count: int = 0


def optimizer_step(params: dict[str, Tensor], grads: dict, state: AdamState, config: TrainConfig,
                   lr: float | None = None) -> dict[str, Tensor]:
    """AdamW: decoupled decay ``p *= 1 - lr*wd`` then the bias-corrected Adam step.

    Missing gradients count as zero.  Raises before touching any parameter if a
    gradient is non-finite.
    """
    lr = config.lr if lr is None else lr
    g = {}
    for name, p in params.items():
        gi = grads.get(name)
        gi = np.zeros_like(p.data) if gi is None else np.asarray(gi, dtype=np.float64)
        if gi.shape != p.data.shape:
            raise ShapeError(f"optimizer_step: gradient for {name} has shape {gi.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(gi)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter group {name!r}")
        g[name] = gi
    state.count += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.count
    c2 = 1.0 - b2**state.count
    decay = 1.0 - lr * config.weight_decay
    for name, p in params.items():
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g[name]
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g[name] ** 2
        state.m[name], state.v[name] = m, v
        p.data = p.data * decay - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float
    count: int = 0

    @classmethod
    def init(cls, params, decay: float) -> "EmaState":
        if not 0.0 <= decay <= 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1], got {decay}")
        return cls({k: np.array(_data(v)) for k, v in params.items()}, decay)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def ema_update(ema: EmaState, params) -> EmaState:
    """shadow <- beta*shadow + (1-beta)*params for every tensor; returns a new state."""
    if set(params) != set(ema.shadow):
        raise ShapeError("ema_update: parameter names differ from the shadow")
    beta = ema.decay
    out = {}
    for name, s in ema.shadow.items():
        p = _data(params[name])
        if p.shape != s.shape:
            raise ShapeError(f"ema_update: {name} has shape {p.shape}, shadow {s.shape}")
        out[name] = beta * s + (1.0 - beta) * p
    return EmaState(out, beta, ema.count + 1)


# -- noise and losses -------------------------------------------------------


def sample_noise(seed: int, label: str, global_ids, visits, shape: tuple[int, ...], t_min: float = T_MIN):
    """Per-sample (t, eps); one draw consumes ``1 + 2*prod(shape)`` words of the sample's stream."""
    dim = int(np.prod(shape))
    ts = np.empty(len(global_ids))
    eps = np.empty((len(global_ids),) + tuple(shape))
    for i, (g, v) in enumerate(zip(global_ids, visits)):
        s = RngStream.from_label(seed, f"{label}/sample/{int(g)}", counter=int(v) * (1 + 2 * dim))
        ts[i] = uniform(s, 1, t_min, 1.0)[0]
        eps[i] = normal(s, shape)
    return ts, eps


Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], object]


def expert_loss(params, cfg: dn.DenoiserConfig, x0, t, eps, predictor: Predictor | None = None,
                text_emb=None) -> Tensor:
    """Mean over the batch of ||v(x_t, t) - (x0 - x_t)||^2.

    ``predictor(xt, t, x0)`` replaces the network when given (test hook).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ConfigError("expert_loss: empty batch")
    xt = forward_noise(x0, eps, t)
    target = velocity_target(x0, xt)
    pred = predictor(xt, t, x0) if predictor is not None else dn.forward(params, cfg, xt, t, text_emb)
    diff = T.as_tensor(pred) - target
    per_elem = T.mean_sq(diff)
    return per_elem * float(diff.data.size // x0.shape[0])


def router_loss(params, cfg: rt.RouterConfig, x0, labels, t, eps,
                logits_fn: Callable[[np.ndarray, np.ndarray], object] | None = None) -> Tensor:
    """Cross-entropy -log p(label | x_t, t), log-probabilities clamped at -30, averaged over the batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = cfg.n_experts
    if x0.shape[0] == 0:
        raise ConfigError("router_loss: empty batch")
    if labels.shape != (x0.shape[0],):
        raise ShapeError(f"router_loss: {labels.shape[0]} labels for {x0.shape[0]} samples")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"router_loss: labels must lie in 0..{k - 1}, got range {labels.min()}..{labels.max()}")
    xt = forward_noise(x0, eps, t)
    logits = logits_fn(xt, t) if logits_fn is not None else rt.router_logits(params, cfg, xt, t)
    logp = T.clamp_min(T.log_softmax(T.as_tensor(logits), axis=-1), LOG_CLAMP)
    onehot = np.zeros((x0.shape[0], k))
    onehot[np.arange(x0.shape[0]), labels] = 1.0
    return T.sum_(logp * onehot) * (-1.0 / x0.shape[0])


# -- loops ------------------------------------------------------------------


class _Batcher:
    """Epoch-wise shuffled positions; each epoch is one visit of every sample."""

    def __init__(self, n: int, seed: int, label: str):
        self.n, self.seed, self.label = n, seed, label
        self.pos = 0
        self._perm: tuple[int, np.ndarray] | None = None

    def _order(self, epoch: int) -> np.ndarray:
        if self._perm is None or self._perm[0] != epoch:
            self._perm = (epoch, permutation(RngStream.from_label(self.seed, f"{self.label}/epoch/{epoch}"), self.n))
        return self._perm[1]

    def take(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.empty(b, dtype=np.int64)
        visits = np.empty(b, dtype=np.int64)
        for j in range(b):
            epoch, r = divmod(self.pos, self.n)
            idx[j] = self._order(epoch)[r]
            visits[j] = epoch
            self.pos += 1
        return idx, visits


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wallclock_ms: list[float] = field(default_factory=list)


StepHook = Callable[[int, float], None]


def _run(params, loss_of, data: SampleSet, config: TrainConfig, label: str,
         log_path=None, history: TrainHistory | None = None, on_step: StepHook | None = None):
    total = config.total_steps(len(data))
    batcher = _Batcher(len(data), config.seed, label)
    state = AdamState()
    ema = EmaState.init(params, config.ema_decay)
    log = open(log_path, "a") if log_path is not None else None
    start = time.perf_counter()
    try:
        for step in range(total):
            step_start = time.perf_counter()
            for p in params.values():
                p.grad = None
            loss_value = 0.0
            for _ in range(config.grad_accum):
                idx, visits = batcher.take(config.batch_size)
                t, eps = sample_noise(config.seed, label, data.global_ids[idx], visits, data.sample_shape, config.t_min)
                loss = loss_of(idx, t, eps) * (1.0 / config.grad_accum)
                loss.backward()
                loss_value += loss.item()
            lr = config.lr_at(step, total)
            optimizer_step(params, {k: p.grad for k, p in params.items()}, state, config, lr)
            ema = ema_update(ema, params)
            elapsed = (time.perf_counter() - start) * 1e3
            if log is not None:
                log.write(f"{step + 1}\t{loss_value:.9g}\t{lr:.9g}\t{elapsed:.3f}\n")
                log.flush()
            if history is not None:
                history.losses.append(loss_value)
                history.lrs.append(lr)
                history.wallclock_ms.append(elapsed)
            if on_step is not None:
                on_step(step + 1, time.perf_counter() - step_start)
    finally:
        if log is not None:
            log.close()
    return total, ema


def _arrays(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _data_digest(data: SampleSet) -> str:
    h = hashlib.sha256(np.ascontiguousarray(data.samples, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(data.global_ids, dtype="<i8").tobytes())
    return h.hexdigest()


def _check_shape(data: SampleSet, cfg: dn.DenoiserConfig, what: str) -> None:
    if len(data) == 0:
        raise ConfigError(f"{what}: no training samples")
    if data.sample_shape != cfg.input_shape:
        raise ConfigError(f"{what}: samples have shape {data.sample_shape}, model expects {cfg.input_shape}")


def train_expert(shard: SampleSet, model: dn.DenoiserConfig, config: TrainConfig, cluster: int,
                 log_path=None, history: TrainHistory | None = None, on_step: StepHook | None = None,
                 init: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Train one expert on its own shard only; deterministic in (shard, model, config)."""
    _check_shape(shard, model, f"expert {cluster}")
    owner = shard.meta.get("cluster")
    if owner is not None and int(owner) != int(cluster):
        raise ConfigError(f"shard belongs to cluster {owner}, not {cluster}")
    if model.text_dim is not None:
        raise ConfigError("text-conditional experts need text embeddings; the toy pipeline is unconditional")
    label = f"expert/{cluster}"
    params = dn.init_params(model, RngStream.from_label(config.seed, f"{label}/init"))
    if init is not None:
        for k, v in init.items():
            params[k].data = np.array(v, dtype=np.float64)
    x = round_f32(shard.samples)

    def loss_of(idx, t, eps):
        return expert_loss(params, model, x[idx], t, eps)

    steps, ema = _run(params, loss_of, shard, config, label, log_path, history, on_step)
    return Checkpoint("expert", int(cluster), {"model": model.to_dict(), "train": config.to_dict()},
                      config.seed, steps, _arrays(params), ema.shadow,
                      {"data_digest": _data_digest(shard), "samples": len(shard)})


def train_router(data: SampleSet, labels, model: rt.RouterConfig, config: TrainConfig,
                 log_path=None, history: TrainHistory | None = None, on_step: StepHook | None = None) -> Checkpoint:
    """Train the router on the full dataset against cluster ids ``labels``."""
    _check_shape(data, model.backbone, "router")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(data),):
        raise ConfigError(f"router: {labels.shape[0]} labels for {len(data)} samples")
    if labels.min() < 0 or labels.max() >= model.n_experts:
        raise ConfigError(f"router: labels must lie in 0..{model.n_experts - 1}")
    params = rt.init_router(model, RngStream.from_label(config.seed, "router/init"))
    x = round_f32(data.samples)

    def loss_of(idx, t, eps):
        return router_loss(params, model, x[idx], labels[idx], t, eps)

    steps, ema = _run(params, loss_of, data, config, "router", log_path, history, on_step)
    return Checkpoint("router", "router", {"model": model.to_dict(), "train": config.to_dict()},
                      config.seed, steps, _arrays(params), ema.shadow,
                      {"data_digest": _data_digest(data), "samples": len(data)})


def read_train_log(path) -> list[tuple[int, float, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        s, loss, lr, ms = line.split("\t")
        rows.append((int(s), float(loss), float(lr), float(ms)))
    return rows
