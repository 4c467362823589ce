"""Reverse-time generation with router-weighted expert fusion.

Strategies: ``top1``, ``top<k>``, ``full`` (all experts, raw router weights),
``oracle`` (exact marginal velocity of the training set) and ``monolithic``
(one model with probability 1).  ``oracle`` and ``monolithic`` run through the
same fusion path as a one-expert ensemble whose router always answers 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import denoiser as dn
from . import oracle as orc
from . import router as rt
from .checkpoint import CheckpointError, load_checkpoint
from .flow import T_MIN, euler_denoise_step, time_grid
from .numeric.rng import RngStream, normal
from .numeric.tensor import parameter


class ConfigError(ValueError):
    pass


class MissingExpertError(CheckpointError):
    pass


class VelocityModel(Protocol):
    def __call__(self, xt: np.ndarray, t: np.ndarray) -> np.ndarray: ...


class RouterModel(Protocol):
    def __call__(self, xt: np.ndarray, t: np.ndarray) -> np.ndarray: ...


# -- velocity models --------------------------------------------------------


class NetworkExpert:
    """A trained denoiser; ``forwards`` counts per-sample evaluations."""

    def __init__(self, params: dict[str, np.ndarray], cfg: dn.DenoiserConfig):
        self.params = {k: parameter(v) for k, v in params.items()}
        self.cfg = cfg
        self.forwards = 0

    def __call__(self, xt, t):
        self.forwards += len(xt)
        return dn.forward(self.params, self.cfg, xt, t).data


def _oracle_velocity(ds: orc.DiscreteDataset, xt: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.empty_like(xt)
    for s in np.unique(t):
        rows = t == s
        out[rows] = orc.marginal_velocity(xt[rows], float(s), ds)
    return out


class MarginalOracle:
    """Exact marginal velocity of a discrete dataset."""

    def __init__(self, ds: orc.DiscreteDataset):
        self.ds = ds
        self.forwards = 0

    def __call__(self, xt, t):
        self.forwards += len(xt)
        return _oracle_velocity(self.ds, np.asarray(xt, dtype=np.float64), np.asarray(t, dtype=np.float64))


class ClusterOracle(MarginalOracle):
    """Exact per-cluster velocity u^(k): a stand-in for a perfectly trained expert."""

    def __init__(self, ds: orc.DiscreteDataset, k: int):
        super().__init__(ds.restrict(k))
        self.k = k


class NetworkRouter:
    def __init__(self, params: dict[str, np.ndarray], cfg: rt.RouterConfig):
        self.params = {k: parameter(v) for k, v in params.items()}
        self.cfg = cfg
        self.calls = 0

    @property
    def n_experts(self) -> int:
        return self.cfg.n_experts

    def __call__(self, xt, t):
        self.calls += len(xt)
        return rt.router_probabilities(self.params, self.cfg, xt, t)


class OracleRouter:
    """Exact cluster posterior p(k | x_t)."""

    def __init__(self, ds: orc.DiscreteDataset):
        self.ds = ds
        self.n_experts = ds.n_clusters

    def __call__(self, xt, t):
        return np.stack([orc.cluster_posterior(x.reshape(-1), float(s), self.ds) for x, s in zip(xt, t)])


class ConstantRouter:
    """Fixed probability vector for every input (e.g. one-hot, or [1.0] for single-model aliases)."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.n_experts = len(self.probs)

    def __call__(self, xt, t):
        return np.broadcast_to(self.probs, (len(xt), self.n_experts)).copy()


# -- strategies -------------------------------------------------------------


@dataclass(frozen=True)
class FusionStrategy:
    kind: str
    k: int | None = None
    per_sample: bool = True

    @classmethod
    def parse(cls, name: str, per_sample: bool = True) -> "FusionStrategy":
        if name in ("full", "oracle", "monolithic"):
            return cls(name, None, per_sample)
        if name == "top1":
            return cls("top1", 1, per_sample)
        m = re.fullmatch(r"top(\d+)", name)
        if m and int(m.group(1)) >= 1:
            return cls("topk", int(m.group(1)), per_sample)
        raise ConfigError(f"unknown strategy {name!r}; use top1, top<k>, full, oracle or monolithic")

    @property
    def name(self) -> str:
        return f"top{self.k}" if self.kind in ("top1", "topk") else self.kind


@dataclass
class Ensemble:
    """Everything a strategy may need; unused members may be ``None``."""

    experts: Sequence[VelocityModel] = ()
    router: RouterModel | None = None
    monolithic: VelocityModel | None = None
    oracle: VelocityModel | None = None

    def resolve(self, strategy: FusionStrategy) -> tuple[Sequence[VelocityModel], RouterModel]:
        if strategy.kind == "monolithic":
            if self.monolithic is None:
                raise MissingExpertError("monolithic strategy needs a monolithic model checkpoint")
            return [self.monolithic], ConstantRouter([1.0])
        if strategy.kind == "oracle":
            if self.oracle is None:
                raise ConfigError("oracle strategy needs the training dataset")
            return [self.oracle], ConstantRouter([1.0])
        if not self.experts or self.router is None:
            raise MissingExpertError("routed strategies need expert checkpoints and a router")
        k = len(self.experts)
        if strategy.kind == "topk" and not 1 <= strategy.k <= k:
            raise ConfigError(f"top{strategy.k} needs 1 <= k <= {k}")
        return self.experts, self.router


@dataclass
class StepRecord:
    t: float
    chosen: list[list[int]]
    probabilities: np.ndarray


def _selection(probs: np.ndarray, strategy: FusionStrategy) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of evaluated experts and fusion weights, both (B, K)."""
    b, k = probs.shape
    if strategy.kind == "top1":
        mask = np.zeros((b, k), dtype=bool)
        mask[np.arange(b), np.argmax(probs, axis=1)] = True
        return mask, mask.astype(np.float64)
    if strategy.kind != "topk" or k == 1:
        return np.ones((b, k), dtype=bool), probs
    order = np.argsort(-probs, axis=1, kind="stable")[:, :strategy.k]
    mask = np.zeros((b, k), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    kept = np.where(mask, probs, 0.0)
    return mask, kept / kept.sum(axis=1, keepdims=True)


def fuse_velocities(xt, t, ensemble: Ensemble, strategy: FusionStrategy) -> tuple[np.ndarray, StepRecord]:
    """Fused velocity for a batch at a shared or per-sample ``t``; also returns the routing record."""
    xt = np.asarray(xt, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xt.shape[0],))
    experts, router = ensemble.resolve(strategy)
    probs = np.asarray(router(xt, t), dtype=np.float64)
    if not strategy.per_sample:
        probs = np.broadcast_to(probs.mean(axis=0), probs.shape).copy()
    mask, weights = _selection(probs, strategy)
    if np.any(weights < 0.0) or not np.allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise FloatingPointError(f"fusion weights must be nonnegative and sum to 1, got {weights.sum(axis=1)}")
    v = np.zeros_like(xt)
    wshape = (-1,) + (1,) * (xt.ndim - 1)
    for j, expert in enumerate(experts):
        rows = np.flatnonzero(mask[:, j])
        if rows.size == 0:
            continue
        vj = expert(xt[rows], t[rows])
        v[rows] += weights[rows, j].reshape(wshape) * vj
    chosen = [np.flatnonzero(m).tolist() for m in mask]
    return v, StepRecord(float(t[0]), chosen, probs)


# -- generation -------------------------------------------------------------


def initial_noise(stream: RngStream, n: int, shape: tuple[int, ...]) -> np.ndarray:
    """x_1 ~ N(0, I); sample i uses its own child stream so it does not depend on ``n``."""
    return np.stack([normal(stream.child(f"sample/{i}"), shape) for i in range(n)])


def generate(ensemble: Ensemble, n: int, steps: int, strategy: FusionStrategy, stream: RngStream,
             shape: tuple[int, ...], t_min: float = T_MIN) -> tuple[np.ndarray, list[StepRecord]]:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    grid = time_grid(steps, t_min)
    x = initial_noise(stream, n, tuple(shape))
    trace = []
    for i in range(steps):
        v, rec = fuse_velocities(x, grid[i], ensemble, strategy)
        x = euler_denoise_step(x, v, grid[i], grid[i] - grid[i + 1])
        trace.append(rec)
    return x, trace


def expert_usage_report(trace: Sequence[StepRecord], n_experts: int | None = None) -> dict:
    """Selection counts per expert, overall and per timestep decile (bucket 9 holds t in [0.9, 1])."""
    if not trace:
        raise ConfigError("expert_usage_report: empty trace")
    k = n_experts or trace[0].probabilities.shape[1]
    overall = np.zeros(k, dtype=np.int64)
    deciles = np.zeros((10, k), dtype=np.int64)
    for rec in trace:
        bucket = min(int(rec.t * 10), 9)
        for chosen in rec.chosen:
            overall[chosen] += 1
            deciles[bucket, chosen] += 1
    return {"overall": overall.tolist(), "deciles": deciles.tolist(), "steps": len(trace),
            "samples": len(trace[0].chosen)}


def write_trace(trace: Sequence[StepRecord], path) -> None:
    with open(path, "w") as fh:
        for i, rec in enumerate(trace):
            fh.write(json.dumps({"step": i, "t": rec.t, "chosen": rec.chosen,
                                 "probabilities": np.round(rec.probabilities, 12).tolist()}) + "\n")


def read_trace(path) -> list[StepRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        out.append(StepRecord(d["t"], d["chosen"], np.asarray(d["probabilities"])))
    return out


# -- checkpoints ------------------------------------------------------------


def _weights(ck, use_ema: bool):
    return ck.ema if use_ema and ck.ema else ck.params


def load_expert(path, cluster: int | str, use_ema: bool = True) -> NetworkExpert:
    path = Path(path)
    if not path.exists():
        raise MissingExpertError(f"missing checkpoint for expert {cluster}: {path}")
    ck = load_checkpoint(path)
    return NetworkExpert(_weights(ck, use_ema), dn.DenoiserConfig.from_dict(ck.config["model"]))


def load_router(path, use_ema: bool = True) -> NetworkRouter:
    path = Path(path)
    if not path.exists():
        raise MissingExpertError(f"missing router checkpoint: {path}")
    ck = load_checkpoint(path)
    return NetworkRouter(_weights(ck, use_ema), rt.RouterConfig.from_dict(ck.config["model"]))


@dataclass
class CheckpointSet:
    experts: list[Path]
    router: Path | None = None
    monolithic: Path | None = None
    extra: dict = field(default_factory=dict)

    def load(self, strategy: FusionStrategy, oracle_ds: orc.DiscreteDataset | None = None,
             use_ema: bool = True) -> Ensemble:
        """Load only what ``strategy`` uses."""
        if strategy.kind == "oracle":
            return Ensemble(oracle=None if oracle_ds is None else MarginalOracle(oracle_ds))
        if strategy.kind == "monolithic":
            if self.monolithic is None:
                raise MissingExpertError("no monolithic checkpoint configured")
            return Ensemble(monolithic=load_expert(self.monolithic, "monolithic", use_ema))
        experts = [load_expert(p, k, use_ema) for k, p in enumerate(self.experts)]
        if self.router is None:
            raise MissingExpertError("no router checkpoint configured")
        return Ensemble(experts, load_router(self.router, use_ema))
