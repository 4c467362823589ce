"""Noise-aware expert classifier p(k | x_t, t).

A reduced denoiser backbone (same timestep embedding and blocks) whose token
states are layer-normed, mean-pooled and mapped to K logits.  The head starts
at zero, so an untrained router is uniform.  The router never sees text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from .numeric import tensor as T
from .numeric.rng import RngStream, normal
from .numeric.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class RouterConfig:
    backbone: dn.DenoiserConfig
    n_experts: int

    def __post_init__(self):
        if self.n_experts < 1:
            raise dn.ConfigError(f"router needs at least one expert, got {self.n_experts}")
        if self.backbone.text_dim is not None:
            raise dn.ConfigError("router backbone must not use cross-attention")

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "n_experts": self.n_experts}

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        return cls(dn.DenoiserConfig.from_dict(d["backbone"]), int(d["n_experts"]))


@dataclass
class RouterOutput:
    probabilities: np.ndarray
    logits: np.ndarray
    argmax: int
    entropy: float


def init_router(cfg: RouterConfig, stream: RngStream, zero_init: bool = True) -> dict[str, Tensor]:
    p = dn.init_backbone(cfg.backbone, stream, zero_init)
    d = cfg.backbone.hidden_dim
    w = np.zeros((d, cfg.n_experts)) if zero_init else normal(stream.child("head"), (d, cfg.n_experts)) / np.sqrt(d)
    p["head.w"] = T.parameter(w)
    p["head.b"] = T.parameter(np.zeros(cfg.n_experts))
    return p


def router_parameter_count(cfg: RouterConfig) -> int:
    b = cfg.backbone
    d = b.hidden_dim
    final = d * 2 * d + 2 * d + d * b.patch_dim + b.patch_dim
    return dn.parameter_count(b) - final + d * cfg.n_experts + cfg.n_experts


def router_logits(params, cfg: RouterConfig, xt, t) -> Tensor:
    """(B, K) logits for a batch of noisy latents with per-sample timesteps."""
    h, _ = dn.backbone(params, cfg.backbone, xt, t)
    pooled = T.layer_norm(h).mean(axis=1)
    return T.matmul(pooled, params["head.w"]) + params["head.b"]


def _outputs(logits: np.ndarray) -> list[RouterOutput]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    out = []
    for lg, pr in zip(logits, probs):
        nz = pr[pr > 0]
        out.append(RouterOutput(pr, lg.copy(), int(np.argmax(lg)), float(-np.sum(nz * np.log(nz)))))
    return out


def router_probabilities(params, cfg: RouterConfig, xts, ts) -> np.ndarray:
    logits = router_logits(params, cfg, xts, ts).data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def route(xt, t: float, params, cfg: RouterConfig) -> RouterOutput:
    xt = np.asarray(xt, dtype=np.float64)
    if xt.shape != cfg.backbone.input_shape:
        raise ShapeError(f"route: expected latent of shape {cfg.backbone.input_shape}, got {xt.shape}")
    return _outputs(router_logits(params, cfg, xt[None], np.array([float(t)])).data)[0]


def route_batch(xts, ts, params, cfg: RouterConfig) -> list[RouterOutput]:
    xts = np.asarray(xts, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    if xts.shape[0] != ts.shape[0]:
        raise ShapeError(f"route_batch: {xts.shape[0]} latents but {ts.shape[0]} timesteps")
    return [route(x, t, params, cfg) for x, t in zip(xts, ts)]
