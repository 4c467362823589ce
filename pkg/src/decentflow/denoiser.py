"""Diffusion-transformer velocity network.

Pipeline: patchify -> linear patch embedding + fixed 2-D sin/cos positions ->
L AdaLN-modulated transformer blocks (self-attention, optional cross-attention,
GELU FFN) -> modulated final norm + linear -> unpatchify.

Each block consumes six modulation vectors (shift/scale/gate for the attention
branch and for the FFN branch).  They come either from a per-block MLP of the
timestep condition, or ("single" mode) from one shared MLP plus a learned
per-block offset table.  Gates and the output projection start at zero, so a
freshly initialised network is the identity on the residual stream and
predicts zero velocity.

Parameters live in an ordered ``dict[str, Tensor]``; all functions here are
pure in the parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .numeric import tensor as T
from .numeric.rng import RngStream, normal
from .numeric.tensor import ShapeError, Tensor

TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


class ConfigError(ValueError):
    """Invalid network configuration."""


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    height: int = 8
    width: int = 8
    patch_size: int = 2
    hidden_dim: int = 64
    depth: int = 4
    heads: int = 4
    ffn_ratio: float = 4.0
    adaln_mode: str = "per-block"
    text_dim: int | None = None
    time_freq_dim: int = 64
    output: str = "velocity"

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"latent {self.height}x{self.width} not divisible by patch size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 for 2-D positional embeddings")
        if self.adaln_mode not in ("per-block", "single"):
            raise ConfigError(f"adaln_mode must be 'per-block' or 'single', got {self.adaln_mode!r}")
        if self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be even")
        if self.depth < 1 or self.ffn_ratio <= 0:
            raise ConfigError("depth must be >= 1 and ffn_ratio > 0")
        if self.output != "velocity":
            raise ConfigError(f"unsupported output mode {self.output!r}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height // self.patch_size, self.width // self.patch_size)

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.hidden_dim * self.ffn_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)

    def with_(self, **kw) -> "DenoiserConfig":
        return replace(self, **kw)


PRESETS: dict[str, DenoiserConfig] = {
    "dit-nano": DenoiserConfig(),
    "router-nano": DenoiserConfig(hidden_dim=32, depth=4, heads=2, time_freq_dim=32),
    "dit-s/2": DenoiserConfig(height=32, width=32, hidden_dim=384, depth=12, heads=6, time_freq_dim=256),
    "dit-b/2": DenoiserConfig(height=32, width=32, hidden_dim=768, depth=12, heads=12, time_freq_dim=256),
    "dit-xl/2": DenoiserConfig(height=32, width=32, hidden_dim=1152, depth=28, heads=16, time_freq_dim=256),
}


def preset(name: str, **overrides) -> DenoiserConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return cfg.with_(**overrides) if overrides else cfg


# -- fixed embeddings -------------------------------------------------------


def sinusoidal_embed(t, dim: int, scale: float = TIME_SCALE) -> np.ndarray:
    """[sin(w_i s t) ..., cos(w_i s t) ...] with geometric frequencies w_i = MAX_PERIOD^(-i/half)."""
    if dim % 2:
        raise ConfigError(f"sinusoidal_embed: dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half) / half)
    args = (scale * t)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / MAX_PERIOD ** (np.arange(dim // 2) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def positional_table(cfg: DenoiserConfig) -> np.ndarray:
    gh, gw = cfg.grid
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    half = cfg.hidden_dim // 2
    return np.concatenate([_sincos_1d(half, rows), _sincos_1d(half, cols)], axis=1)


# -- patches ----------------------------------------------------------------


def patchify(x: np.ndarray, cfg: DenoiserConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, tokens, C * p * p), row-major over the patch grid."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != cfg.input_shape:
        raise ShapeError(f"patchify: expected (B, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}")
    b, c = x.shape[:2]
    p = cfg.patch_size
    gh, gw = cfg.grid
    x = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * p * p)


def unpatchify(tokens, cfg: DenoiserConfig):
    """Inverse of :func:`patchify`; accepts an ndarray or a Tensor."""
    b = tokens.shape[0]
    if tokens.shape[1:] != (cfg.tokens, cfg.patch_dim):
        raise ShapeError(f"unpatchify: expected (B, {cfg.tokens}, {cfg.patch_dim}), got {tokens.shape}")
    p = cfg.patch_size
    gh, gw = cfg.grid
    c = cfg.in_channels
    if isinstance(tokens, Tensor):
        x = tokens.reshape(b, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, cfg.height, cfg.width)
    x = np.asarray(tokens).reshape(b, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, cfg.height, cfg.width)


# -- parameters -------------------------------------------------------------


def _linear(params, name, fan_in, fan_out, stream, std=None, zero=False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        scale = math.sqrt(2.0 / (fan_in + fan_out)) if std is None else std
        w = scale * normal(stream.child(name), (fan_in, fan_out))
    params[f"{name}.w"] = T.parameter(w)
    params[f"{name}.b"] = T.parameter(np.zeros(fan_out))


def init_backbone(cfg: DenoiserConfig, stream: RngStream, zero_init: bool = True) -> dict[str, Tensor]:
    """Patch embedding, timestep MLP, modulation and blocks; no output layer."""
    d = cfg.hidden_dim
    p: dict[str, Tensor] = {}
    _linear(p, "patch", cfg.patch_dim, d, stream)
    _linear(p, "time.fc1", cfg.time_freq_dim, d, stream, std=0.02 if zero_init else None)
    _linear(p, "time.fc2", d, d, stream, std=0.02 if zero_init else None)
    if cfg.text_dim is not None:
        _linear(p, "text", cfg.text_dim, d, stream)
    if cfg.adaln_mode == "single":
        _linear(p, "adaln_single", d, 6 * d, stream)
        table = normal(stream.child("adaln_single.table"), (cfg.depth, 6 * d)) / math.sqrt(d)
        p["adaln_single.table"] = T.parameter(table)
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if cfg.adaln_mode == "per-block":
            _linear(p, f"{pre}.mod", d, 6 * d, stream)
        _linear(p, f"{pre}.attn.qkv", d, 3 * d, stream)
        _linear(p, f"{pre}.attn.out", d, d, stream)
        if cfg.text_dim is not None:
            _linear(p, f"{pre}.cross.q", d, d, stream)
            _linear(p, f"{pre}.cross.kv", d, 2 * d, stream)
            _linear(p, f"{pre}.cross.out", d, d, stream)
        _linear(p, f"{pre}.ffn.fc1", d, cfg.ffn_hidden, stream)
        _linear(p, f"{pre}.ffn.fc2", cfg.ffn_hidden, d, stream)
    if zero_init:
        _zero_gates(p, cfg)
    return p


def _zero_gates(p: dict[str, Tensor], cfg: DenoiserConfig) -> None:
    d = cfg.hidden_dim
    gate_cols = np.r_[2 * d:3 * d, 5 * d:6 * d]
    if cfg.adaln_mode == "single":
        p["adaln_single.w"].data[:, gate_cols] = 0.0
        p["adaln_single.table"].data[:, gate_cols] = 0.0
    else:
        for i in range(cfg.depth):
            p[f"blocks.{i}.mod.w"].data[:, gate_cols] = 0.0


def init_params(cfg: DenoiserConfig, stream: RngStream, zero_init: bool = True) -> dict[str, Tensor]:
    """Fresh expert parameters.  ``zero_init=False`` randomizes gates and output too (for gradient checks)."""
    p = init_backbone(cfg, stream, zero_init)
    d = cfg.hidden_dim
    _linear(p, "final.mod", d, 2 * d, stream)
    _linear(p, "final.out", d, cfg.patch_dim, stream, zero=zero_init)
    if not zero_init:
        p["final.out.b"].data[:] = 0.01 * normal(stream.child("final.out.b"), cfg.patch_dim)
    return p


def parameter_count(cfg: DenoiserConfig) -> int:
    """Closed-form count for :func:`init_params`."""
    d, f, h = cfg.hidden_dim, cfg.time_freq_dim, cfg.ffn_hidden
    n = cfg.patch_dim * d + d
    n += f * d + d + d * d + d
    per_block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    if cfg.text_dim is not None:
        n += cfg.text_dim * d + d
        per_block += (d * d + d) + (d * 2 * d + 2 * d) + (d * d + d)
    if cfg.adaln_mode == "per-block":
        per_block += d * 6 * d + 6 * d
    else:
        n += d * 6 * d + 6 * d + cfg.depth * 6 * d
    n += cfg.depth * per_block
    n += d * 2 * d + 2 * d + d * cfg.patch_dim + cfg.patch_dim
    return n


def count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


# -- layers -----------------------------------------------------------------


def _dense(params, name, x):
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def adaln_modulate(h, gamma, beta) -> Tensor:
    """gamma * LayerNorm(h) + beta, gamma/beta broadcast over every axis but the last."""
    h, gamma, beta = T.as_tensor(h), T.as_tensor(gamma), T.as_tensor(beta)
    d = h.shape[-1]
    for name, v in (("gamma", gamma), ("beta", beta)):
        if v.shape[-1] != d:
            raise ShapeError(f"adaln_modulate: {name} shape {v.shape} does not match feature size {d} of {h.shape}")
    return gamma * T.layer_norm(h) + beta


def timestep_condition(params, cfg: DenoiserConfig, t) -> Tensor:
    """c = MLP(sinusoidal(t)), shape (B, D)."""
    feats = sinusoidal_embed(np.atleast_1d(np.asarray(t, dtype=np.float64)), cfg.time_freq_dim)
    return _dense(params, "time.fc2", T.silu(_dense(params, "time.fc1", Tensor(feats))))


def adaln_single_params(c: Tensor, params, cfg: DenoiserConfig) -> list[Tensor]:
    """Shared MLP(c) plus each block's learned offset row: L tensors of shape (B, 6D)."""
    if cfg.adaln_mode != "single":
        raise ConfigError("adaln_single_params called on a per-block AdaLN configuration")
    shared = _dense(params, "adaln_single", T.silu(c))
    table = params["adaln_single.table"]
    return [shared + table[i] for i in range(cfg.depth)]


def block_modulations(c: Tensor, params, cfg: DenoiserConfig) -> list[Tensor]:
    if cfg.adaln_mode == "single":
        return adaln_single_params(c, params, cfg)
    act = T.silu(c)
    return [_dense(params, f"blocks.{i}.mod", act) for i in range(cfg.depth)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    b, n, d = q.shape
    dh = d // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    out = T.matmul(T.softmax(scores, axis=-1), vh)
    return out.transpose(0, 2, 1, 3).reshape(b, n, d)


def _chunks(mod: Tensor, d: int, n: int) -> list[Tensor]:
    b = mod.shape[0]
    return [mod[:, j * d:(j + 1) * d].reshape(b, 1, d) for j in range(n)]


def block_forward(params, cfg: DenoiserConfig, index: int, h: Tensor, mod: Tensor, text: Tensor | None = None) -> Tensor:
    """One residual block.  ``mod`` is this block's (B, 6D) modulation; ``text`` the projected text tokens."""
    if (text is not None) != (cfg.text_dim is not None):
        raise ConfigError(
            f"block_forward: text tokens {'given' if text is not None else 'missing'} "
            f"but cross-attention is {'on' if cfg.text_dim is not None else 'off'}"
        )
    d = cfg.hidden_dim
    pre = f"blocks.{index}"
    shift1, scale1, gate1, shift2, scale2, gate2 = _chunks(mod, d, 6)
    gamma1 = scale1 + 1.0
    x = adaln_modulate(h, gamma1, shift1)
    qkv = _dense(params, f"{pre}.attn.qkv", x)
    a = attention(qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:], cfg.heads)
    h = h + gate1 * _dense(params, f"{pre}.attn.out", a)
    if text is not None:
        # cross-attention reuses the attention-branch modulation
        x = adaln_modulate(h, gamma1, shift1)
        q = _dense(params, f"{pre}.cross.q", x)
        kv = _dense(params, f"{pre}.cross.kv", text)
        a = attention(q, kv[..., :d], kv[..., d:], cfg.heads)
        h = h + gate1 * _dense(params, f"{pre}.cross.out", a)
    x = adaln_modulate(h, scale2 + 1.0, shift2)
    f = _dense(params, f"{pre}.ffn.fc2", T.gelu(_dense(params, f"{pre}.ffn.fc1", x)))
    return h + gate2 * f


def embed_tokens(params, cfg: DenoiserConfig, xt) -> Tensor:
    tokens = patchify(xt, cfg)
    return _dense(params, "patch", Tensor(tokens)) + Tensor(positional_table(cfg))


def project_text(params, cfg: DenoiserConfig, text_emb) -> Tensor | None:
    if text_emb is None:
        if cfg.text_dim is not None:
            raise ConfigError("text embedding required: cross-attention is configured")
        return None
    if cfg.text_dim is None:
        raise ConfigError("text embedding given but cross-attention is off")
    e = np.asarray(text_emb, dtype=np.float64)
    if e.ndim != 3 or e.shape[1] == 0 or e.shape[-1] != cfg.text_dim:
        raise ShapeError(f"text embedding must be (B, S>=1, {cfg.text_dim}), got {e.shape}")
    return _dense(params, "text", Tensor(e))


def backbone(params, cfg: DenoiserConfig, xt, t, text_emb=None) -> tuple[Tensor, Tensor]:
    """Token states after all blocks, and the timestep condition."""
    xt = np.asarray(xt, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xt.shape[0],))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timesteps must lie in [0, 1], got {t}")
    h = embed_tokens(params, cfg, xt)
    c = timestep_condition(params, cfg, t)
    text = project_text(params, cfg, text_emb)
    for i, mod in enumerate(block_modulations(c, params, cfg)):
        h = block_forward(params, cfg, i, h, mod, text)
    return h, c


def forward(params, cfg: DenoiserConfig, xt, t, text_emb=None) -> Tensor:
    """Velocity prediction with the same (B, C, H, W) shape as ``xt``."""
    h, c = backbone(params, cfg, xt, t, text_emb)
    d = cfg.hidden_dim
    shift, scale = _chunks(_dense(params, "final.mod", T.silu(c)), d, 2)
    out = _dense(params, "final.out", adaln_modulate(h, scale + 1.0, shift))
    return unpatchify(out, cfg)


def synthetic_text_embedding(label: str, length: int, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for an external text encoder: hash(label) -> Gaussian tokens."""
    return normal(RngStream.from_label(seed, f"text/{label}"), (length, dim))
