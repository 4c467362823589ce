"""Synthetic toy datasets with ground-truth component labels.

``gaussian-mixture``: isotropic Gaussian blobs with random means.
``grid-shapes``: latent-shaped tensors, each component a bright square at its
own grid cell and channel pattern, plus amplitude jitter and pixel noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .datafile import SampleSet, round_f32
from .numeric.rng import RngStream, normal, uniform

GENERATORS = ("gaussian-mixture", "grid-shapes")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ToySpec:
    kind: str = "gaussian-mixture"
    components: int = 8
    shape: tuple[int, ...] = (4, 8, 8)
    samples: int = 1024
    seed: int = 0
    mean_scale: float = 1.0
    spread: float = 0.2
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown generator {self.kind!r}; choose from {', '.join(GENERATORS)}")
        if self.components < 1:
            raise ConfigError(f"component count must be >= 1, got {self.components}")
        if self.samples < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.samples}")
        if not self.shape or min(self.shape) < 1:
            raise ConfigError(f"invalid sample shape {self.shape}")
        if self.spread < 0:
            raise ConfigError("spread must be >= 0")
        if self.weights is not None:
            w = np.asarray(self.weights)
            if w.shape != (self.components,) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError("weights must be nonnegative, one per component, with positive sum")
        if self.kind == "grid-shapes" and len(self.shape) != 3:
            raise ConfigError(f"grid-shapes needs a (C, H, W) shape, got {self.shape}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["weights"] = None if self.weights is None else list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def _labels(spec: ToySpec, stream: RngStream, n: int) -> np.ndarray:
    w = np.ones(spec.components) if spec.weights is None else np.asarray(spec.weights, dtype=np.float64)
    cdf = np.cumsum(w / w.sum())
    return np.minimum(np.searchsorted(cdf, uniform(stream, n), side="right"), spec.components - 1)


def component_means(spec: ToySpec) -> np.ndarray:
    root = RngStream.from_label(spec.seed, f"data/{spec.kind}/means")
    if spec.kind == "gaussian-mixture":
        return spec.mean_scale * normal(root, (spec.components,) + spec.shape)
    c, h, w = spec.shape
    cells = int(np.ceil(np.sqrt(spec.components)))
    ch, cw = max(1, h // cells), max(1, w // cells)
    means = np.zeros((spec.components, c, h, w))
    signs = np.where(normal(root, (spec.components, c)) >= 0, 1.0, -1.0)
    for k in range(spec.components):
        r, q = divmod(k, cells)
        r0, q0 = (r * ch) % h, (q * cw) % w
        means[k, :, r0:r0 + ch, q0:q0 + cw] = spec.mean_scale * 2.0 * signs[k][:, None, None]
    return means


def sample(spec: ToySpec, n: int, stream_label: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """``n`` fresh samples and their component labels; ``stream_label`` separates train/held-out draws."""
    root = RngStream.from_label(spec.seed, f"data/{spec.kind}/{stream_label}")
    labels = _labels(spec, root.child("labels"), n)
    means = component_means(spec)
    noise = normal(root.child("noise"), (n,) + spec.shape)
    if spec.kind == "gaussian-mixture":
        x = means[labels] + spec.spread * noise
    else:
        amp = 1.0 + 0.1 * normal(root.child("amplitude"), n)
        x = amp[:, None, None, None] * means[labels] + spec.spread * noise
    return round_f32(x), labels


def make_dataset(spec: ToySpec) -> SampleSet:
    x, labels = sample(spec, spec.samples)
    return SampleSet(x, None, labels, spec.seed, {"spec": spec.to_dict()})
