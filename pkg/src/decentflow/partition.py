"""Feature embedding and two-stage k-means partitioning into K expert shards."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .numeric.rng import RngStream, choice


class ConfigError(ValueError):
    """Invalid configuration value."""


class DegenerateInputError(ValueError):
    """Input data cannot support the requested operation (e.g. zero variance)."""


class PartitionError(ValueError):
    """Contract violation in clustering or assignment."""


@dataclass
class IdentityEmbedder:
    name: str = "identity"

    def transform(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        return x.reshape(x.shape[0], -1)


@dataclass
class PcaWhitener:
    mean: np.ndarray
    components: np.ndarray
    scale: np.ndarray
    name: str = "pca-whiten"

    @classmethod
    def fit(cls, x: np.ndarray, n_components: int | None = None) -> "PcaWhitener":
        mean = x.mean(axis=0)
        xc = x - mean
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        if s.size == 0 or s[0] <= 1e-12 * max(1.0, float(np.abs(x).max())):
            raise DegenerateInputError("pca-whiten: data has zero variance")
        rank = int(np.sum(s > s[0] * 1e-10))
        if n_components is not None:
            rank = min(rank, n_components)
        return cls(mean, vt[:rank], s[:rank] / np.sqrt(x.shape[0]))

    def transform(self, samples) -> np.ndarray:
        x = IdentityEmbedder().transform(samples)
        return (x - self.mean) @ self.components.T / self.scale


@dataclass
class FeatureMatrix:
    values: np.ndarray
    embedder: IdentityEmbedder | PcaWhitener = field(default_factory=IdentityEmbedder)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise PartitionError(f"features must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise PartitionError("features contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


EMBEDDERS = ("identity", "pca-whiten")


def embed(samples, kind: str = "identity", n_components: int | None = None) -> FeatureMatrix:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise PartitionError("embed: empty sample set")
    flat = x.reshape(x.shape[0], -1)
    if kind == "identity":
        return FeatureMatrix(flat, IdentityEmbedder())
    if kind == "pca-whiten":
        whitener = PcaWhitener.fit(flat, n_components)
        return FeatureMatrix(whitener.transform(flat), whitener)
    raise ConfigError(f"unknown embedder {kind!r}; choose from {', '.join(EMBEDDERS)}")


@dataclass
class Partition:
    n_clusters: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clusters)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def to_tsv(self, path) -> None:
        lines = [f"K={self.n_clusters}"]
        lines += [f"{i}\t{int(c)}" for i, c in enumerate(self.assignments)]
        Path(path).write_text("\n".join(lines) + "\n")

    def save(self, path) -> None:
        """TSV assignment file plus a ``.centroids.npy`` sidecar."""
        self.to_tsv(path)
        np.save(_centroid_path(path), self.centroids)

    @classmethod
    def load(cls, path) -> "Partition":
        k, labels = read_assignments(path)
        cpath = _centroid_path(path)
        centroids = np.load(cpath) if cpath.exists() else np.zeros((k, 0))
        return cls(k, labels, centroids)


def _centroid_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".centroids.npy")


def read_assignments(path) -> tuple[int, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("K="):
        raise PartitionError(f"{path}: missing 'K=<K>' header")
    k = int(lines[0][2:])
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    for row, line in enumerate(lines[1:]):
        idx, cid = line.split("\t")
        if int(idx) != row:
            raise PartitionError(f"{path}: line {row + 2} has index {idx}, expected {row}")
        labels[row] = int(cid)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise PartitionError(f"{path}: cluster ids must lie in 0..{k - 1}")
    return k, labels


def _plusplus_seed(x: np.ndarray, w: np.ndarray, m: int, stream: RngStream) -> np.ndarray:
    n = x.shape[0]
    chosen = [choice(stream, w)]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, m):
        score = w * d2
        if score.sum() <= 0.0:
            # fewer distinct points than centroids: take the next unchosen index
            score = np.ones(n)
            score[chosen] = 0.0
        nxt = choice(stream, score)
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def _weighted_means(x, w, labels, m, old):
    sums = np.zeros((m, x.shape[1]))
    np.add.at(sums, labels, x * w[:, None])
    mass = np.bincount(labels, weights=w, minlength=m)
    out = old.copy()
    nz = mass > 0
    out[nz] = sums[nz] / mass[nz, None]
    return out


def _repair_empty(x, labels, d2, centroids, m) -> bool:
    """Move the farthest member of the largest cluster into each empty cluster."""
    repaired = False
    while True:
        counts = np.bincount(labels, minlength=m)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return repaired
        j = int(empty[0])
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = int(members[np.argmax(d2[members])])
        centroids[j] = x[far]
        labels[far] = j
        d2[far] = 0.0
        repaired = True


def kmeans(
    features: FeatureMatrix,
    n_clusters: int,
    iters: int,
    stream: RngStream,
    weights: np.ndarray | None = None,
) -> Partition:
    """Lloyd's algorithm with k-means++ seeding; ``weights`` make it a weighted k-means."""
    x = features.values
    n = x.shape[0]
    if not 1 <= n_clusters <= n:
        raise PartitionError(f"kmeans: need 1 <= M <= N, got M={n_clusters}, N={n}")
    if iters < 1:
        raise PartitionError(f"kmeans: iters must be >= 1, got {iters}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    centroids = _plusplus_seed(x, w, n_clusters, stream)
    labels, d2 = _kernels.nearest_centroid(x, centroids)
    _repair_empty(x, labels, d2, centroids, n_clusters)
    history = [float(np.dot(w, d2))]
    converged = False
    for _ in range(iters):
        centroids = _weighted_means(x, w, labels, n_clusters, centroids)
        new_labels, d2 = _kernels.nearest_centroid(x, centroids)
        repaired = _repair_empty(x, new_labels, d2, centroids, n_clusters)
        inertia = float(np.dot(w, d2))
        if inertia > history[-1] * (1.0 + 1e-9) + 1e-12:
            raise PartitionError(f"kmeans: inertia increased {history[-1]!r} -> {inertia!r}")
        history.append(inertia)
        same = np.array_equal(new_labels, labels)
        labels = new_labels
        if same and not repaired:
            converged = True
            break
    return Partition(n_clusters, labels, centroids, history, converged)


def hierarchical_partition(
    features: FeatureMatrix, m_fine: int, n_clusters: int, iters: int, stream: RngStream
) -> Partition:
    """Fine k-means to ``m_fine`` centroids, then count-weighted k-means of those to ``n_clusters``."""
    n = len(features)
    if not 1 <= n_clusters <= m_fine <= n:
        raise PartitionError(f"hierarchical_partition: need 1 <= K <= M_fine <= N, got K={n_clusters}, M_fine={m_fine}, N={n}")
    fine = kmeans(features, m_fine, iters, stream)
    if m_fine == n_clusters:
        return fine
    coarse = kmeans(FeatureMatrix(fine.centroids), n_clusters, iters, stream, weights=fine.sizes)
    labels = coarse.assignments[fine.assignments]
    x = features.values
    centroids = _weighted_means(x, np.ones(n), labels, n_clusters, coarse.centroids)
    d2 = np.sum((x - centroids[labels]) ** 2, axis=1)
    history = [float(d2.sum())]
    return Partition(n_clusters, labels, centroids, history, fine.converged and coarse.converged)


def assign(features: FeatureMatrix | np.ndarray, partition: Partition) -> np.ndarray:
    """Nearest coarse centroid, lowest cluster id on ties."""
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != partition.centroids.shape[1]:
        raise PartitionError(f"assign: feature dimension {x.shape[1]} != centroid dimension {partition.centroids.shape[1]}")
    return _kernels.nearest_centroid(x, partition.centroids)[0]
