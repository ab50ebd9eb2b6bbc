"""Class-centroid feature paths and cosine-similarity profiles.

A feature path is the ordered list of an example's tapped layer features.
Per class and per layer, the unit-normalized mean feature over the training
examples is the class centroid; the centroids of one class across layers
form that class's reference path. Cosine similarity between an example's
path and each class path, aggregated with per-layer weights, is the score
everything downstream (detection, voting) is built on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

UNIT_NORM_TOL = 1e-9


@dataclass
class FeaturePath:
    """Per-layer feature vectors of one example, optionally labeled."""

    layers: list[np.ndarray]
    label: int | None = None

    def __post_init__(self):
        self.layers = [np.asarray(v, dtype=np.float64) for v in self.layers]
        for l, v in enumerate(self.layers):
            if v.ndim != 1:
                raise ValueError(f"layer {l}: feature must be a vector, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"layer {l}: non-finite feature values")

    @property
    def length(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(v.shape[0] for v in self.layers)

    @classmethod
    def from_trace(cls, trace, label: int | None = None) -> "FeaturePath":
        return cls(layers=[f.copy() for f in trace.tapped_features], label=label)


@dataclass
class CentroidBank:
    """Unit-norm class centroids per layer: centroids[l] is (K, dim_l)."""

    centroids: list[np.ndarray]
    class_counts: np.ndarray

    def __post_init__(self):
        self.centroids = [np.asarray(c, dtype=np.float64) for c in self.centroids]
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        K = self.n_classes
        for l, c in enumerate(self.centroids):
            if c.ndim != 2 or c.shape[0] != K:
                raise ValueError(f"layer {l}: centroid block shape {c.shape}, expected ({K}, dim)")
            norms = np.linalg.norm(c, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise ValueError(f"layer {l}: centroids are not unit norm (max dev {np.max(np.abs(norms - 1.0)):.3e})")
        if np.any(self.class_counts < 1):
            raise ValueError("every class must have at least one example")

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)

    @property
    def n_layers(self) -> int:
        return len(self.centroids)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.centroids)


@dataclass
class SimilarityProfile:
    """Per-layer similarities (K, L), weighted aggregates (K,), and the weights used."""

    per_layer: np.ndarray
    aggregated: np.ndarray
    weights: np.ndarray


def _check_dims(path: FeaturePath, bank: CentroidBank):
    if path.dims != bank.layer_dims:
        raise ValueError(f"path dims {path.dims} do not match centroid dims {bank.layer_dims}")


def compute_centroids(paths: Iterable[FeaturePath], n_classes: int) -> CentroidBank:
    """Mean feature per class and layer, L2-normalized.

    Every path must be labeled with a class in [0, n_classes) and all paths
    must share layer dimensions. Rejects empty classes and zero-norm means
    (normalization would be undefined).
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    dims = paths[0].dims
    L = len(dims)
    counts = np.zeros(n_classes, dtype=np.int64)
    sums = [np.zeros((n_classes, d)) for d in dims]
    for p in paths:
        if p.label is None:
            raise ValueError("all paths must be labeled")
        if not 0 <= p.label < n_classes:
            raise ValueError(f"label {p.label} outside [0, {n_classes})")
        if p.dims != dims:
            raise ValueError(f"path dims {p.dims} disagree with {dims}")
        counts[p.label] += 1
        for l in range(L):
            sums[l][p.label] += p.layers[l]
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"no examples for class {missing[0]}")
    centroids = []
    for l in range(L):
        means = sums[l] / counts[:, None]
        norms = np.linalg.norm(means, axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if bad.size:
            raise ValueError(f"class {bad[0]} has a zero-norm mean feature at layer {l}")
        centroids.append(means / norms[:, None])
    return CentroidBank(centroids=centroids, class_counts=counts)


def _cosine(h: np.ndarray, mu: np.ndarray) -> float:
    # zero-norm feature has no direction; similarity 0 by convention
    hn = np.linalg.norm(h)
    if hn == 0.0:
        return 0.0
    return float(np.dot(h, mu) / (hn * np.linalg.norm(mu)))


def layer_similarities(path: FeaturePath, bank: CentroidBank, class_idx: int) -> np.ndarray:
    """Per-layer cosine similarity between a path and one class's centroid path."""
    _check_dims(path, bank)
    if not 0 <= class_idx < bank.n_classes:
        raise ValueError(f"class {class_idx} outside [0, {bank.n_classes})")
    return np.array(
        [_cosine(path.layers[l], bank.centroids[l][class_idx]) for l in range(path.length)]
    )


def similarity_matrix(path: FeaturePath, bank: CentroidBank) -> np.ndarray:
    """All per-layer similarities at once: (K, L) matrix."""
    _check_dims(path, bank)
    K, L = bank.n_classes, bank.n_layers
    out = np.empty((K, L))
    for l in range(L):
        h = path.layers[l]
        hn = np.linalg.norm(h)
        if hn == 0.0:
            out[:, l] = 0.0
        else:
            mu = bank.centroids[l]
            out[:, l] = (mu @ h) / (hn * np.linalg.norm(mu, axis=1))
    return out


def similarity_profile(path: FeaturePath, bank: CentroidBank, weights: Sequence[float]) -> SimilarityProfile:
    """Per-layer similarities for all classes plus their weighted aggregation."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (bank.n_layers,):
        raise ValueError(f"need {bank.n_layers} weights, got shape {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(weights > 0):
        raise ValueError("at least one weight must be positive")
    per_layer = similarity_matrix(path, bank)
    return SimilarityProfile(per_layer=per_layer, aggregated=per_layer @ weights, weights=weights)


def variability_ratio(paths: Iterable[FeaturePath], bank: CentroidBank) -> np.ndarray:
    """Within-class scatter over between-class centroid separation, per layer.

    r_l = mean_i ||Norm(h_i^l) - centroid(label_i, l)||^2
          / mean_{c<c'} ||centroid(c, l) - centroid(c', l)||^2

    Small values mean the layer's features have collapsed onto their class
    centroids. Identical centroids make the denominator zero; that layer is
    flagged with inf rather than rejected.
    """
    if bank.n_classes < 2:
        raise ValueError("need at least 2 classes for between-class separation")
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    L = bank.n_layers
    within = np.zeros(L)
    for p in paths:
        _check_dims(p, bank)
        if p.label is None or not 0 <= p.label < bank.n_classes:
            raise ValueError("all paths must carry a valid label")
        for l in range(L):
            h = p.layers[l]
            hn = np.linalg.norm(h)
            unit = h / hn if hn > 0 else np.zeros_like(h)
            within[l] += float(np.sum((unit - bank.centroids[l][p.label]) ** 2))
    within /= len(paths)

    ratios = np.empty(L)
    K = bank.n_classes
    for l in range(L):
        mu = bank.centroids[l]
        total = 0.0
        for c in range(K):
            for c2 in range(c + 1, K):
                total += float(np.sum((mu[c] - mu[c2]) ** 2))
        between = total / (K * (K - 1) / 2)
        ratios[l] = within[l] / between if between > 0 else np.inf
    return ratios
