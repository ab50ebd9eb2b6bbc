"""Threshold detector on the maximum class-path similarity.

The detection statistic for an example is the maximum over classes of its
layer-averaged cosine similarity, computed over a configurable subset of
layers (collapsed layers near the output are typically excluded because
they score everything high). The threshold is calibrated on a mixed pool
of clean and adversarial scores by maximizing the between-class variance
of the score histogram, i.e. Otsu's rule.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from featpath.paths import CentroidBank, FeaturePath, similarity_matrix


class Verdict(enum.Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adversarial"


@dataclass
class DetectorConfig:
    layer_mask: tuple[bool, ...]
    histogram_bins: int = 256
    threshold_override: float | None = None

    def __post_init__(self):
        mask = tuple(bool(m) for m in self.layer_mask)
        if not any(mask):
            raise ValueError("layer_mask must include at least one layer")
        self.layer_mask = mask
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be at least 2")


@dataclass
class DetectionVerdict:
    score: float
    threshold: float
    verdict: Verdict
    top_class: int


def max_similarity(path: FeaturePath, bank: CentroidBank, cfg: DetectorConfig) -> tuple[float, int]:
    """Maximum over classes of the mean per-layer similarity on unmasked layers.

    Equal weights over the included layers, normalized to sum to one, keep
    the statistic on the cosine scale regardless of how many layers the
    mask retains. Ties break toward the smaller class index.
    """
    if len(cfg.layer_mask) != bank.n_layers:
        raise ValueError(f"mask length {len(cfg.layer_mask)} != path length {bank.n_layers}")
    mask = np.asarray(cfg.layer_mask, dtype=bool)
    sims = similarity_matrix(path, bank)
    aggregated = sims[:, mask].mean(axis=1)
    top = int(np.argmax(aggregated))
    return float(aggregated[top]), top


def batch_scores(sims_per_example: np.ndarray, mask: Sequence[bool]) -> np.ndarray:
    """Detection statistic for a stack of (K, L) similarity matrices."""
    mask = np.asarray(mask, dtype=bool)
    return sims_per_example[:, :, mask].mean(axis=2).max(axis=1)


def calibrate_threshold(scores: Sequence[float], bins: int = 256) -> float:
    """Bin-edge threshold maximizing between-class variance of the scores.

    A histogram of `bins` equal-width bins spans [min(scores), max(scores)].
    For each interior bin edge t, scores split into the group below t and
    the group at-or-above t; the edge maximizing
    w_lo * w_hi * (mean_lo - mean_hi)^2 is returned, ties toward smaller t.
    Identical scores are rejected: no threshold separates anything.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ValueError("need at least two scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if bins < 2:
        raise ValueError("bins must be at least 2")
    lo, hi = float(np.min(scores)), float(np.max(scores))
    if lo == hi:
        raise ValueError("all scores are identical; no separation exists")

    edges = np.histogram_bin_edges(scores, bins=bins, range=(lo, hi))
    counts, _ = np.histogram(scores, bins=edges)
    sums, _ = np.histogram(scores, bins=edges, weights=scores)
    n = scores.size
    total = float(np.sum(sums))

    best_var = -1.0
    best_tau = edges[1]
    count_lo = 0
    sum_lo = 0.0
    for k in range(1, bins):
        count_lo += int(counts[k - 1])
        sum_lo += float(sums[k - 1])
        count_hi = n - count_lo
        if count_lo == 0 or count_hi == 0:
            continue
        w_lo = count_lo / n
        w_hi = count_hi / n
        m_lo = sum_lo / count_lo
        m_hi = (total - sum_lo) / count_hi
        var = w_lo * w_hi * (m_lo - m_hi) ** 2
        if var > best_var:
            best_var = var
            best_tau = edges[k]
    return float(best_tau)


def detect(path: FeaturePath, bank: CentroidBank, threshold: float, cfg: DetectorConfig) -> DetectionVerdict:
    """Classify one example as clean or adversarial.

    Strictly below the threshold means adversarial; a score exactly equal
    to the threshold is clean.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    score, top = max_similarity(path, bank, cfg)
    verdict = Verdict.ADVERSARIAL if score < threshold else Verdict.CLEAN
    return DetectionVerdict(score=score, threshold=float(threshold), verdict=verdict, top_class=top)


def auto_layer_mask(variability: Sequence[float], cutoff: float = 0.1) -> tuple[bool, ...]:
    """Exclude collapsed layers (variability ratio below cutoff).

    If every layer falls below the cutoff, the single highest-ratio layer
    is kept so the mask never ends up empty.
    """
    variability = np.asarray(variability, dtype=np.float64)
    mask = variability >= cutoff
    if not np.any(mask):
        mask = np.zeros(variability.size, dtype=bool)
        mask[int(np.argmax(variability))] = True
    return tuple(bool(m) for m in mask)
