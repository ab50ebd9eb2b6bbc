"""Nearest-centroid layer ranking and intermediate-layer voting.

Deep layers follow the model's (fooled) prediction on attacked inputs, so
recognition of detected-adversarial examples relies on the layers whose
nearest-centroid accuracy survives the attack: rank layers by attacked-pool
accuracy, keep the best few, and let them vote. Detected-clean examples
keep the model's ordinary prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from featpath.detector import DetectorConfig, Verdict, detect
from featpath.net import TapNet, forward
from featpath.paths import CentroidBank, FeaturePath, similarity_matrix


@dataclass
class LayerAccuracyReport:
    """Nearest-centroid accuracy per layer, split by pool."""

    per_layer_clean_acc: np.ndarray
    per_layer_adv_acc: np.ndarray
    n_clean: int
    n_adv: int


@dataclass
class VotingConfig:
    """Which tap layers vote and with what weight (default: equal)."""

    selected_layers: tuple[int, ...]
    weights: np.ndarray | None = None

    def __post_init__(self):
        layers = tuple(int(l) for l in self.selected_layers)
        if not layers:
            raise ValueError("selected_layers must be nonempty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"selected_layers must be strictly increasing, got {layers}")
        self.selected_layers = layers
        if self.weights is None:
            self.weights = np.ones(len(layers))
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(layers),):
                raise ValueError("need one weight per selected layer")
            if np.any(self.weights <= 0):
                raise ValueError("weights must be positive")


def nearest_centroid_predictions(path: FeaturePath, bank: CentroidBank) -> np.ndarray:
    """Per-layer prediction: the class with highest cosine similarity."""
    return np.argmax(similarity_matrix(path, bank), axis=0)


def layer_accuracy(
    clean_paths: Iterable[FeaturePath],
    adv_paths: Iterable[FeaturePath],
    bank: CentroidBank,
) -> LayerAccuracyReport:
    """Nearest-centroid accuracy at every layer, separately per pool."""

    def pool_accuracy(paths):
        paths = list(paths)
        if not paths:
            raise ValueError("empty pool")
        correct = np.zeros(bank.n_layers, dtype=np.int64)
        for p in paths:
            if p.label is None:
                raise ValueError("all paths must be labeled")
            correct += nearest_centroid_predictions(p, bank) == p.label
        return correct / len(paths), len(paths)

    clean_acc, n_clean = pool_accuracy(clean_paths)
    adv_acc, n_adv = pool_accuracy(adv_paths)
    return LayerAccuracyReport(
        per_layer_clean_acc=clean_acc,
        per_layer_adv_acc=adv_acc,
        n_clean=n_clean,
        n_adv=n_adv,
    )


def select_layers(report: LayerAccuracyReport, top_n: int) -> VotingConfig:
    """The top_n layers by attacked-pool accuracy, ties toward deeper layers."""
    L = report.per_layer_adv_acc.size
    if not 1 <= top_n <= L:
        raise ValueError(f"top_n must be in [1, {L}]")
    order = sorted(range(L), key=lambda l: (report.per_layer_adv_acc[l], l), reverse=True)
    chosen = sorted(order[:top_n])
    return VotingConfig(selected_layers=tuple(chosen))


def vote(path: FeaturePath, bank: CentroidBank, cfg: VotingConfig) -> int:
    """Weighted vote over the selected layers' nearest-centroid predictions.

    Ties among top-scoring classes go to the deepest selected layer whose
    prediction is one of the tied classes.
    """
    if max(cfg.selected_layers) >= bank.n_layers:
        raise ValueError("selected layer index outside the bank's layers")
    preds = nearest_centroid_predictions(path, bank)
    scores = np.zeros(bank.n_classes)
    for w, l in zip(cfg.weights, cfg.selected_layers):
        scores[preds[l]] += w
    top = np.max(scores)
    tied = np.nonzero(scores == top)[0]
    if tied.size == 1:
        return int(tied[0])
    tied_set = set(int(k) for k in tied)
    for l in reversed(cfg.selected_layers):
        if int(preds[l]) in tied_set:
            return int(preds[l])
    return int(tied[0])  # unreachable: every tied class got at least one vote


def recognize(
    net: TapNet,
    x: np.ndarray,
    bank: CentroidBank,
    threshold: float,
    det_cfg: DetectorConfig,
    vote_cfg: VotingConfig,
) -> tuple[int, Verdict]:
    """Detect, then route: clean inputs keep the model's prediction,
    adversarial ones are recognized by intermediate-layer voting."""
    trace = forward(net, np.asarray(x, dtype=np.float64))
    path = FeaturePath.from_trace(trace)
    verdict = detect(path, bank, threshold, det_cfg)
    if verdict.verdict is Verdict.CLEAN:
        return int(np.argmax(trace.logits)), Verdict.CLEAN
    return vote(path, bank, vote_cfg), Verdict.ADVERSARIAL
