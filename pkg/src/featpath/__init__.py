"""Adversarial example detection and robust recognition via layer-wise feature paths.

A small fully-connected network exposes per-layer "tap" features; class
centroids over those features form reference paths. Cosine similarity
between an example's feature path and the class paths drives both a
threshold detector (is this input adversarial?) and an intermediate-layer
voting classifier (what class was it really?).
"""

from featpath.net import TapNet, ForwardTrace, TrainConfig, forward, loss_and_grad, train
from featpath.attacks import AttackConfig, AdversarialBatch, pgd_attack, fgsm_attack, attack_dataset
from featpath.paths import (
    FeaturePath,
    CentroidBank,
    SimilarityProfile,
    compute_centroids,
    layer_similarities,
    similarity_profile,
    variability_ratio,
)
from featpath.detector import (
    DetectorConfig,
    DetectionVerdict,
    Verdict,
    max_similarity,
    calibrate_threshold,
    detect,
    auto_layer_mask,
)
from featpath.recognizer import (
    LayerAccuracyReport,
    VotingConfig,
    layer_accuracy,
    select_layers,
    vote,
    recognize,
)
from featpath import formats

__all__ = [
    "TapNet",
    "ForwardTrace",
    "TrainConfig",
    "forward",
    "loss_and_grad",
    "train",
    "AttackConfig",
    "AdversarialBatch",
    "pgd_attack",
    "fgsm_attack",
    "attack_dataset",
    "FeaturePath",
    "CentroidBank",
    "SimilarityProfile",
    "compute_centroids",
    "layer_similarities",
    "similarity_profile",
    "variability_ratio",
    "DetectorConfig",
    "DetectionVerdict",
    "Verdict",
    "max_similarity",
    "calibrate_threshold",
    "detect",
    "auto_layer_mask",
    "LayerAccuracyReport",
    "VotingConfig",
    "layer_accuracy",
    "select_layers",
    "vote",
    "recognize",
    "formats",
]

__version__ = "0.1.0"
