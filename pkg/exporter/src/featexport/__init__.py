"""Feature exporter: per-layer ResNet activations to featpath dump files."""

from featexport.dumpio import write_feature_dump
from featexport.tapspec import TapSpec, resolve_taps
from featexport.export import export_features, export_adversarial
from featexport.attack import pgd_attack
from featexport.data import synthetic_pools

__all__ = [
    "write_feature_dump",
    "TapSpec",
    "resolve_taps",
    "export_features",
    "export_adversarial",
    "pgd_attack",
    "synthetic_pools",
]
