"""Tap locations inside a torch model and how their outputs become vectors."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class TapSpec:
    """Where to read features and how to vectorize them.

    tap_locations are dotted module names (for torchvision ResNets the
    residual stages: layer1..layer4). Vectorization is either 'flatten'
    (keeps everything) or 'gap' (global average pool over spatial dims).
    """

    model_id: str
    tap_locations: tuple[str, ...] = ("layer1", "layer2", "layer3", "layer4")
    vectorize: str = "flatten"
    pool_name: str = "test"

    def __post_init__(self):
        if not self.tap_locations:
            raise ValueError("need at least one tap location")
        if self.vectorize not in ("flatten", "gap"):
            raise ValueError(f"vectorize must be 'flatten' or 'gap', got {self.vectorize!r}")


def resolve_taps(model: torch.nn.Module, spec: TapSpec) -> dict[str, torch.nn.Module]:
    """Map tap names to submodules, failing loudly with the available names."""
    modules = dict(model.named_modules())
    taps = {}
    for name in spec.tap_locations:
        if name not in modules:
            top_level = [n for n, _ in model.named_children()]
            raise KeyError(
                f"tap location {name!r} not found in {spec.model_id}; "
                f"top-level modules: {top_level}"
            )
        taps[name] = modules[name]
    return taps


def vectorize_activation(tensor: torch.Tensor, mode: str) -> torch.Tensor:
    """(n, C, H, W) or (n, D) activation to (n, dim) float32."""
    if tensor.ndim == 2:
        out = tensor
    elif tensor.ndim == 4:
        out = tensor.mean(dim=(2, 3)) if mode == "gap" else tensor.flatten(1)
    else:
        raise ValueError(f"unsupported activation shape {tuple(tensor.shape)}")
    return out.detach().to(torch.float32)
