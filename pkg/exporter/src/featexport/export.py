"""Hook-based feature extraction into dump files."""

from __future__ import annotations

import numpy as np
import torch

from featexport.attack import pgd_attack
from featexport.dumpio import write_feature_dump
from featexport.tapspec import TapSpec, resolve_taps, vectorize_activation


class _TapRecorder:
    """Forward hooks on the tap modules, collected in tap order per batch."""

    def __init__(self, model: torch.nn.Module, spec: TapSpec):
        self.spec = spec
        self.taps = resolve_taps(model, spec)
        self.current: dict[str, torch.Tensor] = {}
        self.handles = [
            module.register_forward_hook(self._hook(name))
            for name, module in self.taps.items()
        ]

    def _hook(self, name):
        def record(module, inputs, output):
            self.current[name] = vectorize_activation(output, self.spec.vectorize)

        return record

    def take(self) -> list[torch.Tensor]:
        out = [self.current[name] for name in self.spec.tap_locations]
        self.current = {}
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _run_batches(model, images, spec, batch_size):
    recorder = _TapRecorder(model, spec)
    collected: list[list[np.ndarray]] = [[] for _ in spec.tap_locations]
    dims: list[int] | None = None
    try:
        model.eval()
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                model(images[start : start + batch_size])
                for l, block in enumerate(recorder.take()):
                    if dims is not None and block.shape[1] != dims[l]:
                        raise RuntimeError(
                            f"tap {spec.tap_locations[l]!r} changed width between "
                            f"batches: {dims[l]} -> {block.shape[1]}"
                        )
                    collected[l].append(block.cpu().numpy())
                if dims is None:
                    dims = [blocks[-1].shape[1] for blocks in collected]
    finally:
        recorder.close()
    return [np.concatenate(blocks, axis=0) for blocks in collected]


def export_features(
    model: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    spec: TapSpec,
    destination,
    n_classes: int,
    adversarial: bool = False,
    batch_size: int = 64,
):
    """Extract tapped features for one pool and write the dump.

    Iteration order is the pool order, deterministically. Returns the
    per-layer widths for logging.
    """
    features = _run_batches(model, images, spec, batch_size)
    flags = np.full(labels.shape[0], 1 if adversarial else 0, dtype=np.uint8)
    write_feature_dump(destination, features, labels.cpu().numpy(), flags, n_classes)
    return [f.shape[1] for f in features]


def export_adversarial(
    model: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    spec: TapSpec,
    destination,
    n_classes: int,
    epsilon: float = 8 / 255,
    step_size: float = 2 / 255,
    iterations: int = 20,
    batch_size: int = 64,
):
    """PGD-perturb the pool, then export its features with adversarial flags."""
    perturbed = []
    for start in range(0, images.shape[0], batch_size):
        perturbed.append(
            pgd_attack(
                model,
                images[start : start + batch_size],
                labels[start : start + batch_size],
                epsilon=epsilon,
                step_size=step_size,
                iterations=iterations,
            )
        )
    adv = torch.cat(perturbed, dim=0)
    dims = export_features(
        model, adv, labels, spec, destination, n_classes, adversarial=True, batch_size=batch_size
    )
    return adv, dims
