"""Model construction and a quick training loop for smoke-scale runs."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torchvision.models import resnet18


def build_resnet18(n_classes: int = 10) -> torch.nn.Module:
    model = resnet18(weights=None, num_classes=n_classes)
    model.eval()
    return model


def quick_train(
    model: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> torch.nn.Module:
    """A few epochs of Adam, enough for a separable smoke pool.

    Not the full-scale recipe (see the README for that); this exists so the
    offline smoke path has a model worth attacking."""
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = images.shape[0]
    model.train()
    for _ in range(epochs):
        order = torch.randperm(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def model_accuracy(model: torch.nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 128) -> float:
    model.eval()
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        preds = model(images[start : start + batch_size]).argmax(dim=1)
        correct += (preds == labels[start : start + batch_size]).sum().item()
    return correct / images.shape[0]
