"""L-infinity PGD for torch models, defaults matching the evaluation protocol
(perturbation 8/255, step 2/255, 20 iterations, inputs clamped to [0, 1])."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def pgd_attack(
    model: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = 8 / 255,
    step_size: float = 2 / 255,
    iterations: int = 20,
) -> torch.Tensor:
    """Batched sign-ascent on cross-entropy inside the epsilon ball."""
    if epsilon == 0.0:
        return images.clone()
    model.eval()
    originals = images.detach()
    adv = originals.clone()
    for _ in range(iterations):
        adv = adv.detach().requires_grad_(True)
        loss = F.cross_entropy(model(adv), labels)
        grad = torch.autograd.grad(loss, adv)[0]
        with torch.no_grad():
            adv = adv + step_size * grad.sign()
            adv = originals + (adv - originals).clamp(-epsilon, epsilon)
            adv = adv.clamp(0.0, 1.0)
    delta = (adv - originals).abs().max().item()
    if delta > epsilon + 1e-6:
        raise RuntimeError(f"perturbation {delta} exceeds bound {epsilon}")
    return adv.detach()
