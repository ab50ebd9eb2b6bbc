"""Image pools: CIFAR-10 when available, synthetic class-patterned images
for offline smoke runs."""

from __future__ import annotations

import torch


def synthetic_pools(
    n_train_per_class: int,
    n_test_per_class: int,
    n_classes: int = 10,
    image_size: int = 32,
    noise: float = 0.1,
    seed: int = 0,
):
    """Train/test pools sharing one smooth color pattern per class.

    Returns (train_images, train_labels, test_images, test_labels), shaped
    like CIFAR-10 batches (n, 3, size, size) in [0, 1]. Separable enough
    that a few epochs of training reach high accuracy, which is all the
    smoke path needs.
    """
    gen = torch.Generator().manual_seed(seed)
    base = torch.rand((n_classes, 3, image_size, image_size), generator=gen)
    # smooth the patterns so classes differ in broad structure, not pixels,
    # then stretch the contrast so the structure dominates the sample noise
    base = torch.nn.functional.avg_pool2d(base, 5, stride=1, padding=2)
    base = (0.5 + 4.0 * (base - base.mean(dim=(1, 2, 3), keepdim=True))).clamp(0.0, 1.0)

    def sample(per_class):
        images, labels = [], []
        for c in range(n_classes):
            batch = base[c].unsqueeze(0) + noise * torch.randn(
                (per_class, 3, image_size, image_size), generator=gen
            )
            images.append(batch.clamp(0.0, 1.0))
            labels.append(torch.full((per_class,), c, dtype=torch.long))
        return torch.cat(images, dim=0), torch.cat(labels, dim=0)

    train_images, train_labels = sample(n_train_per_class)
    test_images, test_labels = sample(n_test_per_class)
    return train_images, train_labels, test_images, test_labels


def cifar10_pools(root: str, n_train: int | None = None, n_test: int | None = None):
    """CIFAR-10 train/test as float tensors in [0, 1]; requires the dataset
    on disk or network access to fetch it."""
    import torchvision
    import torchvision.transforms as transforms

    def load(train, limit):
        ds = torchvision.datasets.CIFAR10(
            root=root, train=train, download=True, transform=transforms.ToTensor()
        )
        n = len(ds) if limit is None else min(limit, len(ds))
        images = torch.stack([ds[i][0] for i in range(n)])
        labels = torch.tensor([ds[i][1] for i in range(n)], dtype=torch.long)
        return images, labels

    train_images, train_labels = load(True, n_train)
    test_images, test_labels = load(False, n_test)
    return train_images, train_labels, test_images, test_labels
