"""Synthetic classification data: separated Gaussian blobs in the unit box.

Class means are rejection-sampled inside a fixed 10-sigma cube so that all
pairwise distances meet the requested separation; samples have unit
covariance. A fixed affine map squashes coordinates into [0, 1] (so the
attack box constraint is meaningful), with rare >4-sigma stragglers clipped.
"""

from __future__ import annotations

import numpy as np

MEAN_CUBE = 10.0  # class means live in [0, MEAN_CUBE]^dim, units of sigma
SQUASH_MARGIN = 4.0  # box extended by 4 sigma before the affine squash
_PLACEMENT_TRIES = 2000


def place_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Sample class means in the fixed cube with pairwise distance >= separation."""
    if separation <= 0:
        raise ValueError("separation must be positive")
    means = np.empty((n_classes, dim))
    for c in range(n_classes):
        for _ in range(_PLACEMENT_TRIES):
            candidate = rng.uniform(0.0, MEAN_CUBE, size=dim)
            if c == 0 or np.min(np.linalg.norm(means[:c] - candidate, axis=1)) >= separation:
                means[c] = candidate
                break
        else:
            raise ValueError(
                f"cannot place {n_classes} class means with separation {separation} "
                f"in dimension {dim} (cube side {MEAN_CUBE})"
            )
    return means


def squash(x: np.ndarray) -> np.ndarray:
    """Fixed affine map of the sampling region into [0, 1], clipping stragglers."""
    lo = -SQUASH_MARGIN
    hi = MEAN_CUBE + SQUASH_MARGIN
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def make_blobs(
    n_classes: int,
    dim: int,
    n_train_per_class: int,
    n_test_per_class: int,
    separation: float,
    seed: int,
):
    """Returns (X_train, y_train, X_test, y_test), deterministic per seed."""
    if n_classes < 2 or dim < 1:
        raise ValueError("need at least 2 classes and 1 dimension")
    if n_train_per_class < 1 or n_test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    rng = np.random.default_rng(seed)
    means = place_means(n_classes, dim, separation, rng)

    def sample(per_class):
        X = np.empty((n_classes * per_class, dim))
        y = np.empty(n_classes * per_class, dtype=np.int64)
        for c in range(n_classes):
            block = slice(c * per_class, (c + 1) * per_class)
            X[block] = rng.normal(loc=means[c], scale=1.0, size=(per_class, dim))
            y[block] = c
        return squash(X), y

    X_train, y_train = sample(n_train_per_class)
    X_test, y_test = sample(n_test_per_class)
    return X_train, y_train, X_test, y_test
