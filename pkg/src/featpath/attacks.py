"""Gradient-sign attacks under an L-infinity budget with box constraints.

PGD here is the plain iterated sign-ascent on cross-entropy: step, project
onto the epsilon ball around the original, clip to the input box, and keep
the iterate with the highest loss seen. FGSM is the one-step special case.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from featpath.net import TapNet, loss_and_grad, predict_batch

DEFAULT_BOX = (0.0, 1.0)


@dataclass
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int
    input_box: tuple[float, float] = DEFAULT_BOX
    rng_seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and nonnegative")
        if not np.isfinite(self.step_size):
            raise ValueError("step_size must be finite")
        if self.step_size <= 0 and self.epsilon > 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        lo, hi = self.input_box
        if not lo < hi:
            raise ValueError(f"input_box {self.input_box} is empty")
        if self.step_size > self.epsilon > 0:
            warnings.warn(
                f"step_size {self.step_size} exceeds epsilon {self.epsilon}; "
                "every step will be clipped to the ball boundary",
                stacklevel=2,
            )


@dataclass
class AdversarialBatch:
    """Original/perturbed inputs with labels and per-example success flags.

    A flag is True when the model's prediction on the perturbed input
    differs from the true label.
    """

    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    success_flags: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success_flags))


def _check_box(x: np.ndarray, box: tuple[float, float]):
    lo, hi = box
    if np.min(x) < lo or np.max(x) > hi:
        raise ValueError(f"input leaves the box [{lo}, {hi}]")


def pgd_attack(net: TapNet, x: np.ndarray, label: int, cfg: AttackConfig) -> np.ndarray:
    """Projected gradient descent on one example; returns the best-loss iterate.

    The returned point satisfies ||x_adv - x||_inf <= epsilon and lies in
    the input box exactly. epsilon = 0 returns the input unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_box(x, cfg.input_box)
    lo, hi = cfg.input_box
    ball_lo = np.maximum(x - cfg.epsilon, lo)
    ball_hi = np.minimum(x + cfg.epsilon, hi)

    cur = x
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.rng_seed)
        cur = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), ball_lo, ball_hi)

    best_loss, grads = loss_and_grad(net, cur, label)
    best = cur
    for it in range(cfg.iterations):
        g = grads.input
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite input gradient at iteration {it}")
        cur = np.clip(cur + cfg.step_size * np.sign(g), ball_lo, ball_hi)
        loss, grads = loss_and_grad(net, cur, label)
        if loss > best_loss:
            best_loss, best = loss, cur
    return best.copy()


def fgsm_attack(net: TapNet, x: np.ndarray, label: int, epsilon: float, input_box=DEFAULT_BOX) -> np.ndarray:
    """One-step sign attack; identical to pgd_attack with a single full step."""
    step = epsilon if epsilon > 0 else 1.0  # step is moot when the ball is a point
    cfg = AttackConfig(epsilon=epsilon, step_size=step, iterations=1, input_box=input_box)
    return pgd_attack(net, x, label, cfg)


def attack_dataset(net: TapNet, X: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> AdversarialBatch:
    """Attack every example with pgd_attack; results keep the input order."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, input_dim) array")
    perturbed = np.empty_like(X)
    for i in range(X.shape[0]):
        example_cfg = cfg
        if cfg.random_start:
            # one independent stream per example so order never matters
            example_cfg = AttackConfig(
                epsilon=cfg.epsilon,
                step_size=cfg.step_size,
                iterations=cfg.iterations,
                input_box=cfg.input_box,
                rng_seed=cfg.rng_seed + i,
                random_start=True,
            )
        try:
            perturbed[i] = pgd_attack(net, X[i], int(y[i]), example_cfg)
        except Exception as exc:
            raise RuntimeError(f"attack failed on example {i}: {exc}") from exc
    flags = predict_batch(net, perturbed) != y
    return AdversarialBatch(originals=X.copy(), perturbed=perturbed, labels=y.copy(), success_flags=flags)
