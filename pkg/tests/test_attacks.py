"""Attack constraint, equivalence, and tracking behavior."""

import numpy as np
import pytest

from featpath.attacks import AttackConfig, attack_dataset, fgsm_attack, pgd_attack
from featpath.net import forward, init_net


def example_loss(net, x, y):
    z = forward(net, x).logits
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))) - z[y])


def random_net(rng, input_dim=6, classes=4):
    return init_net((input_dim, 10, 8, classes), seed=int(rng.integers(10_000)))


def test_epsilon_zero_is_identity():
    rng = np.random.default_rng(0)
    net = random_net(rng)
    x = rng.uniform(0, 1, size=6)
    cfg = AttackConfig(epsilon=0.0, step_size=0.0, iterations=5)
    out = pgd_attack(net, x, 2, cfg)
    assert np.array_equal(out, x)
    assert np.array_equal(fgsm_attack(net, x, 2, 0.0), x)


def test_single_step_closed_form():
    # one iteration with step >= epsilon lands on the box-clipped corner of
    # the ball in the direction of the loss gradient's sign; the sign is
    # cross-checked with finite differences
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(5):
        net = random_net(rng)
        x = rng.uniform(0.2, 0.8, size=6)
        y = int(rng.integers(4))
        eps = 0.05
        fd_grad = np.empty(6)
        for i in range(6):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd_grad[i] = (example_loss(net, xp, y) - example_loss(net, xm, y)) / (2 * h)
        expected = np.clip(x + eps * np.sign(fd_grad), 0.0, 1.0)
        got = pgd_attack(net, x, y, AttackConfig(epsilon=eps, step_size=eps, iterations=1))
        assert np.allclose(got, expected, atol=1e-12)


def test_pixel_scale_bound_around_half():
    eps = 8 / 255
    rng = np.random.default_rng(2)
    net = random_net(rng, input_dim=12)
    x = np.full(12, 0.5)
    cfg = AttackConfig(epsilon=eps, step_size=2 / 255, iterations=20)
    out = pgd_attack(net, x, 1, cfg)
    assert np.all(out >= 0.5 - eps - 1e-9)
    assert np.all(out <= 0.5 + eps + 1e-9)


@pytest.mark.filterwarnings("ignore:step_size")
def test_constraints_hold_for_random_configs():
    rng = np.random.default_rng(3)
    for _ in range(100):
        net = random_net(rng)
        x = rng.uniform(0, 1, size=6)
        eps = float(rng.uniform(0, 0.3))
        cfg = AttackConfig(
            epsilon=eps,
            step_size=float(rng.uniform(0.01, 0.5)) if eps > 0 else 0.0,
            iterations=int(rng.integers(1, 6)),
            rng_seed=int(rng.integers(100)),
            random_start=bool(rng.integers(2)),
        )
        with np.errstate(all="ignore"):
            out = pgd_attack(net, x, int(rng.integers(4)), cfg)
        assert np.max(np.abs(out - x)) <= eps + 1e-9
        assert np.min(out) >= 0.0 and np.max(out) <= 1.0


def test_fgsm_equals_one_step_pgd():
    rng = np.random.default_rng(4)
    net = random_net(rng)
    x = rng.uniform(0, 1, size=6)
    eps = 0.07
    a = fgsm_attack(net, x, 0, eps)
    b = pgd_attack(net, x, 0, AttackConfig(epsilon=eps, step_size=eps, iterations=1))
    assert np.array_equal(a, b)


def test_returned_loss_never_below_start():
    rng = np.random.default_rng(5)
    for _ in range(20):
        net = random_net(rng)
        x = rng.uniform(0, 1, size=6)
        y = int(rng.integers(4))
        cfg = AttackConfig(epsilon=0.1, step_size=0.03, iterations=8)
        out = pgd_attack(net, x, y, cfg)
        assert example_loss(net, out, y) >= example_loss(net, x, y)


def test_attack_dataset_shapes_and_determinism():
    rng = np.random.default_rng(6)
    net = random_net(rng)
    X = rng.uniform(0, 1, size=(15, 6))
    y = rng.integers(0, 4, size=15)
    cfg = AttackConfig(epsilon=0.1, step_size=0.03, iterations=3, rng_seed=11, random_start=True)
    a = attack_dataset(net, X, y, cfg)
    b = attack_dataset(net, X, y, cfg)
    assert a.perturbed.shape == X.shape
    assert a.success_flags.shape == (15,)
    assert np.array_equal(a.perturbed, b.perturbed)
    assert np.array_equal(a.success_flags, b.success_flags)


def test_epsilon_zero_success_rate_is_error_rate():
    rng = np.random.default_rng(7)
    net = random_net(rng)
    X = rng.uniform(0, 1, size=(30, 6))
    y = rng.integers(0, 4, size=30)
    batch = attack_dataset(net, X, y, AttackConfig(epsilon=0.0, step_size=0.0, iterations=1))
    assert np.array_equal(batch.perturbed, X)
    from featpath.net import predict_batch

    clean_errors = predict_batch(net, X) != y
    assert np.array_equal(batch.success_flags, clean_errors)


def test_step_size_warning():
    with pytest.warns(UserWarning, match="step_size"):
        AttackConfig(epsilon=0.01, step_size=0.02, iterations=1)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1, step_size=0.1, iterations=1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, step_size=0.0, iterations=1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, step_size=0.1, iterations=0)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=np.inf, step_size=0.1, iterations=1)


def test_input_outside_box_rejected():
    net = random_net(np.random.default_rng(8))
    x = np.full(6, 1.5)
    with pytest.raises(ValueError, match="box"):
        pgd_attack(net, x, 0, AttackConfig(epsilon=0.1, step_size=0.05, iterations=1))
