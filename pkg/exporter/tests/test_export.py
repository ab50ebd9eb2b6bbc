"""Exporter correctness: dump byte contract, tap plumbing, and the
full-scale smoke path through the consuming pipeline."""

import os

import numpy as np
import pytest
import torch

from featexport.attack import pgd_attack
from featexport.data import synthetic_pools
from featexport.dumpio import write_feature_dump
from featexport.export import export_adversarial, export_features
from featexport.models import build_resnet18, model_accuracy, quick_train
from featexport.tapspec import TapSpec, resolve_taps, vectorize_activation

# the dump format is the contract with the consuming pipeline; its reader is
# the authoritative validator
from featpath import formats as primary_formats

torch.set_num_threads(4)


class TinyTapNet(torch.nn.Module):
    """Two trivially-taps-able stages for fast unit tests."""

    def __init__(self):
        super().__init__()
        self.stem = torch.nn.Conv2d(3, 4, 3, padding=1)
        self.layer1 = torch.nn.Conv2d(4, 4, 3, padding=1)
        self.layer2 = torch.nn.Conv2d(4, 8, 3, padding=1, stride=2)
        self.head = torch.nn.Linear(8, 5)

    def forward(self, x):
        x = torch.relu(self.stem(x))
        x = torch.relu(self.layer1(x))
        x = torch.relu(self.layer2(x))
        return self.head(x.mean(dim=(2, 3)))


def tiny_spec(**kw):
    defaults = dict(model_id="tiny", tap_locations=("layer1", "layer2"), vectorize="flatten")
    defaults.update(kw)
    return TapSpec(**defaults)


def test_dump_bytes_identical_to_primary_writer(tmp_path):
    rng = np.random.default_rng(0)
    features = [rng.normal(size=(7, 6)).astype(np.float32), rng.normal(size=(7, 3)).astype(np.float32)]
    labels = rng.integers(0, 4, size=7).astype(np.uint32)
    flags = rng.integers(0, 2, size=7).astype(np.uint8)

    ours = tmp_path / "ours.fpth"
    write_feature_dump(ours, features, labels, flags, n_classes=4)
    theirs = tmp_path / "theirs.fpth"
    primary_formats.write_dump(
        primary_formats.FeatureDump(n_classes=4, labels=labels, flags=flags, features=features),
        theirs,
    )
    assert ours.read_bytes() == theirs.read_bytes()

    loaded = primary_formats.read_dump(ours)
    assert np.array_equal(loaded.labels, labels)
    assert np.array_equal(loaded.flags, flags)
    for a, b in zip(loaded.features, features):
        assert np.array_equal(a, b)


def test_dump_writer_validation(tmp_path):
    with pytest.raises(ValueError, match="labels"):
        write_feature_dump(tmp_path / "x.fpth", [np.zeros((2, 3), dtype=np.float32)],
                           np.array([0, 9]), np.zeros(2), n_classes=3)
    with pytest.raises(ValueError, match="flags"):
        write_feature_dump(tmp_path / "x.fpth", [np.zeros((2, 3), dtype=np.float32)],
                           np.array([0, 1]), np.array([0, 2]), n_classes=3)


def test_unresolvable_tap_names_available_locations():
    model = TinyTapNet()
    with pytest.raises(KeyError, match="layer7.*layer1"):
        resolve_taps(model, tiny_spec(tap_locations=("layer7",)))


def test_vectorize_modes_table_arithmetic():
    block = torch.zeros(2, 64, 16, 16)
    assert vectorize_activation(block, "flatten").shape == (2, 16384)
    assert vectorize_activation(block, "gap").shape == (2, 64)
    with pytest.raises(ValueError, match="vectorize"):
        TapSpec(model_id="m", vectorize="mean")


def test_export_writes_valid_dump(tmp_path):
    torch.manual_seed(0)
    model = TinyTapNet().eval()
    images = torch.rand(10, 3, 8, 8)
    labels = torch.randint(0, 5, (10,))
    dest = tmp_path / "pool.fpth"
    dims = export_features(model, images, labels, tiny_spec(), dest, n_classes=5, batch_size=4)
    assert dims == [4 * 8 * 8, 8 * 4 * 4]
    dump = primary_formats.read_dump(dest)
    assert dump.n_examples == 10
    assert dump.layer_dims == (256, 128)
    assert np.all(dump.flags == 0)
    assert np.array_equal(dump.labels, labels.numpy())


def test_exported_features_match_direct_hook_readout(tmp_path):
    # batch composition changes float32 conv results on CPU, so the
    # bit-for-bit comparison runs everything at batch size 1
    torch.manual_seed(1)
    model = TinyTapNet().eval()
    images = torch.rand(3, 3, 8, 8)
    labels = torch.tensor([0, 1, 2])
    dest = tmp_path / "single.fpth"
    export_features(model, images, labels, tiny_spec(), dest, n_classes=3, batch_size=1)
    dump = primary_formats.read_dump(dest)

    grabbed = {}
    handle = model.layer2.register_forward_hook(
        lambda mod, inp, out: grabbed.__setitem__("v", out)
    )
    for i in range(3):
        with torch.no_grad():
            model(images[i : i + 1])
        direct = grabbed["v"].flatten(1).to(torch.float32).numpy()[0]
        assert np.array_equal(dump.features[1][i], direct)
    handle.remove()


def test_adversarial_epsilon_zero_matches_clean_except_flags(tmp_path):
    torch.manual_seed(2)
    model = TinyTapNet().eval()
    images = torch.rand(6, 3, 8, 8)
    labels = torch.randint(0, 5, (6,))
    clean_dest = tmp_path / "clean.fpth"
    adv_dest = tmp_path / "adv.fpth"
    export_features(model, images, labels, tiny_spec(), clean_dest, n_classes=5, batch_size=3)
    export_adversarial(model, images, labels, tiny_spec(), adv_dest, n_classes=5,
                       epsilon=0.0, batch_size=3)
    clean = primary_formats.read_dump(clean_dest)
    adv = primary_formats.read_dump(adv_dest)
    assert np.all(adv.flags == 1) and np.all(clean.flags == 0)
    for a, b in zip(adv.features, clean.features):
        assert np.array_equal(a, b)


def test_attack_respects_bound():
    torch.manual_seed(3)
    model = TinyTapNet().eval()
    images = torch.rand(4, 3, 8, 8)
    labels = torch.randint(0, 5, (4,))
    eps = 8 / 255
    adv = pgd_attack(model, images, labels, epsilon=eps, step_size=2 / 255, iterations=5)
    assert (adv - images).abs().max().item() <= eps + 1e-6
    assert adv.min().item() >= 0.0 and adv.max().item() <= 1.0


def test_shape_drift_between_batches_rejected(tmp_path):
    class DriftingNet(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.layer1 = torch.nn.Identity()
            self.calls = 0

        def forward(self, x):
            self.calls += 1
            width = 4 if self.calls == 1 else 6
            return self.layer1(x.flatten(1)[:, :width])

    model = DriftingNet()
    images = torch.rand(4, 3, 4, 4)
    labels = torch.zeros(4, dtype=torch.long)
    with pytest.raises(RuntimeError, match="changed width"):
        export_features(model, images, labels,
                        tiny_spec(tap_locations=("layer1",)), tmp_path / "d.fpth",
                        n_classes=1, batch_size=2)


def test_full_scale_smoke_through_primary_pipeline(tmp_path):
    """Train a ResNet-18 briefly on synthetic CIFAR-shaped pools, export
    >=100 examples per pool, and push the dumps through the consuming
    pipeline: dumps must validate and the calibrated detector must score
    balanced accuracy strictly above 0.5."""
    from featpath.detector import DetectorConfig, auto_layer_mask, calibrate_threshold, detect
    from featpath.paths import compute_centroids, variability_ratio

    torch.manual_seed(0)
    X_train, y_train, X_test, y_test = synthetic_pools(40, 12, 10, seed=0)
    model = build_resnet18(10)
    quick_train(model, X_train, y_train, epochs=10)
    clean_acc = model_accuracy(model, X_test, y_test)
    assert clean_acc >= 0.8

    spec = TapSpec(model_id="resnet18")
    train_dump_path = tmp_path / "train.fpth"
    clean_dump_path = tmp_path / "clean.fpth"
    adv_dump_path = tmp_path / "adv.fpth"
    export_features(model, X_train, y_train, spec, train_dump_path, 10)
    export_features(model, X_test, y_test, spec, clean_dump_path, 10)
    adv_images, _ = export_adversarial(
        model, X_test, y_test, spec, adv_dump_path, 10, iterations=10
    )
    adv_acc = model_accuracy(model, adv_images, y_test)
    assert adv_acc < 0.20  # the attack must actually break the model

    train_dump = primary_formats.read_dump(train_dump_path)
    clean_dump = primary_formats.read_dump(clean_dump_path)
    adv_dump = primary_formats.read_dump(adv_dump_path)
    assert train_dump.n_examples >= 100
    assert clean_dump.n_examples >= 100 and adv_dump.n_examples >= 100
    assert train_dump.layer_dims == (4096, 2048, 1024, 512)

    train_paths = train_dump.to_paths()
    bank = compute_centroids(train_paths, 10)
    mask = auto_layer_mask(variability_ratio(train_paths, bank), 0.1)
    det_cfg = DetectorConfig(layer_mask=mask)
    clean_scores = [detect(p, bank, 0.0, det_cfg).score for p in clean_dump.to_paths()]
    adv_scores = [detect(p, bank, 0.0, det_cfg).score for p in adv_dump.to_paths()]
    tau = calibrate_threshold(clean_scores + adv_scores, 256)
    tpr = float(np.mean([s < tau for s in adv_scores]))
    tnr = float(np.mean([s >= tau for s in clean_scores]))
    balanced = (tpr + tnr) / 2
    assert balanced > 0.5
    print(f"\nSMOKE full-scale: clean {clean_acc:.3f}, attacked {adv_acc:.3f}, "
          f"mask {mask}, threshold {tau:.4f}, balanced detection {balanced:.3f}")
