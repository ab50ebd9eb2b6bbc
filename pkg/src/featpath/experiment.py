"""End-to-end experimental protocol: data, training, attack, calibration, metrics.

The default configuration is a desk-scale experiment tuned so the headline
pattern shows up in minutes of CPU: the standard model is accurate on clean
data and collapses under attack, the path detector separates the two pools,
and intermediate-layer voting recovers a large fraction of the attacked
examples without giving up much clean accuracy.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from featpath import synth
from featpath.attacks import AttackConfig, attack_dataset, pgd_attack
from featpath.detector import (
    DetectorConfig,
    Verdict,
    auto_layer_mask,
    calibrate_threshold,
    detect,
)
from featpath.net import TapNet, TrainConfig, forward, init_net, train
from featpath.paths import CentroidBank, FeaturePath, compute_centroids, variability_ratio
from featpath.recognizer import VotingConfig, layer_accuracy, recognize, select_layers, vote

# a layer earns a vote when its attacked-pool nearest-centroid accuracy on
# the calibration split clears this bar
VOTE_SELECT_MIN_ACC = 0.35


@dataclass
class ExperimentConfig:
    """Every knob of the protocol; the manifest is this, serialized."""

    # data
    n_classes: int = 10
    dim: int = 20
    n_train_per_class: int = 500
    n_test_per_class: int = 100
    separation: float = 10.0
    data_seed: int = 7

    # network
    hidden_dims: tuple[int, ...] = (64, 64, 64, 64)
    tap_points: tuple[int, ...] = (0, 1, 2, 3)
    init_seed: int = 1

    # training
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 40
    lr_drop_epochs: tuple[int, ...] = (25, 35)
    lr_drop_factor: float = 10.0
    train_seed: int = 2

    # attack: epsilon picked by a sweep so the standard model's attacked
    # accuracy lands well under 10% while first-layer geometry survives
    epsilon: float = 0.10
    step_size: float = 0.025
    iterations: int = 20
    attack_seed: int = 3
    random_start: bool = False

    # detector
    histogram_bins: int = 256
    collapse_cutoff: float = 0.1
    layer_mask: tuple[bool, ...] | None = None  # None: auto from variability
    threshold_override: float | None = None
    calibration_fraction: float = 0.25
    calibration_mode: str = "holdout"  # or "testpool"
    split_seed: int = 4

    # voting: top_n = None counts the layers whose calibration attacked-pool
    # accuracy clears VOTE_SELECT_MIN_ACC (at least one layer always votes)
    vote_layers: tuple[int, ...] | None = None
    top_n: int | None = None

    # adversarial-training baseline
    include_adv_train: bool = False
    adv_train_epochs: int = 15
    adv_train_iterations: int = 5

    def __post_init__(self):
        if self.calibration_mode not in ("holdout", "testpool"):
            raise ValueError("calibration_mode must be 'holdout' or 'testpool'")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ValueError("calibration_fraction must be in (0, 1)")
        if any(t < 0 or t >= len(self.hidden_dims) for t in self.tap_points):
            raise ValueError(
                f"tap_points {self.tap_points} must index hidden layers "
                f"0..{len(self.hidden_dims) - 1}"
            )

    def layer_dims(self) -> tuple[int, ...]:
        return (self.dim, *self.hidden_dims, self.n_classes)

    def train_config(self) -> TrainConfig:
        # drops scheduled past the horizon would never fire; drop them so a
        # shortened run stays a valid configuration
        drops = tuple(e for e in self.lr_drop_epochs if e <= self.epochs)
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_drop_epochs=drops,
            lr_drop_factor=self.lr_drop_factor,
            rng_seed=self.train_seed,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            step_size=self.step_size,
            iterations=self.iterations,
            rng_seed=self.attack_seed,
            random_start=self.random_start,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        return cls(**kwargs)


@dataclass
class MetricsReport:
    """Everything the evaluation emits, JSON-serializable."""

    standard_clean_accuracy: float
    standard_adversarial_accuracy: float
    detection_rate_adv: float
    detection_rate_clean: float
    balanced_detection_accuracy: float
    pipeline_clean_accuracy: float
    pipeline_adversarial_accuracy: float
    threshold: float
    layer_mask: list[bool]
    selected_layers: list[int]
    variability: list[float]
    per_layer_clean_accuracy: list[float]
    per_layer_adv_accuracy: list[float]
    histogram_edges: list[float]
    histogram_clean_counts: list[int]
    histogram_adv_counts: list[int]
    attack_success_rate: float
    n_calibration: int
    n_eval_clean: int
    n_eval_adv: int
    adv_trained_clean_accuracy: float | None = None
    adv_trained_adversarial_accuracy: float | None = None
    runtime_seconds: dict = field(default_factory=dict)

    def __post_init__(self):
        rates = [
            self.standard_clean_accuracy,
            self.standard_adversarial_accuracy,
            self.detection_rate_adv,
            self.detection_rate_clean,
            self.balanced_detection_accuracy,
            self.pipeline_clean_accuracy,
            self.pipeline_adversarial_accuracy,
        ]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("all rates must lie in [0, 1]")
        if sum(self.histogram_clean_counts) != self.n_eval_clean:
            raise ValueError("clean histogram counts disagree with pool size")
        if sum(self.histogram_adv_counts) != self.n_eval_adv:
            raise ValueError("adversarial histogram counts disagree with pool size")
        # routing arithmetic lower bound: detected-clean examples keep the
        # model's prediction, so the pipeline can't do worse than TNR times
        # the model's clean accuracy unless routing is broken
        floor = self.detection_rate_clean * self.standard_clean_accuracy
        if self.pipeline_clean_accuracy < floor - 1e-9:
            raise ValueError(
                f"pipeline clean accuracy {self.pipeline_clean_accuracy} below "
                f"routing floor {floor}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


@dataclass
class ExperimentArtifacts:
    """In-memory products of a full run, for callers that keep going."""

    net: TapNet
    bank: CentroidBank
    threshold: float
    det_cfg: DetectorConfig
    vote_cfg: VotingConfig
    eval_clean_X: np.ndarray
    eval_clean_y: np.ndarray
    eval_adv_X: np.ndarray
    eval_adv_y: np.ndarray
    report: MetricsReport


def extract_paths(net: TapNet, X: np.ndarray, y=None) -> list[FeaturePath]:
    """Feature path of every input, labeled when labels are given."""
    labels = [None] * len(X) if y is None else [int(v) for v in y]
    return [FeaturePath.from_trace(forward(net, x), label=lab) for x, lab in zip(X, labels)]


def predict_examples(net: TapNet, X: np.ndarray) -> np.ndarray:
    return np.array([int(np.argmax(forward(net, x).logits)) for x in X])


def adv_train(layer_dims, tap_points, init_seed, X, y, train_cfg: TrainConfig, attack_cfg: AttackConfig) -> TapNet:
    """Train on PGD-perturbed batches (the classic adversarial-training baseline).

    With epsilon = 0 the perturbation is the identity, so the trajectory is
    bit-identical to standard training under the same seed.
    """

    def perturb(net, Xb, yb):
        out = np.empty_like(Xb)
        for i in range(Xb.shape[0]):
            out[i] = pgd_attack(net, Xb[i], int(yb[i]), attack_cfg)
        return out

    net = init_net(layer_dims, tap_points, seed=init_seed)
    return train(net, X, y, train_cfg, batch_transform=perturb)


def split_calibration(n: int, fraction: float, seed: int):
    """Deterministic (cal_idx, eval_idx) permutation split."""
    order = np.random.default_rng(seed).permutation(n)
    n_cal = max(1, int(round(n * fraction)))
    if n_cal >= n:
        raise ValueError("calibration fraction leaves no evaluation examples")
    return order[:n_cal], order[n_cal:]


def run_experiment(cfg: ExperimentConfig) -> ExperimentArtifacts:
    """Execute the whole protocol in memory. Deterministic per config."""
    clock: dict[str, float] = {}

    def timed(name):
        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                clock[name] = round(time.perf_counter() - self.t0, 6)

        return _T()

    with timed("synth"):
        X_train, y_train, X_test, y_test = synth.make_blobs(
            cfg.n_classes,
            cfg.dim,
            cfg.n_train_per_class,
            cfg.n_test_per_class,
            cfg.separation,
            cfg.data_seed,
        )

    with timed("train"):
        net = init_net(cfg.layer_dims(), cfg.tap_points, seed=cfg.init_seed)
        net = train(net, X_train, y_train, cfg.train_config())

    adv_trained = None
    if cfg.include_adv_train:
        with timed("adv_train"):
            at_train_cfg = dataclasses.replace(
                cfg.train_config(), epochs=cfg.adv_train_epochs
            )
            at_attack_cfg = dataclasses.replace(
                cfg.attack_config(), iterations=cfg.adv_train_iterations
            )
            adv_trained = adv_train(
                cfg.layer_dims(), cfg.tap_points, cfg.init_seed,
                X_train, y_train, at_train_cfg, at_attack_cfg,
            )

    with timed("split"):
        cal_idx, eval_idx = split_calibration(len(X_test), cfg.calibration_fraction, cfg.split_seed)
        X_cal, y_cal = X_test[cal_idx], y_test[cal_idx]
        X_eval, y_eval = X_test[eval_idx], y_test[eval_idx]

    attack_cfg = cfg.attack_config()
    with timed("attack"):
        cal_batch = attack_dataset(net, X_cal, y_cal, attack_cfg)
        eval_batch = attack_dataset(net, X_eval, y_eval, attack_cfg)

    with timed("centroids"):
        train_paths = extract_paths(net, X_train, y_train)
        bank = compute_centroids(train_paths, cfg.n_classes)

    with timed("mask"):
        ratios = variability_ratio(train_paths, bank)
        if cfg.layer_mask is not None:
            if len(cfg.layer_mask) != bank.n_layers:
                raise ValueError(
                    f"layer_mask has {len(cfg.layer_mask)} entries for {bank.n_layers} tap layers"
                )
            mask = cfg.layer_mask
        else:
            mask = auto_layer_mask(ratios, cfg.collapse_cutoff)
        det_cfg = DetectorConfig(layer_mask=tuple(mask), histogram_bins=cfg.histogram_bins)

    with timed("calibrate"):
        cal_clean_paths = extract_paths(net, X_cal, y_cal)
        cal_adv_paths = extract_paths(net, cal_batch.perturbed, y_cal)
        eval_clean_paths = extract_paths(net, X_eval, y_eval)
        eval_adv_paths = extract_paths(net, eval_batch.perturbed, y_eval)
        if cfg.threshold_override is not None:
            threshold = float(cfg.threshold_override)
        else:
            if cfg.calibration_mode == "holdout":
                pool = cal_clean_paths + cal_adv_paths
            else:
                pool = eval_clean_paths + eval_adv_paths
            scores = [detect(p, bank, 0.0, det_cfg).score for p in pool]
            threshold = calibrate_threshold(scores, cfg.histogram_bins)

    with timed("select_layers"):
        if cfg.vote_layers is not None:
            vote_cfg = VotingConfig(selected_layers=tuple(cfg.vote_layers))
        else:
            cal_report = layer_accuracy(cal_clean_paths, cal_adv_paths, bank)
            if cfg.top_n is not None:
                top_n = min(cfg.top_n, bank.n_layers)
            else:
                top_n = max(1, int(np.sum(cal_report.per_layer_adv_acc >= VOTE_SELECT_MIN_ACC)))
            vote_cfg = select_layers(cal_report, top_n)

    with timed("evaluate"):
        report = evaluate(
            net,
            bank,
            threshold,
            det_cfg,
            vote_cfg,
            X_eval,
            y_eval,
            eval_batch.perturbed,
            eval_clean_paths,
            eval_adv_paths,
            ratios,
            attack_success_rate=eval_batch.success_rate,
            n_calibration=len(cal_idx),
        )

    if adv_trained is not None:
        with timed("adv_train_eval"):
            at_clean = float(np.mean(predict_examples(adv_trained, X_eval) == y_eval))
            at_batch = attack_dataset(adv_trained, X_eval, y_eval, attack_cfg)
            at_adv = float(np.mean(predict_examples(adv_trained, at_batch.perturbed) == y_eval))
            report.adv_trained_clean_accuracy = at_clean
            report.adv_trained_adversarial_accuracy = at_adv

    report.runtime_seconds = clock
    return ExperimentArtifacts(
        net=net,
        bank=bank,
        threshold=threshold,
        det_cfg=det_cfg,
        vote_cfg=vote_cfg,
        eval_clean_X=X_eval,
        eval_clean_y=y_eval,
        eval_adv_X=eval_batch.perturbed,
        eval_adv_y=y_eval,
        report=report,
    )


def evaluate(
    net: TapNet,
    bank: CentroidBank,
    threshold: float,
    det_cfg: DetectorConfig,
    vote_cfg: VotingConfig,
    X_clean: np.ndarray,
    y_clean: np.ndarray,
    X_adv: np.ndarray,
    clean_paths: list[FeaturePath],
    adv_paths: list[FeaturePath],
    variability,
    attack_success_rate: float,
    n_calibration: int,
) -> MetricsReport:
    """Metrics over one clean pool and its attacked counterpart."""
    std_clean = float(np.mean(predict_examples(net, X_clean) == y_clean))
    std_adv = float(np.mean(predict_examples(net, X_adv) == y_clean))

    def run_pool(X, y):
        labels, verdicts, scores = [], [], []
        for x in X:
            label, verdict = recognize(net, x, bank, threshold, det_cfg, vote_cfg)
            labels.append(label)
            verdicts.append(verdict)
        # scores retraced for the histogram; same statistic detect() used
        for x in X:
            path = FeaturePath.from_trace(forward(net, x))
            scores.append(detect(path, bank, threshold, det_cfg).score)
        acc = float(np.mean(np.asarray(labels) == y))
        flagged = float(np.mean([v is Verdict.ADVERSARIAL for v in verdicts]))
        return acc, flagged, np.asarray(scores)

    pipe_clean_acc, clean_flagged, clean_scores = run_pool(X_clean, y_clean)
    pipe_adv_acc, adv_flagged, adv_scores = run_pool(X_adv, y_clean)

    layer_report = layer_accuracy(clean_paths, adv_paths, bank)

    all_scores = np.concatenate([clean_scores, adv_scores])
    edges = np.histogram_bin_edges(all_scores, bins=det_cfg.histogram_bins)
    clean_counts, _ = np.histogram(clean_scores, bins=edges)
    adv_counts, _ = np.histogram(adv_scores, bins=edges)

    return MetricsReport(
        standard_clean_accuracy=std_clean,
        standard_adversarial_accuracy=std_adv,
        detection_rate_adv=adv_flagged,
        detection_rate_clean=1.0 - clean_flagged,
        balanced_detection_accuracy=(adv_flagged + (1.0 - clean_flagged)) / 2.0,
        pipeline_clean_accuracy=pipe_clean_acc,
        pipeline_adversarial_accuracy=pipe_adv_acc,
        threshold=float(threshold),
        layer_mask=[bool(m) for m in det_cfg.layer_mask],
        selected_layers=[int(l) for l in vote_cfg.selected_layers],
        # degenerate geometry (identical centroids) yields an infinite
        # ratio, which JSON cannot carry; reported as null
        variability=[float(v) if np.isfinite(v) else None for v in variability],
        per_layer_clean_accuracy=[float(a) for a in layer_report.per_layer_clean_acc],
        per_layer_adv_accuracy=[float(a) for a in layer_report.per_layer_adv_acc],
        histogram_edges=[float(e) for e in edges],
        histogram_clean_counts=[int(c) for c in clean_counts],
        histogram_adv_counts=[int(c) for c in adv_counts],
        attack_success_rate=float(attack_success_rate),
        n_calibration=int(n_calibration),
        n_eval_clean=len(X_clean),
        n_eval_adv=len(X_adv),
    )


def layer_sweep(
    artifacts: ExperimentArtifacts,
    candidates: tuple[int, ...],
    min_size: int = 2,
    cap: int = 64,
):
    """Vote accuracy for every candidate-layer subset of size >= min_size.

    Returns rows of (layers, pipeline_adv_accuracy, vote_only_adv_accuracy).
    pipeline_* routes through detection exactly like the main pipeline;
    vote_only_* applies the vote to the whole attacked pool directly.
    """
    candidates = tuple(sorted(set(int(c) for c in candidates)))
    subsets = []
    for size in range(min_size, len(candidates) + 1):
        subsets.extend(combinations(candidates, size))
    if not subsets:
        return []
    if len(subsets) > cap:
        raise ValueError(f"{len(subsets)} subsets exceed the cap of {cap}")

    net, bank = artifacts.net, artifacts.bank
    X_adv, y_adv = artifacts.eval_adv_X, artifacts.eval_adv_y
    adv_paths = extract_paths(net, X_adv)
    model_preds = predict_examples(net, X_adv)
    verdicts = [
        detect(p, bank, artifacts.threshold, artifacts.det_cfg).verdict for p in adv_paths
    ]

    rows = []
    for subset in subsets:
        vc = VotingConfig(selected_layers=subset)
        votes = np.array([vote(p, bank, vc) for p in adv_paths])
        routed = np.where([v is Verdict.ADVERSARIAL for v in verdicts], votes, model_preds)
        rows.append(
            {
                "layers": list(subset),
                "pipeline_adv_accuracy": float(np.mean(routed == y_adv)),
                "vote_only_adv_accuracy": float(np.mean(votes == y_adv)),
            }
        )
    return rows
