"""Command-line harness for the layer-wise feature-path pipeline.

Each stage reads and writes files, so pools produced elsewhere (e.g. the
full-scale feature exporter) drop into the same flow: feature dumps feed
`centroids`, `calibrate`, and `detect` without a network checkpoint.
`eval` runs the whole desk-scale protocol in one shot and records a
manifest from which `report` reproduces the metrics bit-for-bit.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from featpath import experiment, formats, synth
from featpath.attacks import AttackConfig, attack_dataset
from featpath.detector import DetectorConfig, auto_layer_mask, calibrate_threshold, detect, Verdict
from featpath.net import TrainConfig, init_net, train
from featpath.paths import compute_centroids, variability_ratio
from featpath.recognizer import VotingConfig, recognize

OUTDIR_ENV = "FEATPATH_OUTDIR"


def _outpath(args, name: str) -> str:
    base = args.outdir or os.environ.get(OUTDIR_ENV) or "."
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, name)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v != "")


def _parse_mask(text: str) -> tuple[bool, ...]:
    return tuple(bool(int(v)) for v in text.split(",") if v != "")


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise SystemExit(f"missing artifact {path!r}: run `featpath {stage}` first")
    return path


def cmd_synth_data(args):
    X_train, y_train, X_test, y_test = synth.make_blobs(
        args.classes, args.dim, args.train_per_class, args.test_per_class,
        args.separation, args.seed,
    )
    out = _outpath(args, args.out)
    formats.save_dataset(X_train, y_train, X_test, y_test, args.classes, out)
    print(f"wrote {out}: {len(X_train)} train / {len(X_test)} test, "
          f"{args.classes} classes, dim {args.dim}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr_drop_epochs=_parse_ints(args.lr_drops) if args.lr_drops else (),
        lr_drop_factor=args.lr_drop_factor,
        rng_seed=args.seed,
    )


def cmd_train(args):
    X_train, y_train, _, _, n_classes = formats.load_dataset(_require(args.dataset, "synth-data"))
    dims = (X_train.shape[1], *_parse_ints(args.hidden), n_classes)
    taps = _parse_ints(args.taps) if args.taps else ()
    net = init_net(dims, taps, seed=args.init_seed)
    net = train(net, X_train, y_train, _train_config(args))
    out = _outpath(args, args.out)
    formats.save_checkpoint(net, out)
    from featpath.net import accuracy

    print(f"wrote {out}: train accuracy {accuracy(net, X_train, y_train):.4f}")


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        epsilon=args.epsilon,
        step_size=args.step_size,
        iterations=args.iterations,
        rng_seed=args.seed,
        random_start=args.random_start,
    )


def cmd_adv_train(args):
    X_train, y_train, _, _, n_classes = formats.load_dataset(_require(args.dataset, "synth-data"))
    dims = (X_train.shape[1], *_parse_ints(args.hidden), n_classes)
    taps = _parse_ints(args.taps) if args.taps else ()
    net = experiment.adv_train(
        dims, taps, args.init_seed, X_train, y_train, _train_config(args), _attack_config(args)
    )
    out = _outpath(args, args.out)
    formats.save_checkpoint(net, out)
    print(f"wrote {out} (adversarially trained, epsilon {args.epsilon})")


def cmd_attack(args):
    net = formats.load_checkpoint(_require(args.net, "train"))
    _, _, X_test, y_test, n_classes = formats.load_dataset(_require(args.dataset, "synth-data"))
    batch = attack_dataset(net, X_test, y_test, _attack_config(args))
    out = _outpath(args, args.out)
    formats.save_pool(batch.perturbed, batch.labels, n_classes, out)
    print(f"wrote {out}: {len(X_test)} examples, attack success rate {batch.success_rate:.4f}")


def cmd_extract(args):
    net = formats.load_checkpoint(_require(args.net, "train"))
    if args.pool:
        X, y, n_classes = formats.load_pool(_require(args.pool, "attack"))
    else:
        X_train, y_train, X_test, y_test, n_classes = formats.load_dataset(
            _require(args.dataset, "synth-data")
        )
        X, y = (X_train, y_train) if args.split == "train" else (X_test, y_test)
    from featpath.net import tapped_features_batch

    features = [f.astype(np.float32) for f in tapped_features_batch(net, X)]
    flag = 1 if args.flag == "adversarial" else 0
    dump = formats.FeatureDump(
        n_classes=n_classes,
        labels=y.astype(np.uint32),
        flags=np.full(len(X), flag, dtype=np.uint8),
        features=features,
    )
    out = _outpath(args, args.out)
    formats.write_dump(dump, out)
    print(f"wrote {out}: {dump.n_examples} examples x {dump.n_layers} layers, dims {dump.layer_dims}")


def cmd_centroids(args):
    dump = formats.read_dump(_require(args.features, "extract"))
    bank = compute_centroids(dump.to_paths(), dump.n_classes)
    out = _outpath(args, args.out)
    formats.save_bank(bank, out)
    print(f"wrote {out}: {bank.n_classes} classes x {bank.n_layers} layers")


def _resolve_mask(args, bank) -> tuple[bool, ...]:
    if args.mask:
        mask = _parse_mask(args.mask)
        if len(mask) != bank.n_layers:
            raise SystemExit(f"--mask needs {bank.n_layers} entries")
        return mask
    if args.auto_mask_from:
        dump = formats.read_dump(_require(args.auto_mask_from, "extract"))
        ratios = variability_ratio(dump.to_paths(), bank)
        mask = auto_layer_mask(ratios, args.cutoff)
        print(f"variability ratios: {[round(float(r), 4) for r in ratios]} -> mask {mask}")
        return mask
    return tuple([True] * bank.n_layers)


def cmd_calibrate(args):
    bank = formats.load_bank(_require(args.bank, "centroids"))
    mask = _resolve_mask(args, bank)
    det_cfg = DetectorConfig(layer_mask=mask, histogram_bins=args.bins)
    scores = []
    for fpath in args.features:
        dump = formats.read_dump(_require(fpath, "extract"))
        scores.extend(detect(p, bank, 0.0, det_cfg).score for p in dump.to_paths())
    if args.threshold is not None:
        tau = args.threshold
    else:
        tau = calibrate_threshold(scores, args.bins)
    out = _outpath(args, args.out)
    formats.save_manifest(
        {"threshold": tau, "layer_mask": list(mask), "bins": args.bins, "n_scores": len(scores)},
        out,
    )
    print(f"wrote {out}: threshold {tau:.6f} over {len(scores)} scores")


def _load_calibration(args, bank):
    if args.calibration:
        cal = formats.load_manifest(_require(args.calibration, "calibrate"))
        tau = cal["threshold"]
        mask = tuple(bool(m) for m in cal["layer_mask"])
        bins = int(cal.get("bins", args.bins))
    else:
        if args.threshold is None:
            raise SystemExit("need --calibration or --threshold")
        tau = args.threshold
        mask = _resolve_mask(args, bank)
        bins = args.bins
    return tau, DetectorConfig(layer_mask=mask, histogram_bins=bins)


def cmd_detect(args):
    bank = formats.load_bank(_require(args.bank, "centroids"))
    tau, det_cfg = _load_calibration(args, bank)
    dump = formats.read_dump(_require(args.features, "extract"))
    out = _outpath(args, args.out)
    flagged = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "flag", "score", "verdict"])
        for i, path in enumerate(dump.to_paths()):
            v = detect(path, bank, tau, det_cfg)
            flagged += v.verdict is Verdict.ADVERSARIAL
            writer.writerow([i, int(dump.labels[i]), int(dump.flags[i]), f"{v.score:.12g}", v.verdict.value])
    n = dump.n_examples
    print(f"wrote {out}: {flagged}/{n} flagged adversarial "
          f"({flagged / n:.4f}) at threshold {tau:.6f}")


def cmd_recognize(args):
    net = formats.load_checkpoint(_require(args.net, "train"))
    bank = formats.load_bank(_require(args.bank, "centroids"))
    tau, det_cfg = _load_calibration(args, bank)
    X, y, _ = formats.load_pool(_require(args.pool, "attack"))
    vote_cfg = VotingConfig(selected_layers=_parse_ints(args.layers))
    out = _outpath(args, args.out)
    correct = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "true_label", "predicted", "verdict"])
        for i, x in enumerate(X):
            label, verdict = recognize(net, x, bank, tau, det_cfg, vote_cfg)
            correct += label == int(y[i])
            writer.writerow([i, int(y[i]), label, verdict.value])
    print(f"wrote {out}: accuracy {correct / len(X):.4f} over {len(X)} examples")


def _config_from_args(args) -> experiment.ExperimentConfig:
    cfg = experiment.ExperimentConfig()
    overrides = {}
    mapping = {
        "classes": "n_classes",
        "dim": "dim",
        "train_per_class": "n_train_per_class",
        "test_per_class": "n_test_per_class",
        "separation": "separation",
        "seed": "data_seed",
        "epochs": "epochs",
        "lr": "learning_rate",
        "epsilon": "epsilon",
        "step_size": "step_size",
        "iterations": "iterations",
        "bins": "histogram_bins",
        "threshold": "threshold_override",
        "top_n": "top_n",
        "calibration_mode": "calibration_mode",
        "cutoff": "collapse_cutoff",
    }
    for arg_name, field_name in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "mask", None):
        overrides["layer_mask"] = _parse_mask(args.mask)
    if getattr(args, "layers", None):
        overrides["vote_layers"] = _parse_ints(args.layers)
    if getattr(args, "hidden", None):
        hidden = _parse_ints(args.hidden)
        overrides["hidden_dims"] = hidden
        overrides["tap_points"] = tuple(range(len(hidden)))
    if getattr(args, "adv_train", False):
        overrides["include_adv_train"] = True
    return dataclasses.replace(cfg, **overrides)


def _write_report_files(args, report: experiment.MetricsReport, cfg: experiment.ExperimentConfig):
    report_path = _outpath(args, args.report_name)
    manifest_path = _outpath(args, args.manifest_name)
    formats.save_manifest(report.to_dict(), report_path)
    formats.save_manifest(
        {"kind": "featpath-experiment", "config": cfg.to_dict(), "metrics": report.to_dict()},
        manifest_path,
    )
    layer_csv = _outpath(args, "per_layer_accuracy.csv")
    with open(layer_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "clean_accuracy", "adversarial_accuracy"])
        for l, (c, a) in enumerate(zip(report.per_layer_clean_accuracy, report.per_layer_adv_accuracy)):
            writer.writerow([l, f"{c:.12g}", f"{a:.12g}"])
    hist_csv = _outpath(args, "score_histogram.csv")
    with open(hist_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "clean_count", "adversarial_count"])
        edges = report.histogram_edges
        for i in range(len(edges) - 1):
            writer.writerow(
                [f"{edges[i]:.12g}", f"{edges[i + 1]:.12g}",
                 report.histogram_clean_counts[i], report.histogram_adv_counts[i]]
            )
    return report_path, manifest_path


def _print_summary(report: experiment.MetricsReport):
    print(f"standard: clean {report.standard_clean_accuracy:.4f}, "
          f"adversarial {report.standard_adversarial_accuracy:.4f}")
    if report.adv_trained_clean_accuracy is not None:
        print(f"adv-trained: clean {report.adv_trained_clean_accuracy:.4f}, "
              f"adversarial {report.adv_trained_adversarial_accuracy:.4f}")
    print(f"detector: TPR {report.detection_rate_adv:.4f}, TNR {report.detection_rate_clean:.4f}, "
          f"balanced {report.balanced_detection_accuracy:.4f}, threshold {report.threshold:.6f}")
    print(f"pipeline: clean {report.pipeline_clean_accuracy:.4f}, "
          f"adversarial {report.pipeline_adversarial_accuracy:.4f}")
    print(f"layer mask {report.layer_mask}, voting layers {report.selected_layers}")


def cmd_eval(args):
    cfg = _config_from_args(args)
    artifacts = experiment.run_experiment(cfg)
    report_path, manifest_path = _write_report_files(args, artifacts.report, cfg)
    _print_summary(artifacts.report)
    print(f"wrote {report_path} and {manifest_path}")


def cmd_layer_sweep(args):
    cfg = _config_from_args(args)
    artifacts = experiment.run_experiment(cfg)
    candidates = _parse_ints(args.candidates) if args.candidates else artifacts.vote_cfg.selected_layers
    rows = experiment.layer_sweep(artifacts, candidates, min_size=args.min_size, cap=args.cap)
    out = _outpath(args, args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layers", "pipeline_adv_accuracy", "vote_only_adv_accuracy"])
        for row in rows:
            writer.writerow(
                ["+".join(str(l) for l in row["layers"]),
                 f"{row['pipeline_adv_accuracy']:.12g}",
                 f"{row['vote_only_adv_accuracy']:.12g}"]
            )
    if not rows:
        print(f"wrote {out}: no subsets of size >= {args.min_size} from candidates {list(candidates)}")
        return
    best = max(rows, key=lambda r: r["pipeline_adv_accuracy"])
    for row in rows:
        print(f"layers {row['layers']}: pipeline {row['pipeline_adv_accuracy']:.4f}, "
              f"vote-only {row['vote_only_adv_accuracy']:.4f}")
    print(f"wrote {out}; best subset {best['layers']}")


def cmd_report(args):
    manifest = formats.load_manifest(_require(args.manifest, "eval"))
    cfg = experiment.ExperimentConfig.from_dict(manifest["config"])
    artifacts = experiment.run_experiment(cfg)
    report_path, manifest_path = _write_report_files(args, artifacts.report, cfg)
    _print_summary(artifacts.report)
    stored = manifest.get("metrics")
    if stored is not None:
        fresh = artifacts.report.to_dict()
        fresh.pop("runtime_seconds")
        ref = dict(stored)
        ref.pop("runtime_seconds", None)
        if fresh == ref:
            print("reproduced stored metrics exactly")
        else:
            diff = [k for k in fresh if fresh.get(k) != ref.get(k)]
            raise SystemExit(f"metrics differ from manifest on: {diff}")
    print(f"wrote {report_path} and {manifest_path}")


def _add_out_args(p, default_report="report.json", default_manifest="manifest.json"):
    p.add_argument("--outdir", default=None, help=f"output directory (default ${OUTDIR_ENV} or .)")
    p.add_argument("--report-name", default=default_report)
    p.add_argument("--manifest-name", default=default_manifest)


def _add_experiment_args(p):
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--test-per-class", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--seed", type=int, default=None, help="data seed")
    p.add_argument("--hidden", default=None, help="comma-separated hidden sizes")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None, help="skip calibration, use this value")
    p.add_argument("--mask", default=None, help="layer mask, e.g. 1,1,0,0")
    p.add_argument("--layers", default=None, help="voting layers, e.g. 0,1,2")
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--calibration-mode", choices=["holdout", "testpool"], default=None)
    p.add_argument("--cutoff", type=float, default=None, help="collapse-variability cutoff")
    p.add_argument("--adv-train", action="store_true", help="include the adversarial-training baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featpath",
        description="Layer-wise feature-path adversarial detection and recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate separated Gaussian blob data")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--train-per-class", type=int, default=500)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="dataset.fpds")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_synth_data)

    for name, func, extra_attack in (("train", cmd_train, False), ("adv-train", cmd_adv_train, True)):
        p = sub.add_parser(name, help=f"{name} a tap network on a dataset file")
        p.add_argument("--dataset", required=True)
        p.add_argument("--hidden", default="64,64,64,64")
        p.add_argument("--taps", default=None, help="tap hidden layers (default: all)")
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--weight-decay", type=float, default=1e-5)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--epochs", type=int, default=40 if not extra_attack else 15)
        p.add_argument("--lr-drops", default="25,35" if not extra_attack else "")
        p.add_argument("--lr-drop-factor", type=float, default=10.0)
        p.add_argument("--seed", type=int, default=2, help="training shuffle seed")
        p.add_argument("--init-seed", type=int, default=1)
        if extra_attack:
            p.add_argument("--epsilon", type=float, default=0.10)
            p.add_argument("--step-size", type=float, default=0.025)
            p.add_argument("--iterations", type=int, default=5)
            p.add_argument("--random-start", action="store_true")
        p.add_argument("--out", default="net.fpnc" if not extra_attack else "advnet.fpnc")
        p.add_argument("--outdir", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("attack", help="PGD-attack a dataset's test split")
    p.add_argument("--net", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epsilon", type=float, default=0.10)
    p.add_argument("--step-size", type=float, default=0.025)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--out", default="attacked.fppl")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("extract", help="dump tapped features of a pool or dataset split")
    p.add_argument("--net", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--pool", default=None, help="pool file from `attack`")
    p.add_argument("--flag", choices=["clean", "adversarial"], default="clean")
    p.add_argument("--out", default="features.fpth")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("centroids", help="build the class-centroid bank from a feature dump")
    p.add_argument("--features", required=True)
    p.add_argument("--out", default="bank.fpcb")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_centroids)

    p = sub.add_parser("calibrate", help="Otsu threshold over feature-dump scores")
    p.add_argument("--bank", required=True)
    p.add_argument("--features", nargs="+", required=True, help="dumps pooled for calibration")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--threshold", type=float, default=None, help="override instead of calibrating")
    p.add_argument("--mask", default=None)
    p.add_argument("--auto-mask-from", default=None, help="training feature dump for the collapse mask")
    p.add_argument("--cutoff", type=float, default=0.1)
    p.add_argument("--out", default="calibration.json")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="classify dump examples as clean/adversarial")
    p.add_argument("--bank", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--calibration", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--auto-mask-from", default=None)
    p.add_argument("--cutoff", type=float, default=0.1)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--out", default="verdicts.csv")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("recognize", help="route a pool through detect-then-vote recognition")
    p.add_argument("--net", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--calibration", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--auto-mask-from", default=None)
    p.add_argument("--cutoff", type=float, default=0.1)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--layers", required=True, help="voting layers, e.g. 0,1,2")
    p.add_argument("--out", default="recognized.csv")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("eval", help="full desk-scale experiment with metrics report")
    _add_experiment_args(p)
    _add_out_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layer-sweep", help="vote accuracy for every candidate-layer subset")
    _add_experiment_args(p)
    p.add_argument("--candidates", default=None, help="candidate layers (default: selected)")
    p.add_argument("--min-size", type=int, default=2)
    p.add_argument("--cap", type=int, default=64)
    p.add_argument("--out", default="layer_sweep.csv")
    _add_out_args(p)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("report", help="re-run an experiment from its manifest")
    p.add_argument("--manifest", required=True)
    _add_out_args(p, default_report="report_rerun.json", default_manifest="manifest_rerun.json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
