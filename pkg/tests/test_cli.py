"""Command-line stages: file plumbing, determinism, manifest reproduction."""

import csv
import os

import numpy as np
import pytest

from featpath import formats
from featpath.cli import main

SMALL_EVAL = [
    "--classes", "3", "--dim", "6", "--train-per-class", "40", "--test-per-class", "12",
    "--separation", "6.5", "--hidden", "16,16", "--epochs", "10",
    "--epsilon", "0.08", "--step-size", "0.02", "--iterations", "5", "--bins", "32",
]


def run(argv):
    assert main(argv) == 0


def test_synth_data_same_seed_same_bytes(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        run(["synth-data", "--classes", "3", "--dim", "4", "--train-per-class", "10",
             "--test-per-class", "5", "--separation", "5.0", "--seed", "11",
             "--outdir", str(out)])
    assert (a / "dataset.fpds").read_bytes() == (b / "dataset.fpds").read_bytes()


def test_synth_data_file_size_arithmetic(tmp_path):
    run(["synth-data", "--classes", "3", "--dim", "4", "--train-per-class", "10",
         "--test-per-class", "5", "--separation", "5.0", "--outdir", str(tmp_path)])
    n_train, n_test, dim = 30, 15, 4
    want = 7 * 4 + 4 * (n_train + n_test) + 8 * dim * (n_train + n_test)
    assert os.path.getsize(tmp_path / "dataset.fpds") == want


def test_stage_chain(tmp_path):
    out = str(tmp_path)
    run(["synth-data", "--classes", "3", "--dim", "6", "--train-per-class", "40",
         "--test-per-class", "12", "--separation", "6.5", "--outdir", out])
    ds = os.path.join(out, "dataset.fpds")
    run(["train", "--dataset", ds, "--hidden", "16,16", "--epochs", "10",
         "--lr", "0.1", "--lr-drops", "", "--outdir", out])
    net_path = os.path.join(out, "net.fpnc")

    run(["attack", "--net", net_path, "--dataset", ds, "--epsilon", "0.08",
         "--step-size", "0.02", "--iterations", "5", "--outdir", out])
    pool = os.path.join(out, "attacked.fppl")

    run(["extract", "--net", net_path, "--dataset", ds, "--split", "train",
         "--out", "train.fpth", "--outdir", out])
    run(["extract", "--net", net_path, "--dataset", ds, "--split", "test",
         "--out", "clean.fpth", "--outdir", out])
    run(["extract", "--net", net_path, "--pool", pool, "--flag", "adversarial",
         "--out", "adv.fpth", "--outdir", out])

    train_dump = formats.read_dump(os.path.join(out, "train.fpth"))
    assert train_dump.n_examples == 120 and train_dump.n_layers == 2
    adv_dump = formats.read_dump(os.path.join(out, "adv.fpth"))
    assert np.all(adv_dump.flags == 1)

    run(["centroids", "--features", os.path.join(out, "train.fpth"), "--outdir", out])
    bank = formats.load_bank(os.path.join(out, "bank.fpcb"))
    assert bank.n_classes == 3

    run(["calibrate", "--bank", os.path.join(out, "bank.fpcb"),
         "--features", os.path.join(out, "clean.fpth"), os.path.join(out, "adv.fpth"),
         "--auto-mask-from", os.path.join(out, "train.fpth"),
         "--bins", "32", "--outdir", out])
    cal = formats.load_manifest(os.path.join(out, "calibration.json"))
    assert "threshold" in cal and len(cal["layer_mask"]) == 2

    run(["detect", "--bank", os.path.join(out, "bank.fpcb"),
         "--features", os.path.join(out, "adv.fpth"),
         "--calibration", os.path.join(out, "calibration.json"), "--outdir", out])
    with open(os.path.join(out, "verdicts.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 36
    assert {r["verdict"] for r in rows} <= {"clean", "adversarial"}

    run(["recognize", "--net", net_path, "--bank", os.path.join(out, "bank.fpcb"),
         "--pool", pool, "--calibration", os.path.join(out, "calibration.json"),
         "--layers", "0", "--outdir", out])
    with open(os.path.join(out, "recognized.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 36


def test_missing_artifact_names_stage(tmp_path, capsys):
    with pytest.raises(SystemExit, match="synth-data"):
        main(["train", "--dataset", str(tmp_path / "nope.fpds"), "--outdir", str(tmp_path)])


def test_eval_writes_report_and_sidecars(tmp_path):
    out = str(tmp_path)
    run(["eval", *SMALL_EVAL, "--outdir", out])
    report = formats.load_manifest(os.path.join(out, "report.json"))
    assert 0.0 <= report["balanced_detection_accuracy"] <= 1.0
    manifest = formats.load_manifest(os.path.join(out, "manifest.json"))
    assert manifest["config"]["n_classes"] == 3
    with open(os.path.join(out, "per_layer_accuracy.csv")) as fh:
        assert len(list(csv.DictReader(fh))) == 2
    with open(os.path.join(out, "score_histogram.csv")) as fh:
        hist_rows = list(csv.DictReader(fh))
    assert len(hist_rows) == 32
    assert sum(int(r["clean_count"]) for r in hist_rows) == report["n_eval_clean"]


def test_report_reproduces_manifest_bit_for_bit(tmp_path, capsys):
    out = str(tmp_path)
    run(["eval", *SMALL_EVAL, "--outdir", out])
    first = formats.load_manifest(os.path.join(out, "report.json"))
    run(["report", "--manifest", os.path.join(out, "manifest.json"), "--outdir", out])
    assert "reproduced stored metrics exactly" in capsys.readouterr().out
    second = formats.load_manifest(os.path.join(out, "report_rerun.json"))
    first.pop("runtime_seconds")
    second.pop("runtime_seconds")
    assert first == second


def test_layer_sweep_command(tmp_path):
    out = str(tmp_path)
    run(["layer-sweep", *SMALL_EVAL, "--threshold", "0.9", "--candidates", "0,1",
         "--min-size", "2", "--outdir", out])
    with open(os.path.join(out, "layer_sweep.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["layers"] for r in rows] == ["0+1"]


def test_outdir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("FEATPATH_OUTDIR", str(tmp_path))
    run(["synth-data", "--classes", "2", "--dim", "3", "--train-per-class", "5",
         "--test-per-class", "2", "--separation", "4.0"])
    assert (tmp_path / "dataset.fpds").exists()
