"""Export per-layer ResNet features (train/clean/adversarial pools) as dumps.

The output files feed the featpath pipeline directly:

    featpath-export --data synth --outdir out
    featpath centroids --features out/train.fpth --outdir out
    featpath calibrate --bank out/bank.fpcb \
        --features out/clean.fpth out/adv.fpth \
        --auto-mask-from out/train.fpth --outdir out
    featpath detect --bank out/bank.fpcb --features out/adv.fpth \
        --calibration out/calibration.json --outdir out
"""

from __future__ import annotations

import argparse
import os
import sys

import torch

from featexport.data import cifar10_pools, synthetic_pools
from featexport.export import export_adversarial, export_features
from featexport.models import build_resnet18, model_accuracy, quick_train
from featexport.tapspec import TapSpec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="featpath-export",
        description="Dump ResNet residual-stage features for the featpath pipeline",
    )
    p.add_argument("--data", choices=["synth", "cifar10"], default="synth")
    p.add_argument("--data-root", default="./data", help="CIFAR-10 location")
    p.add_argument("--checkpoint", default=None, help="state-dict file for the model")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--taps", default="layer1,layer2,layer3,layer4")
    p.add_argument("--vectorize", choices=["flatten", "gap"], default="flatten")
    p.add_argument("--epsilon", type=float, default=8 / 255)
    p.add_argument("--step-size", type=float, default=2 / 255)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--epochs", type=int, default=10, help="quick-train epochs when no checkpoint")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default=".")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed)
    os.makedirs(args.outdir, exist_ok=True)

    if args.data == "synth":
        train_images, train_labels, test_images, test_labels = synthetic_pools(
            args.train_per_class, args.test_per_class, args.classes, seed=args.seed
        )
    else:
        train_images, train_labels, test_images, test_labels = cifar10_pools(
            args.data_root,
            n_train=args.classes * args.train_per_class,
            n_test=args.classes * args.test_per_class,
        )

    model = build_resnet18(args.classes)
    if args.checkpoint:
        state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        print(f"loaded checkpoint {args.checkpoint}")
    else:
        print(f"no checkpoint given; quick-training {args.epochs} epochs on the train pool")
        quick_train(model, train_images, train_labels, epochs=args.epochs,
                    batch_size=args.batch_size, seed=args.seed)

    clean_acc = model_accuracy(model, test_images, test_labels)
    print(f"clean accuracy on the test pool: {clean_acc:.4f}")

    spec = TapSpec(
        model_id="resnet18",
        tap_locations=tuple(args.taps.split(",")),
        vectorize=args.vectorize,
    )

    train_dump = os.path.join(args.outdir, "train.fpth")
    dims = export_features(model, train_images, train_labels, spec, train_dump,
                           args.classes, batch_size=args.batch_size)
    print(f"wrote {train_dump}: {train_images.shape[0]} examples, dims {dims}")

    clean_dump = os.path.join(args.outdir, "clean.fpth")
    export_features(model, test_images, test_labels, spec, clean_dump,
                    args.classes, batch_size=args.batch_size)
    print(f"wrote {clean_dump}: {test_images.shape[0]} examples")

    adv_dump = os.path.join(args.outdir, "adv.fpth")
    adv_images, _ = export_adversarial(
        model, test_images, test_labels, spec, adv_dump, args.classes,
        epsilon=args.epsilon, step_size=args.step_size, iterations=args.iterations,
        batch_size=args.batch_size,
    )
    adv_acc = model_accuracy(model, adv_images, test_labels)
    print(f"wrote {adv_dump}: {adv_images.shape[0]} examples, "
          f"attacked accuracy {adv_acc:.4f} (epsilon {args.epsilon:.5f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
