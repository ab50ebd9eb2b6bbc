"""Writer for the featpath feature-dump interchange format.

The layout is the published contract of the consuming pipeline, reproduced
here so the exporter stays a standalone producer:

    header  u32 LE: magic "FPTH", version 1, n_examples, n_classes,
            n_layers, dim_1..dim_L, reserved(=0)
    labels  n_examples * u32 LE
    flags   n_examples bytes (0 clean, 1 adversarial)
    payload float32 LE, example-major, layer-major
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"FPTH"
VERSION = 1


def write_feature_dump(destination, features, labels, flags, n_classes: int):
    """Write one pool of per-layer features.

    features: list over layers of (n, dim_l) arrays; labels: n class ids;
    flags: n bytes-worth of 0/1 provenance markers. Written atomically.
    """
    labels = np.asarray(labels)
    flags = np.asarray(flags)
    n = labels.shape[0]
    if flags.shape != (n,):
        raise ValueError("labels and flags disagree on example count")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if np.any((flags != 0) & (flags != 1)):
        raise ValueError("flags must be 0 or 1")
    blocks = []
    dims = []
    for l, block in enumerate(features):
        block = np.ascontiguousarray(block, dtype="<f4")
        if block.ndim != 2 or block.shape[0] != n:
            raise ValueError(f"layer {l}: expected ({n}, dim) features, got {block.shape}")
        blocks.append(block)
        dims.append(block.shape[1])

    header = MAGIC + struct.pack(
        f"<{5 + len(dims)}I", VERSION, n, n_classes, len(dims), *dims, 0
    )
    body = [
        labels.astype("<u4").tobytes(),
        flags.astype(np.uint8).tobytes(),
    ]
    if n:
        body.append(np.ascontiguousarray(np.concatenate(blocks, axis=1)).tobytes())

    destination = os.fspath(destination)
    directory = os.path.dirname(os.path.abspath(destination))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            for part in body:
                fh.write(part)
        os.replace(tmp, destination)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
