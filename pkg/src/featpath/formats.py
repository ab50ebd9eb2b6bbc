"""Binary on-disk formats: feature dumps, centroid banks, checkpoints, datasets.

All files are little-endian with a 4-byte ASCII magic and a u32 version so
a dump written anywhere loads identically everywhere. Feature dumps store
single precision (volume); centroid banks store double precision (they are
the reference geometry). Writers are atomic: write to a temp file in the
same directory, then rename.

Feature dump ("FPTH", version 1):
    header  u32: magic, version, n_examples, n_classes, n_layers,
                 dim_1..dim_L, reserved(=0)        -> (6 + L) * 4 bytes
    labels  n_examples * u32
    flags   n_examples bytes (0 clean, 1 adversarial)
    payload example-major, layer-major float32 vectors

Centroid bank ("FPCB", version 1): same header discipline with fields
(magic, version, n_classes, n_layers, dims..., reserved), then class
counts as u32, then class-major, layer-major float64 centroids.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from featpath.net import TapNet
from featpath.paths import CentroidBank, FeaturePath

DUMP_MAGIC = b"FPTH"
BANK_MAGIC = b"FPCB"
CHECKPOINT_MAGIC = b"FPNC"
DATASET_MAGIC = b"FPDS"
FORMAT_VERSION = 1

LOAD_NORM_TOL = 1e-6  # absorbs float64 round-trip noise on unit centroids


class FormatError(ValueError):
    """Raised for malformed or mismatched binary files."""


@dataclass
class FeatureDump:
    """A labeled batch of feature paths, one float32 matrix per layer."""

    n_classes: int
    labels: np.ndarray
    flags: np.ndarray
    features: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        self.features = [np.ascontiguousarray(f, dtype=np.float32) for f in self.features]
        n = self.n_examples
        if self.flags.shape != (n,):
            raise ValueError("flags and labels disagree on example count")
        if n and self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if np.any(self.flags > 1):
            raise ValueError("flags must be 0 (clean) or 1 (adversarial)")
        for l, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != n:
                raise ValueError(f"layer {l}: feature block shape {f.shape}, expected ({n}, dim)")

    @property
    def n_examples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.features)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    def to_paths(self) -> list[FeaturePath]:
        """Float64 FeaturePaths; precision widens here, at the math boundary."""
        return [
            FeaturePath(
                layers=[np.asarray(f[i], dtype=np.float64) for f in self.features],
                label=int(self.labels[i]),
            )
            for i in range(self.n_examples)
        ]


def _atomic_write(destination, payload: bytes):
    destination = os.fspath(destination)
    directory = os.path.dirname(os.path.abspath(destination))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, destination)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_u32(*values) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


class _Cursor:
    """Sequential reader over a byte buffer with byte accounting."""

    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(
                f"{self.name}: truncated while reading {what}: "
                f"expected {self.pos + count} bytes, got {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u32_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<u4")

    def float_array(self, count: int, what: str, dtype) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype)

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.name}: {len(self.data) - self.pos} unexpected trailing bytes "
                f"(expected exactly {self.pos})"
            )


def _check_magic_version(cur: _Cursor, magic: bytes, kind: str):
    got = cur.take(4, "magic")
    if got != magic:
        raise FormatError(f"{cur.name}: not a {kind} (magic {got!r}, expected {magic!r})")
    version = cur.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{cur.name}: unsupported {kind} version {version} (supported: {FORMAT_VERSION})")


def write_dump(dump: FeatureDump, destination):
    """Serialize a feature dump; see the module docstring for the layout."""
    parts = [
        DUMP_MAGIC,
        _pack_u32(FORMAT_VERSION, dump.n_examples, dump.n_classes, dump.n_layers, *dump.layer_dims, 0),
        dump.labels.astype("<u4").tobytes(),
        dump.flags.astype(np.uint8).tobytes(),
    ]
    if dump.n_examples:
        stacked = np.concatenate([f.astype("<f4") for f in dump.features], axis=1)
        parts.append(np.ascontiguousarray(stacked).tobytes())
    _atomic_write(destination, b"".join(parts))


def read_dump(source) -> FeatureDump:
    """Parse and validate a feature dump file."""
    name = os.fspath(source)
    with open(name, "rb") as fh:
        cur = _Cursor(fh.read(), name)
    _check_magic_version(cur, DUMP_MAGIC, "feature dump")
    n = cur.u32("example count")
    n_classes = cur.u32("class count")
    n_layers = cur.u32("layer count")
    dims = [cur.u32(f"dim of layer {l}") for l in range(n_layers)]
    cur.u32("reserved field")
    if n_classes == 0 and n > 0:
        raise FormatError(f"{name}: zero classes with {n} examples")
    labels = cur.u32_array(n, "labels")
    flags = np.frombuffer(cur.take(n, "flags"), dtype=np.uint8)
    flat = cur.float_array(n * sum(dims), "feature payload", "<f4")
    cur.expect_end()
    if n and labels.max() >= n_classes:
        raise FormatError(f"{name}: label {labels.max()} outside [0, {n_classes})")
    if np.any(flags > 1):
        raise FormatError(f"{name}: flag values must be 0 or 1")
    per_example = flat.reshape(n, sum(dims)) if n else flat.reshape(0, sum(dims))
    offsets = np.cumsum([0] + dims)
    features = [per_example[:, offsets[l] : offsets[l + 1]] for l in range(n_layers)]
    return FeatureDump(n_classes=n_classes, labels=labels, flags=flags, features=features)


def save_bank(bank: CentroidBank, destination):
    """Serialize a centroid bank in double precision."""
    parts = [
        BANK_MAGIC,
        _pack_u32(FORMAT_VERSION, bank.n_classes, bank.n_layers, *bank.layer_dims, 0),
        bank.class_counts.astype("<u4").tobytes(),
    ]
    for c in range(bank.n_classes):
        for l in range(bank.n_layers):
            parts.append(np.ascontiguousarray(bank.centroids[l][c], dtype="<f8").tobytes())
    _atomic_write(destination, b"".join(parts))


def load_bank(source) -> CentroidBank:
    """Parse a centroid bank; unit norms are revalidated on load."""
    name = os.fspath(source)
    with open(name, "rb") as fh:
        cur = _Cursor(fh.read(), name)
    _check_magic_version(cur, BANK_MAGIC, "centroid bank")
    n_classes = cur.u32("class count")
    n_layers = cur.u32("layer count")
    dims = [cur.u32(f"dim of layer {l}") for l in range(n_layers)]
    cur.u32("reserved field")
    counts = cur.u32_array(n_classes, "class counts")
    centroids = [np.empty((n_classes, d)) for d in dims]
    for c in range(n_classes):
        for l in range(n_layers):
            centroids[l][c] = cur.float_array(dims[l], f"centroid class {c} layer {l}", "<f8")
    cur.expect_end()
    for l in range(n_layers):
        norms = np.linalg.norm(centroids[l], axis=1)
        dev = float(np.max(np.abs(norms - 1.0))) if n_classes else 0.0
        if dev > LOAD_NORM_TOL:
            raise FormatError(f"{name}: layer {l} centroid norm deviates from 1 by {dev:.3e}")
    return CentroidBank(centroids=centroids, class_counts=counts.astype(np.int64))


def save_checkpoint(net: TapNet, destination):
    """Serialize network dims, tap points, and float64 parameters."""
    dims = net.layer_dims
    parts = [
        CHECKPOINT_MAGIC,
        _pack_u32(FORMAT_VERSION, len(dims), len(net.tap_points), *dims, *net.tap_points, 0),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    _atomic_write(destination, b"".join(parts))


def load_checkpoint(source) -> TapNet:
    name = os.fspath(source)
    with open(name, "rb") as fh:
        cur = _Cursor(fh.read(), name)
    _check_magic_version(cur, CHECKPOINT_MAGIC, "network checkpoint")
    n_dims = cur.u32("dim count")
    n_taps = cur.u32("tap count")
    dims = [cur.u32(f"layer dim {i}") for i in range(n_dims)]
    taps = [cur.u32(f"tap point {i}") for i in range(n_taps)]
    cur.u32("reserved field")
    weights, biases = [], []
    for i in range(len(dims) - 1):
        w = cur.float_array(dims[i + 1] * dims[i], f"weights of layer {i}", "<f8")
        weights.append(w.reshape(dims[i + 1], dims[i]).copy())
        biases.append(cur.float_array(dims[i + 1], f"biases of layer {i}", "<f8").copy())
    cur.expect_end()
    return TapNet(layer_dims=tuple(dims), weights=weights, biases=biases, tap_points=tuple(taps))


def save_dataset(X_train, y_train, X_test, y_test, n_classes: int, destination):
    """Serialize a labeled train/test split of float64 vectors."""
    X_train = np.ascontiguousarray(X_train, dtype="<f8")
    X_test = np.ascontiguousarray(X_test, dtype="<f8")
    if X_train.shape[1] != X_test.shape[1]:
        raise ValueError("train and test dimensions disagree")
    parts = [
        DATASET_MAGIC,
        _pack_u32(FORMAT_VERSION, n_classes, X_train.shape[1], X_train.shape[0], X_test.shape[0], 0),
        np.asarray(y_train, dtype="<u4").tobytes(),
        np.asarray(y_test, dtype="<u4").tobytes(),
        X_train.tobytes(),
        X_test.tobytes(),
    ]
    _atomic_write(destination, b"".join(parts))


def load_dataset(source):
    """Returns (X_train, y_train, X_test, y_test, n_classes)."""
    name = os.fspath(source)
    with open(name, "rb") as fh:
        cur = _Cursor(fh.read(), name)
    _check_magic_version(cur, DATASET_MAGIC, "dataset")
    n_classes = cur.u32("class count")
    dim = cur.u32("input dim")
    n_train = cur.u32("train count")
    n_test = cur.u32("test count")
    cur.u32("reserved field")
    y_train = cur.u32_array(n_train, "train labels").astype(np.int64)
    y_test = cur.u32_array(n_test, "test labels").astype(np.int64)
    X_train = cur.float_array(n_train * dim, "train inputs", "<f8").reshape(n_train, dim).copy()
    X_test = cur.float_array(n_test * dim, "test inputs", "<f8").reshape(n_test, dim).copy()
    cur.expect_end()
    for what, y in (("train", y_train), ("test", y_test)):
        if y.size and y.max() >= n_classes:
            raise FormatError(f"{name}: {what} label {y.max()} outside [0, {n_classes})")
    return X_train, y_train, X_test, y_test, n_classes


def save_pool(X, y, n_classes: int, destination):
    """A single labeled example pool, stored as a dataset with no train part."""
    X = np.asarray(X, dtype=np.float64)
    save_dataset(np.empty((0, X.shape[1])), np.empty(0, dtype=np.int64), X, y, n_classes, destination)


def load_pool(source):
    """Returns (X, y, n_classes) from a pool file."""
    _, _, X, y, n_classes = load_dataset(source)
    return X, y, n_classes


def save_manifest(manifest: dict, destination):
    """JSON manifest with sorted keys; round-trips losslessly.

    Non-finite numbers are rejected rather than written as bare NaN/Infinity
    tokens no JSON parser is required to accept."""
    payload = json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False).encode() + b"\n"
    _atomic_write(destination, payload)


def load_manifest(source) -> dict:
    with open(os.fspath(source), "r", encoding="utf-8") as fh:
        return json.load(fh)
