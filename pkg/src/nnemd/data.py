"""Dataset ingestion: MNIST idx files (optionally gzipped) and plain csv."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_IDX = "mnist-idx"
CSV = "csv"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    format: str
    paths: tuple  # (images, labels) for idx, (table,) for csv
    normalize: bool = True  # divide raw values by 255
    feature_slice: tuple | None = None
    sample_slice: tuple | None = None
    label_column: str | int | None = None


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 4:
        raise DatasetError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise DatasetError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(shape))
    if len(data) - head != size:
        raise DatasetError(f"{path}: expected {size} payload bytes, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(shape)


def write_idx(path, arr, compress: bool = False) -> None:
    """Write a uint8 array as an idx file (images if 3-d, labels if 1-d)."""
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(gzip.compress(blob) if compress else blob)


def _apply_slices(spec: DatasetSpec, X, y):
    if spec.sample_slice is not None:
        a, b = spec.sample_slice
        if not 0 <= a < b <= X.shape[0]:
            raise DatasetError(f"sample slice {spec.sample_slice} outside [0, {X.shape[0]}]")
        X = X[a:b]
        y = None if y is None else y[a:b]
    if spec.feature_slice is not None:
        a, b = spec.feature_slice
        if not 0 <= a < b <= X.shape[1]:
            raise DatasetError(f"feature slice {spec.feature_slice} outside [0, {X.shape[1]}]")
        X = X[:, a:b]
    return X, y


def _load_idx(spec: DatasetSpec):
    images = read_idx(spec.paths[0], IDX_IMAGES)
    labels = read_idx(spec.paths[1], IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    if spec.normalize:
        X /= 255.0
    return X, labels.astype(np.int64)


def _load_csv(spec: DatasetSpec):
    with open(spec.paths[0], newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{spec.paths[0]}: empty file")
    header, body = rows[0], rows[1:]
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(
            len(body), len(header)
        )
    except ValueError as exc:
        raise DatasetError(f"{spec.paths[0]}: {exc}") from exc
    y = None
    if spec.label_column is not None:
        col = spec.label_column
        j = header.index(col) if isinstance(col, str) else int(col)
        y = table[:, j].astype(np.int64)
        table = np.delete(table, j, axis=1)
    if spec.normalize:
        table /= 255.0
    return table, y


def load_dataset(spec: DatasetSpec):
    """Return ``(X, y)``; ``y`` is None for an unlabelled csv."""
    if spec.format == MNIST_IDX:
        X, y = _load_idx(spec)
    elif spec.format == CSV:
        X, y = _load_csv(spec)
    else:
        raise DatasetError(f"unknown dataset format {spec.format!r}")
    return _apply_slices(spec, X, y)
