"""Decimal fixed-point codec between floats and the bounded integers the
FE schemes encrypt."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BoundExceeded(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    precision_eps: int
    value_bound: float = 1.0

    def __post_init__(self):
        if self.precision_eps < 0:
            raise ValueError("precision must be non-negative")
        if not self.value_bound > 0:
            raise ValueError("value_bound must be positive")

    @property
    def scale(self) -> int:
        return 10**self.precision_eps

    @property
    def int_bound(self) -> int:
        """Largest encoded magnitude."""
        return math.ceil(self.value_bound * self.scale)

    def encode(self, x: float) -> int:
        return encode(self, x)

    def encode_matrix(self, X) -> np.ndarray:
        return encode_matrix(self, X)


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def encode(codec: FixedPointCodec, x: float) -> int:
    if not abs(x) <= codec.value_bound:
        raise BoundExceeded(f"|{x}| exceeds bound {codec.value_bound}")
    return int(_round_half_away(float(x) * codec.scale))


def encode_matrix(codec: FixedPointCodec, X) -> np.ndarray:
    """Elementwise ``encode`` returning an int64 array of the same shape."""
    X = np.asarray(X, dtype=np.float64)
    if X.size and not np.all(np.abs(X) <= codec.value_bound):
        worst = float(np.nanmax(np.abs(X)))
        raise BoundExceeded(f"max |x| = {worst} exceeds bound {codec.value_bound}")
    return _round_half_away(X * codec.scale).astype(np.int64)


def decode_product(v, eps_client: int, eps_server: int):
    """Scale an integer inner product (or an integer array of them) back to float."""
    scale = 10.0 ** (eps_client + eps_server)
    if isinstance(v, np.ndarray):
        return v.astype(np.float64) / scale
    return float(v) / scale


def product_bound(codec_c: FixedPointCodec, codec_s: FixedPointCodec, eta: int) -> int:
    """Largest |<encode(x), encode(w)>| over length-``eta`` vectors within both bounds."""
    return eta * codec_c.int_bound * codec_s.int_bound


def int_matmul(A, B) -> np.ndarray:
    """Exact integer matrix product; falls back to Python ints if int64 could overflow."""
    A = np.asarray(A, dtype=np.int64)
    B = np.asarray(B, dtype=np.int64)
    if A.size == 0 or B.size == 0:
        return np.zeros((A.shape[0], B.shape[1]), dtype=np.int64)
    worst = int(np.abs(A).max()) * int(np.abs(B).max()) * A.shape[1]
    if worst < 2**62:
        return A @ B
    out = np.array(A.astype(object) @ B.astype(object))
    return out
