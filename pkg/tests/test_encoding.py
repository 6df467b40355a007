from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnemd.encoding import (
    BoundExceeded,
    FixedPointCodec,
    decode_product,
    encode,
    encode_matrix,
    int_matmul,
    product_bound,
)


def decimal_encode(x, eps):
    # independent oracle: exact decimal value of the float64 product, rounded
    # half away from zero (ROUND_HALF_UP in decimal means away from zero)
    q = Decimal(x * 10**eps)
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_UP))


class TestEncode:
    def test_examples(self):
        c = FixedPointCodec(2)
        assert encode(c, 0.5) == 50
        assert encode(c, -0.123) == -12
        assert encode(c, 0.125) == 13
        assert encode(c, -0.125) == -13
        assert encode(c, 1.0) == 100

    def test_bound(self):
        c = FixedPointCodec(2, 1.0)
        with pytest.raises(BoundExceeded):
            encode(c, 1.01)
        with pytest.raises(BoundExceeded):
            encode(c, float("nan"))
        with pytest.raises(BoundExceeded):
            encode_matrix(c, [[0.0, -2.0]])

    def test_invalid_codec(self):
        with pytest.raises(ValueError):
            FixedPointCodec(-1)
        with pytest.raises(ValueError):
            FixedPointCodec(2, 0.0)

    @settings(max_examples=300)
    @given(st.integers(0, 4), st.integers(-10**4, 10**4))
    def test_matches_decimal_on_grid(self, eps, k):
        # values on a half-step grid hit the rounding ties
        x = k / (2 * 10**eps)
        assert encode(FixedPointCodec(eps, 1e4), x) == decimal_encode(x, eps)

    @settings(max_examples=300)
    @given(st.integers(0, 5), st.floats(-1, 1, allow_nan=False))
    def test_rounding_error(self, eps, x):
        c = FixedPointCodec(eps)
        assert abs(encode(c, x) / c.scale - x) <= 0.5 / c.scale + 1e-12

    def test_matrix_agrees_with_scalar(self, nrng):
        c = FixedPointCodec(3)
        X = nrng.uniform(-1, 1, (7, 5))
        M = encode_matrix(c, X)
        assert M.dtype == np.int64
        assert all(M[i, j] == encode(c, X[i, j]) for i in range(7) for j in range(5))


class TestProducts:
    def test_decode(self):
        assert decode_product(12345, 2, 3) == 0.12345
        np.testing.assert_array_equal(decode_product(np.array([100, -50]), 1, 1), [1.0, -0.5])

    def test_product_bound(self):
        assert product_bound(FixedPointCodec(2), FixedPointCodec(2), 784) == 784 * 100 * 100
        assert product_bound(FixedPointCodec(1, 2.5), FixedPointCodec(0), 3) == 3 * 25 * 1

    def test_int_matmul_matches_python_ints(self, nrng):
        A = nrng.integers(-10**4, 10**4, (6, 9))
        B = nrng.integers(-10**4, 10**4, (9, 4))
        oracle = [[sum(int(A[i, k]) * int(B[k, j]) for k in range(9)) for j in range(4)] for i in range(6)]
        assert int_matmul(A, B).tolist() == oracle

    def test_int_matmul_overflow_fallback(self):
        A = np.full((2, 3), 2**40, dtype=np.int64)
        B = np.full((3, 2), 2**40, dtype=np.int64)
        out = int_matmul(A, B)
        assert int(out[0, 0]) == 3 * 2**80

    def test_empty(self):
        assert int_matmul(np.zeros((2, 0)), np.zeros((0, 3))).shape == (2, 3)
