import math

import numpy as np
import pytest

from mpqlab.numerics import (
    ShapeError,
    as_matrix,
    frobenius_norm_sq,
    gaussian_matrix,
    log_softmax,
    make_rng,
    matmul,
    softmax,
    sub_rng,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = gaussian_matrix(make_rng(1), 3, 3)
        np.testing.assert_array_equal(matmul(np.eye(3), m), m)
        np.testing.assert_array_equal(matmul(m, np.eye(3)), m)

    def test_hand_checked(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_matches_triple_loop_bit_for_bit(self):
        rng = make_rng(7)
        a, b = gaussian_matrix(rng, 8, 8), gaussian_matrix(rng, 8, 8)
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_rectangular(self):
        rng = make_rng(8)
        a, b = gaussian_matrix(rng, 3, 5), gaussian_matrix(rng, 5, 2)
        np.testing.assert_array_equal(matmul(a, b), naive_matmul(a, b))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm_sq(np.zeros((4, 4))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm_sq([[3, 4]]) == 25.0

    def test_matches_elementwise_sum(self):
        m = gaussian_matrix(make_rng(3), 5, 5)
        expected = math.fsum(float(v) ** 2 for v in m.ravel())
        assert frobenius_norm_sq(m) == pytest.approx(expected, rel=1e-14)

    def test_positive_for_nonzero(self):
        m = np.zeros((2, 2))
        m[1, 0] = 1e-3
        assert frobenius_norm_sq(m) > 0


class TestRandom:
    def test_gaussian_moments(self):
        x = gaussian_matrix(make_rng(0), 1000, 1000)
        # 3 sigma bounds: se(mean) = 1e-3, se(var) ~ 1.4e-3
        assert abs(x.mean()) < 0.01
        assert abs(x.var() - 1.0) < 0.02

    def test_same_seed_same_matrix(self):
        np.testing.assert_array_equal(gaussian_matrix(make_rng(5), 4, 6), gaussian_matrix(make_rng(5), 4, 6))

    def test_single_value(self):
        v = gaussian_matrix(make_rng(2), 1, 1)
        assert v.shape == (1, 1) and np.isfinite(v[0, 0])

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            gaussian_matrix(make_rng(0), 0, 3)

    def test_sub_streams_are_distinct_and_stable(self):
        a = sub_rng(0, 1).standard_normal(5)
        b = sub_rng(0, 2).standard_normal(5)
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, sub_rng(0, 1).standard_normal(5))

    def test_negative_seed(self):
        with pytest.raises(ValueError):
            make_rng(-1)


class TestAsMatrix:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_matrix([[1.0, float("nan")]])

    def test_checks_shape(self):
        with pytest.raises(ShapeError):
            as_matrix([[1, 2, 3]], rows=1, cols=2)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        z = gaussian_matrix(make_rng(4), 6, 5) * 50
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)

    def test_log_softmax_stable(self):
        z = np.array([[1000.0, 0.0, -1000.0]])
        out = log_softmax(z)
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(0.0, abs=1e-12)
