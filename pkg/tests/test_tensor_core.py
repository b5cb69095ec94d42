import numpy as np
import pytest

from core.shared import ConfigError, NonFiniteError, ShapeError
from core.tensor_core import (
    RngStream,
    frobenius_norm,
    frobenius_norms,
    inverse_permutation,
    matmul,
    permute_rows,
    sample_gaussian,
    softmax_over_columns_per_row,
    softmax_over_rows_per_column,
)


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), np.array([[3.0], [4.0]]))
        assert np.array_equal(out, [[3.0], [4.0]])

    def test_hand_product(self):
        assert np.array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])

    def test_dimension_mismatch_reports_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_associativity(self, stream):
        for _ in range(20):
            a = stream.normal((3, 4))
            b = stream.normal((4, 5))
            c = stream.normal((5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)


class TestSoftmax:
    def test_column_hand_value(self):
        out = softmax_over_rows_per_column([[np.log(2.0)], [0.0]])
        assert out[:, 0] == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_column_uniform(self):
        out = softmax_over_rows_per_column(np.zeros((4, 3)))
        assert np.allclose(out, 0.25, atol=1e-15)

    def test_column_no_overflow(self):
        out = softmax_over_rows_per_column([[1000.0], [0.0]])
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0)
        assert out[1, 0] == pytest.approx(0.0, abs=1e-300)

    def test_row_single_column_is_one(self):
        out = softmax_over_columns_per_row([[5.0], [-3.0], [0.1]])
        assert np.array_equal(out, np.ones((3, 1)))

    def test_row_hand_value(self):
        out = softmax_over_columns_per_row([[np.log(3.0), 0.0]])
        assert out[0] == pytest.approx([0.75, 0.25], abs=1e-15)

    def test_row_uniform(self):
        assert np.allclose(softmax_over_columns_per_row(np.zeros((2, 5))), 0.2, atol=1e-15)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax_over_rows_per_column([[np.nan], [0.0]])
        with pytest.raises(NonFiniteError):
            softmax_over_columns_per_row([[np.inf, 0.0]])

    def test_simplex_and_shift_invariance(self, stream):
        for _ in range(200):
            m, n = stream.generator.integers(1, 9, size=2)
            logits = stream.normal((m, n), 0.0, 3.0)
            cols = softmax_over_rows_per_column(logits)
            rows = softmax_over_columns_per_row(logits)
            assert np.allclose(cols.sum(axis=0), 1.0, atol=1e-12, rtol=0)
            assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12, rtol=0)
            assert ((cols > 0) & (cols <= 1)).all() and ((rows > 0) & (rows <= 1)).all()
            shifted_cols = softmax_over_rows_per_column(logits + stream.normal((1, n), 0.0, 5.0))
            shifted_rows = softmax_over_columns_per_row(logits + stream.normal((m, 1), 0.0, 5.0))
            assert np.allclose(shifted_cols, cols, atol=1e-12, rtol=0)
            assert np.allclose(shifted_rows, rows, atol=1e-12, rtol=0)


class TestNormsAndPermutations:
    def test_frobenius(self):
        assert frobenius_norm(np.zeros((3, 2))) == 0.0
        assert frobenius_norm([[3.0], [4.0]]) == 5.0
        a = 7.5
        assert frobenius_norm([[a], [-a]]) == pytest.approx(a * np.sqrt(2.0))

    def test_batched_norms_match_single(self, stream):
        xs = stream.normal((16, 2, 5))
        norms = frobenius_norms(xs)
        assert all(norms[i] == frobenius_norm(xs[i]) for i in range(16))

    def test_identity_and_swap(self):
        x = np.array([[1.0], [2.0]])
        assert np.array_equal(permute_rows(x, [0, 1]), x)
        assert np.array_equal(permute_rows(x, [1, 0]), [[2.0], [1.0]])

    def test_inverse_restores_bitwise(self, stream):
        x = stream.normal((6, 3))
        perm = stream.permutation(6)
        back = permute_rows(permute_rows(x, perm), inverse_permutation(perm))
        assert np.array_equal(back, x)

    def test_non_bijective_rejected(self):
        with pytest.raises(ShapeError):
            permute_rows(np.ones((3, 1)), [0, 0, 1])
        with pytest.raises(ShapeError):
            permute_rows(np.ones((3, 1)), [0, 1])


class TestRngStream:
    def test_std_zero_gives_mean(self, stream):
        assert np.array_equal(sample_gaussian(stream, 2, 3, mean=1.5, std=0.0), np.full((2, 3), 1.5))

    def test_negative_std_rejected(self, stream):
        with pytest.raises(ConfigError):
            sample_gaussian(stream, 2, 2, std=-1.0)

    def test_same_seed_same_draws(self):
        a = sample_gaussian(RngStream(7, 'x'), 4, 4)
        b = sample_gaussian(RngStream(7, 'x'), 4, 4)
        assert np.array_equal(a, b)

    def test_stream_names_differ(self):
        a = sample_gaussian(RngStream(7, 'x'), 4, 4)
        b = sample_gaussian(RngStream(7, 'y'), 4, 4)
        assert not np.array_equal(a, b)

    def test_moments(self):
        x = sample_gaussian(RngStream(3, 'moments'), 100000, 1)
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.05
