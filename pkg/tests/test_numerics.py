"""Tests for RNG streams, symmetric eigendecomposition, and whitening."""

import numpy as np
import pytest

from icasynth.errors import RankDeficiencyError, ValidationError
from icasynth.numerics import RngStream, column_mean, fit_whitening, sym_eig


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = RngStream(1234).uniform(size=10_000)
        b = RngStream(1234).uniform(size=10_000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = RngStream(1).uniform(size=100)
        b = RngStream(2).uniform(size=100)
        assert not np.array_equal(a, b)

    def test_split_reproducible(self):
        a = RngStream(7).split("fold-3").standard_normal(1000)
        b = RngStream(7).split("fold-3").standard_normal(1000)
        np.testing.assert_array_equal(a, b)

    def test_split_labels_independent(self):
        root = RngStream(7)
        a = root.split("fold-3").standard_normal(1000)
        b = root.split("fold-4").standard_normal(1000)
        assert not np.array_equal(a, b)

    def test_split_differs_from_parent(self):
        a = RngStream(7).standard_normal(100)
        b = RngStream(7).split("x").standard_normal(100)
        assert not np.array_equal(a, b)

    def test_nested_split_path_dependent(self):
        a = RngStream(5).split("outer").split("inner").uniform(size=50)
        b = RngStream(5).split("outer").split("inner").uniform(size=50)
        c = RngStream(5).split("inner").split("outer").uniform(size=50)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_negative_seed_rejected(self):
        with pytest.raises(ValidationError):
            RngStream(-1)

    def test_permutation_is_permutation(self):
        p = RngStream(3).permutation(20)
        assert sorted(p.tolist()) == list(range(20))


class TestColumnMean:
    def test_simple(self):
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        np.testing.assert_allclose(column_mean(x), [2.0, 4.0])

    def test_single_row(self):
        np.testing.assert_allclose(column_mean([[5.0, -1.0]]), [5.0, -1.0])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            column_mean(np.empty((0, 3)))

    def test_non_2d_rejected(self):
        with pytest.raises(ValidationError):
            column_mean(np.zeros(4))


class TestSymEig:
    def test_identity(self):
        eig = sym_eig(np.eye(4))
        np.testing.assert_allclose(eig.eigenvalues, np.ones(4))

    def test_diagonal_sorted_descending(self):
        eig = sym_eig(np.diag([1.0, 5.0, 3.0]))
        np.testing.assert_allclose(eig.eigenvalues, [5.0, 3.0, 1.0])

    def test_reconstruction(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((6, 6))
        k = a @ a.T
        eig = sym_eig(k)
        rec = eig.eigenvectors @ np.diag(eig.eigenvalues) @ eig.eigenvectors.T
        np.testing.assert_allclose(rec, k, atol=1e-8)

    def test_trace_preserved(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 5))
        k = (a + a.T) / 2
        eig = sym_eig(k)
        np.testing.assert_allclose(eig.eigenvalues.sum(), np.trace(k), atol=1e-9)

    def test_orthonormal_vectors(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((7, 7))
        eig = sym_eig(a @ a.T)
        np.testing.assert_allclose(
            eig.eigenvectors.T @ eig.eigenvectors, np.eye(7), atol=1e-9
        )

    def test_asymmetric_rejected(self):
        k = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValidationError):
            sym_eig(k)

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            sym_eig(np.zeros((2, 3)))


class TestFitWhitening:
    def test_whitened_covariance_identity(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((40, 8)) @ rng.standard_normal((8, 8))
        w = fit_whitening(x, 5)
        z = w.apply(x)
        cov = z.T @ z / (x.shape[0] - 1)
        np.testing.assert_allclose(cov, np.eye(5), atol=1e-6)

    def test_gram_path_matches_covariance_path(self):
        # Wide data (cols > rows) goes through the Gram-matrix branch;
        # padding with zero columns forces the covariance branch on the
        # same underlying data. Whitened coordinates must agree.
        rng = np.random.default_rng(11)
        x = rng.standard_normal((12, 30))
        x_pad = np.hstack([x, np.zeros((12, 0))])
        w_gram = fit_whitening(x, 4)
        z_gram = w_gram.apply(x)
        cov = z_gram.T @ z_gram / 11
        np.testing.assert_allclose(cov, np.eye(4), atol=1e-8)
        x_tall = np.vstack([x, x, x])  # rows > cols, covariance branch
        w_cov = fit_whitening(x_tall, 4)
        z_cov = w_cov.apply(x_tall)
        cov2 = z_cov.T @ z_cov / (x_tall.shape[0] - 1)
        np.testing.assert_allclose(cov2, np.eye(4), atol=1e-8)
        assert x_pad.shape == (12, 30)

    def test_round_trip_is_pca_projection(self):
        # invert(apply(x)) equals the rank-c PCA reconstruction of x; with
        # c = full rank the round trip is exact.
        rng = np.random.default_rng(12)
        n, m = 10, 25
        x = rng.standard_normal((n, m))
        w = fit_whitening(x, n - 1)
        np.testing.assert_allclose(w.invert(w.apply(x)), x, atol=1e-8)

    def test_eigenvalues_descending_positive(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((20, 6))
        w = fit_whitening(x, 4)
        assert w.eigenvalues.shape == (4,)
        assert np.all(np.diff(w.eigenvalues) <= 1e-12)
        assert np.all(w.eigenvalues > 0)

    def test_c_bounds_enforced(self):
        x = np.random.default_rng(14).standard_normal((8, 5))
        with pytest.raises(ValidationError):
            fit_whitening(x, 0)
        with pytest.raises(ValidationError):
            fit_whitening(x, 6)  # min(rows-1, cols) = 5... c=6 too large
        fit_whitening(x, 5)  # boundary value is allowed

    def test_rank_deficiency_reported(self):
        rng = np.random.default_rng(15)
        col = rng.standard_normal((10, 1))
        x = np.hstack([col, col, col])  # rank 1
        with pytest.raises(RankDeficiencyError):
            fit_whitening(x, 2)

    def test_whitening_idempotent_on_white_data(self):
        # Whitening already-whitened coordinates changes them only by a
        # rotation/sign; re-whitened covariance stays the identity.
        rng = np.random.default_rng(16)
        x = rng.standard_normal((30, 12))
        w1 = fit_whitening(x, 6)
        z1 = w1.apply(x)
        w2 = fit_whitening(z1, 6)
        z2 = w2.apply(z1)
        n = x.shape[0]
        np.testing.assert_allclose(z2.T @ z2 / (n - 1), np.eye(6), atol=1e-8)
