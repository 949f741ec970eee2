"""Shared numerical kernels: seeded RNG streams, column statistics,
symmetric eigendecomposition, and PCA whitening.

The RNG is a PCG64 generator seeded through ``numpy.random.SeedSequence``;
labeled sub-streams are derived by hashing the label with SHA-256 into the
spawn key, so the same (seed, label path) always yields the same stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, RankDeficiencyError, ValidationError

_SYM_TOL = 1e-9
_MIN_EIGENVALUE = 1e-12


class RngStream:
    """Seeded random stream with reproducible labeled sub-streams.

    Two streams built with the same seed (and split along the same label
    path) produce identical draws. Children obtained via ``split`` are
    statistically independent of the parent and of each other.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        if self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        self._key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def split(self, label):
        """Derive an independent child stream identified by `label`."""
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words = (
            int.from_bytes(digest[0:4], "little"),
            int.from_bytes(digest[4:8], "little"),
        )
        return RngStream(self.seed, self._key + words)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self._key})"


@dataclass(frozen=True)
class EigenDecomposition:
    """Full symmetric eigendecomposition, eigenvalues descending."""

    eigenvalues: np.ndarray  # (k,), descending
    eigenvectors: np.ndarray  # (k, k), columns orthonormal


@dataclass(frozen=True)
class WhiteningTransform:
    """PCA whitening fitted on a subject-by-feature matrix.

    ``projection`` (c x m) maps centered rows into c decorrelated,
    unit-variance coordinates; ``back_projection`` (m x c) is its
    pseudo-inverse. ``eigenvalues`` holds the c retained covariance
    eigenvalues (descending).
    """

    mean: np.ndarray
    projection: np.ndarray
    back_projection: np.ndarray
    eigenvalues: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.projection.T

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) @ self.back_projection.T + self.mean


def column_mean(x):
    """Per-column means of a 2-D matrix with at least one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got ndim={x.ndim}")
    if x.shape[0] < 1:
        raise ValidationError("column_mean requires at least one row")
    return x.mean(axis=0)


def sym_eig(k):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Raises ValidationError if the input is not square/symmetric (relative
    tolerance 1e-9) and NumericError if the solver fails to converge.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValidationError(f"sym_eig requires a square matrix, got shape {k.shape}")
    scale = np.max(np.abs(k)) if k.size else 0.0
    asym = np.max(np.abs(k - k.T)) if k.size else 0.0
    if asym > _SYM_TOL * max(scale, 1e-300):
        raise ValidationError(
            f"matrix is not symmetric: max |K - K^T| = {asym:.3e} "
            f"exceeds {_SYM_TOL:.0e} relative"
        )
    try:
        vals, vecs = np.linalg.eigh((k + k.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(vals)[::-1]
    return EigenDecomposition(vals[order], vecs[:, order])


def fit_whitening(x, c):
    """Fit a c-dimensional PCA whitening transform to the rows of x.

    The projection is built from the top-c eigenpairs of the sample
    covariance of the centered data, scaled by 1/sqrt(eigenvalue). When
    there are more columns than rows the eigenproblem is solved on the
    n x n Gram matrix and mapped back, which keeps the cost independent
    of the feature count.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got ndim={x.ndim}")
    n, m = x.shape
    if n < 2:
        raise ValidationError("whitening requires at least 2 rows")
    c = int(c)
    c_max = min(n - 1, m)
    if not 1 <= c <= c_max:
        raise ValidationError(
            f"c={c} out of range: need 1 <= c <= min(rows-1, cols) = {c_max}"
        )

    mean = x.mean(axis=0)
    xc = x - mean
    if m <= n:
        cov = xc.T @ xc / (n - 1)
        eig = sym_eig(cov)
        vals = eig.eigenvalues[:c]
        vecs = eig.eigenvectors[:, :c]  # (m, c)
        _check_rank(vals)
    else:
        gram = xc @ xc.T / (n - 1)
        eig = sym_eig(gram)
        vals = eig.eigenvalues[:c]
        _check_rank(vals)
        u = eig.eigenvectors[:, :c]  # (n, c)
        # Map Gram eigenvectors to unit covariance eigenvectors.
        vecs = xc.T @ u / np.sqrt(vals * (n - 1))

    projection = (vecs / np.sqrt(vals)).T  # (c, m)
    back_projection = vecs * np.sqrt(vals)  # (m, c)
    return WhiteningTransform(mean, projection, back_projection, vals.copy())


def _check_rank(vals):
    for i, v in enumerate(vals):
        if v <= _MIN_EIGENVALUE:
            raise RankDeficiencyError(
                f"component {i + 1} has eigenvalue {v:.3e} <= {_MIN_EIGENVALUE:.0e}; "
                "data rank is lower than the requested component count"
            )
