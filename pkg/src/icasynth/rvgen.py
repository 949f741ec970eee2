"""Random-variate generators over mixing-matrix columns: marginal
histogram rejection sampling and multivariate normal sampling via
spectral decomposition.

The rejection sampler proposes v ~ U(lower, upper) and u ~ U(0, 1) and
accepts v when u < density(v) / max_density. Normalizing by the maximum
bin density gives exact rejection sampling with the tightest constant
envelope regardless of bin width; with equal-width bins the ratio
reduces to mass(bin of v) / max mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import sym_eig

DEFAULT_BIN_COUNT = 20


@dataclass(frozen=True)
class RvGeneratorKind:
    """Which generator to fit over mixing columns.

    Either marginal histogram rejection sampling with `bin_count` bins
    per column, or one joint multivariate normal.
    """

    name: str
    bin_count: int = 0

    def __post_init__(self):
        if self.name not in ("rejection", "mvn"):
            raise ValidationError(f"unknown generator kind {self.name!r}")
        if self.name == "rejection" and self.bin_count < 1:
            raise ValidationError("rejection generator needs bin_count >= 1")

    @classmethod
    def rejection(cls, bin_count=DEFAULT_BIN_COUNT):
        return cls("rejection", int(bin_count))

    @classmethod
    def mvn(cls):
        return cls("mvn")


@dataclass(frozen=True)
class HistogramPdf:
    """N-bin normalized histogram over [lower, upper].

    A degenerate input range (lower == upper) is stored as a single
    point mass so constant columns sample to the constant.
    """

    bin_count: int
    lower: float
    upper: float
    masses: np.ndarray

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=np.float64)
        if masses.ndim != 1 or masses.shape[0] != self.bin_count:
            raise ValidationError("masses length must equal bin_count")
        if np.any(masses < 0):
            raise ValidationError("histogram masses must be non-negative")
        if abs(float(masses.sum()) - 1.0) > 1e-12:
            raise ValidationError("histogram masses must sum to 1")
        if self.lower > self.upper:
            raise ValidationError("histogram needs lower <= upper")
        if self.lower == self.upper and self.bin_count != 1:
            raise ValidationError("degenerate histogram must be a single point mass")
        object.__setattr__(self, "masses", masses)

    @property
    def is_degenerate(self):
        return self.lower == self.upper


def fit_histogram(samples, bin_count):
    """Fit an equal-width normalized histogram over [min, max] of the
    samples; the rightmost bin is closed on both ends.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValidationError("cannot fit a histogram to an empty sample")
    if not np.isfinite(samples).all():
        raise ValidationError("histogram samples must be finite")
    bin_count = int(bin_count)
    if bin_count < 1:
        raise ValidationError("bin_count must be >= 1")
    lo = float(samples.min())
    hi = float(samples.max())
    if lo == hi:
        return HistogramPdf(1, lo, hi, np.array([1.0]))
    counts, _ = np.histogram(samples, bins=bin_count, range=(lo, hi))
    return HistogramPdf(bin_count, lo, hi, counts / samples.size)


def rejection_sample(pdf, m, rng):
    """Draw m values from a histogram pdf by rejection sampling."""
    m = int(m)
    if m < 0:
        raise ValidationError("sample count must be >= 0")
    if m == 0:
        return np.empty(0, dtype=np.float64)
    if pdf.is_degenerate:
        return np.full(m, pdf.lower, dtype=np.float64)

    # Equal-width bins: density(v)/max_density equals mass(v's bin)/max mass.
    ratio = pdf.masses / pdf.masses.max()
    width = (pdf.upper - pdf.lower) / pdf.bin_count
    # proposals are uniform over bins, so the acceptance rate is the
    # mean of the per-bin ratios; floor it to bound the chunk size
    acceptance = max(float(ratio.mean()), 1e-3)

    out = np.empty(m, dtype=np.float64)
    have = 0
    while have < m:
        need = m - have
        chunk = int(need / acceptance * 1.2) + 64
        v = rng.uniform(pdf.lower, pdf.upper, chunk)
        u = rng.uniform(0.0, 1.0, chunk)
        idx = np.floor((v - pdf.lower) / width).astype(np.int64)
        np.clip(idx, 0, pdf.bin_count - 1, out=idx)
        accepted = v[u < ratio[idx]]
        take = min(need, accepted.size)
        out[have : have + take] = accepted[:take]
        have += take
    return out


@dataclass(frozen=True)
class MvnParams:
    """Sample mean/covariance of row vectors plus the spectral root
    V sqrt(Lambda) used for sampling (negative eigenvalues clipped).
    """

    mean: np.ndarray
    covariance: np.ndarray
    spectral_root: np.ndarray


def fit_mvn(a):
    """Fit mean and unbiased sample covariance to the rows of a."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError("fit_mvn expects a 2-D matrix of row vectors")
    if a.shape[0] < 2:
        raise ValidationError(f"fit_mvn needs at least 2 rows, got {a.shape[0]}")
    mean = a.mean(axis=0)
    centered = a - mean
    cov = centered.T @ centered / (a.shape[0] - 1)
    eig = sym_eig(cov)
    vals = np.clip(eig.eigenvalues, 0.0, None)
    root = eig.eigenvectors * np.sqrt(vals)
    return MvnParams(mean, cov, root)


def mvn_sample(params, m, rng):
    """Draw m rows, each mean + spectral_root @ z with z standard normal."""
    m = int(m)
    if m < 0:
        raise ValidationError("sample count must be >= 0")
    c = params.mean.shape[0]
    if m == 0:
        return np.empty((0, c), dtype=np.float64)
    z = rng.standard_normal((m, c))
    return params.mean + z @ params.spectral_root.T
