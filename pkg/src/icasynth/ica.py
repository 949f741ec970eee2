"""FastICA factorization of a subject-by-feature matrix X into a
mixing matrix A (subject loadings) and sources S (feature patterns),
so that X = A S + feature_mean, plus the matching reconstruction.

The factorization treats features as samples: X is column-centered,
reduced to c dimensions by PCA whitening, and the c principal signals
are unmixed by symmetric fixed-point FastICA with the logcosh (a = 1)
contrast and inverse-square-root orthogonalization. Sources are scaled
to unit sample variance, with all scale absorbed into mixing columns.

Estimation runs on row-centered, exactly re-whitened signals, but the
estimated transform is applied to the uncentered signals. Sources
therefore keep their feature-space means, which is what makes
mixing @ sources an exact rank-c reconstruction of the centered data.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .datamodel import load_matrix, save_matrix
from .errors import NumericError, ValidationError
from .numerics import RngStream, WhiteningTransform, fit_whitening, sym_eig


@dataclass(frozen=True)
class ConvergenceInfo:
    iterations: int
    final_delta: float
    converged: bool


@dataclass(frozen=True)
class IcaModel:
    """Fitted factorization X ~ mixing @ sources + feature_mean."""

    mixing: np.ndarray  # (n, c) subject loadings
    sources: np.ndarray  # (c, m) unit-variance feature patterns
    feature_mean: np.ndarray  # (m,)
    c: int
    whitening: WhiteningTransform
    convergence: ConvergenceInfo


def _sym_decorrelate(w):
    """Replace w by (w w^T)^(-1/2) w, making its rows orthonormal."""
    eig = sym_eig(w @ w.T)
    vals = eig.eigenvalues
    if vals[-1] <= 1e-14 * max(vals[0], 1e-300):
        raise NumericError("unmixing matrix became singular during decorrelation")
    v = eig.eigenvectors
    inv_root = (v / np.sqrt(vals)) @ v.T
    return inv_root @ w


def _fastica_symmetric(y, max_iter, tol, rng):
    """Estimate an orthogonal unmixing matrix for whitened signals y (c x m)."""
    c, m = y.shape
    w = _sym_decorrelate(rng.standard_normal((c, c)))
    delta = np.inf
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        wy = np.tanh(w @ y)
        w_new = (wy @ y.T) / m - (1.0 - wy**2).mean(axis=1)[:, None] * w
        w_new = _sym_decorrelate(w_new)
        # 1 - |cos angle| between old and new row directions
        delta = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if delta < tol:
            converged = True
            break
    return w, ConvergenceInfo(iterations, delta, converged)


def fit_ica(x, c, max_iter=200, tol=1e-4, rng=None):
    """Fit a c-component ICA model to the rows of x.

    Non-convergence within max_iter is not an error; the returned model
    is flagged through convergence info and the caller decides.
    """
    if rng is None:
        rng = RngStream(0)
    x = np.asarray(x, dtype=np.float64)
    whitening = fit_whitening(x, c)  # validates x and 1 <= c <= min(n-1, m)
    c = int(c)
    n, m = x.shape

    # Principal signals over features: y0 = sqrt(m) * V_c^T, which has
    # exact unit second moment, (1/m) y0 y0^T = I.
    y0 = np.sqrt(m) * (np.sqrt(whitening.eigenvalues)[:, None] * whitening.projection)
    row_means = y0.mean(axis=1, keepdims=True)
    yc = y0 - row_means

    # Row-centering perturbs whiteness, so re-whiten exactly before the
    # fixed-point iteration.
    eig = sym_eig(yc @ yc.T / m)
    if eig.eigenvalues[-1] <= 1e-12:
        raise NumericError(
            "a retained component is constant across features; cannot whiten"
        )
    q = (eig.eigenvectors / np.sqrt(eig.eigenvalues)).T

    w, info = _fastica_symmetric(q @ yc, max_iter, tol, rng)

    # Apply the estimated transform to the uncentered signals and scale
    # each source to unit sample variance.
    sources = (w @ q) @ y0
    scale = sources.std(axis=1, ddof=1)
    if np.any(scale <= 0):
        raise NumericError("estimated source with zero variance")
    sources /= scale[:, None]

    # Least-squares mixing; sources span the top-c principal subspace,
    # so mixing @ sources is exactly the rank-c reconstruction.
    xc = x - whitening.mean
    gram = sources @ sources.T
    mixing = np.linalg.solve(gram, sources @ xc.T).T

    return IcaModel(mixing, sources, whitening.mean.copy(), c, whitening, info)


def reconstruct(mixing, sources, feature_mean):
    """Compute mixing @ sources + feature_mean (broadcast per row)."""
    mixing = np.asarray(mixing, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    feature_mean = np.asarray(feature_mean, dtype=np.float64)
    if mixing.ndim != 2 or sources.ndim != 2 or feature_mean.ndim != 1:
        raise ValidationError("reconstruct expects 2-D mixing/sources and a 1-D mean")
    if mixing.shape[1] != sources.shape[0]:
        raise ValidationError(
            f"mixing has {mixing.shape[1]} columns but sources has "
            f"{sources.shape[0]} rows"
        )
    if sources.shape[1] != feature_mean.shape[0]:
        raise ValidationError(
            f"sources has {sources.shape[1]} columns but feature_mean has "
            f"length {feature_mean.shape[0]}"
        )
    return mixing @ sources + feature_mean


_MODEL_FILES = {
    "mixing": "mixing.mat",
    "sources": "sources.mat",
    "feature_mean": "feature_mean.mat",
    "whitening_mean": "whitening_mean.mat",
    "whitening_projection": "whitening_projection.mat",
    "whitening_back_projection": "whitening_back_projection.mat",
    "whitening_eigenvalues": "whitening_eigenvalues.mat",
}


def save_ica_model(model, directory):
    """Persist a model as manifest.json plus MAT1 binaries."""
    os.makedirs(directory, exist_ok=True)
    arrays = {
        "mixing": model.mixing,
        "sources": model.sources,
        "feature_mean": model.feature_mean[None, :],
        "whitening_mean": model.whitening.mean[None, :],
        "whitening_projection": model.whitening.projection,
        "whitening_back_projection": model.whitening.back_projection,
        "whitening_eigenvalues": model.whitening.eigenvalues[None, :],
    }
    for key, fname in _MODEL_FILES.items():
        save_matrix(arrays[key], os.path.join(directory, fname), "bin")
    manifest = {
        "kind": "ica-model",
        "c": model.c,
        "n_subjects": int(model.mixing.shape[0]),
        "n_features": int(model.sources.shape[1]),
        "convergence": {
            "iterations": model.convergence.iterations,
            "final_delta": model.convergence.final_delta,
            "converged": model.convergence.converged,
        },
        "files": dict(_MODEL_FILES),
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ica_model(directory):
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "ica-model":
        raise ValidationError(f"{directory}: manifest is not an ica-model manifest")
    files = manifest["files"]
    arrays = {
        key: load_matrix(os.path.join(directory, files[key]), "bin")
        for key in _MODEL_FILES
    }
    whitening = WhiteningTransform(
        arrays["whitening_mean"][0],
        arrays["whitening_projection"],
        arrays["whitening_back_projection"],
        arrays["whitening_eigenvalues"][0],
    )
    conv = manifest["convergence"]
    info = ConvergenceInfo(int(conv["iterations"]), float(conv["final_delta"]), bool(conv["converged"]))
    return IcaModel(
        arrays["mixing"],
        arrays["sources"],
        arrays["feature_mean"][0],
        int(manifest["c"]),
        whitening,
        info,
    )
