"""Classical comparison classifiers on raw features: L2 logistic
regression trained by monotone gradient descent, Gaussian naive Bayes,
shrinkage LDA, and k-nearest neighbors.

Every model scores samples in (0, 1) with higher meaning more SZ-like.
GNB and LDA scores squash the per-feature mean log-likelihood ratio
(not the raw sum) through a sigmoid: dividing by the feature count is
strictly monotone, so rankings and the 0.5 decision point are
unchanged, but scores stay away from exact 0/1 in high dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import StratificationError, ValidationError

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class BaselineKind:
    """Which classical classifier to fit, with its hyperparameters."""

    name: str
    l2: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    shrinkage: float = 0.5
    k: int = 5

    def __post_init__(self):
        if self.name not in ("logistic_regression", "gaussian_nb", "lda", "knn"):
            raise ValidationError(f"unknown baseline kind {self.name!r}")
        if self.l2 < 0 or self.max_iter < 1 or self.tol <= 0:
            raise ValidationError("logistic regression hyperparameters out of range")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise ValidationError("shrinkage must lie in [0, 1]")
        if self.k < 1:
            raise ValidationError("k must be >= 1")

    @classmethod
    def logistic_regression(cls, l2=1.0, max_iter=500, tol=1e-6):
        return cls("logistic_regression", l2=l2, max_iter=max_iter, tol=tol)

    @classmethod
    def gaussian_nb(cls):
        return cls("gaussian_nb")

    @classmethod
    def lda(cls, shrinkage=0.5):
        return cls("lda", shrinkage=shrinkage)

    @classmethod
    def knn(cls, k=5):
        return cls("knn", k=k)


@dataclass(frozen=True)
class BaselineModel:
    kind: BaselineKind
    n_features: int
    params: dict


def _validate_training_data(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("training data must be 2-D")
    if not np.isfinite(x).all():
        raise ValidationError("training data must be finite")
    if y.shape != (x.shape[0],):
        raise ValidationError("labels must align with training rows")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValidationError("labels must be 0 or 1")
    n0 = int(np.sum(y == 0.0))
    n1 = int(np.sum(y == 1.0))
    if n0 < 2 or n1 < 2:
        raise StratificationError(
            f"need at least 2 samples per class, got {n0} HC and {n1} SZ"
        )
    return x, y, n0, n1


def _lr_loss(x, y, w, b, l2):
    z = x @ w + b
    p = np.clip(expit(z), PROB_CLIP, 1.0 - PROB_CLIP)
    data = -float(np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    return data + l2 * float(w @ w)


def _fit_logistic_regression(kind, x, y):
    n, m = x.shape
    w = np.zeros(m)
    b = 0.0
    loss = _lr_loss(x, y, w, b, kind.l2)
    trace = [loss]
    step = 1.0
    for _ in range(kind.max_iter):
        p = expit(x @ w + b)
        gw = x.T @ (p - y) / n + 2.0 * kind.l2 * w
        gb = float(np.mean(p - y))
        # backtracking: halve the step until the loss actually decreases
        while True:
            w2 = w - step * gw
            b2 = b - step * gb
            loss2 = _lr_loss(x, y, w2, b2, kind.l2)
            if loss2 <= loss:
                break
            step *= 0.5
            if step < 1e-18:
                return w, b, tuple(trace)
        improvement = loss - loss2
        w, b, loss = w2, b2, loss2
        trace.append(loss)
        step *= 1.5
        if improvement < kind.tol:
            break
    return w, b, tuple(trace)


def fit_baseline(kind, x, y):
    """Fit one classical classifier; requires 2+ samples per class."""
    x, y, n0, n1 = _validate_training_data(x, y)
    m = x.shape[1]
    if kind.name == "logistic_regression":
        w, b, trace = _fit_logistic_regression(kind, x, y)
        params = {"weights": w, "bias": b, "loss_trace": trace}
    elif kind.name == "gaussian_nb":
        means = np.vstack([x[y == 0.0].mean(axis=0), x[y == 1.0].mean(axis=0)])
        variances = np.vstack([x[y == 0.0].var(axis=0), x[y == 1.0].var(axis=0)])
        variances = np.maximum(variances, 1e-9)
        params = {
            "means": means,
            "variances": variances,
            "log_priors": np.log(np.array([n0, n1]) / (n0 + n1)),
        }
    elif kind.name == "lda":
        mu0 = x[y == 0.0].mean(axis=0)
        mu1 = x[y == 1.0].mean(axis=0)
        c0 = x[y == 0.0] - mu0
        c1 = x[y == 1.0] - mu1
        pooled = (c0.T @ c0 + c1.T @ c1) / (n0 + n1 - 2)
        target = (np.trace(pooled) / m) * np.eye(m)
        shrunk = (1.0 - kind.shrinkage) * pooled + kind.shrinkage * target
        w = np.linalg.solve(shrunk, mu1 - mu0)
        b = -0.5 * float((mu0 + mu1) @ w) + float(np.log(n1 / n0))
        params = {"weights": w, "bias": b}
    else:  # knn
        if kind.k > x.shape[0]:
            raise ValidationError(
                f"k={kind.k} exceeds the {x.shape[0]} stored training samples"
            )
        params = {"train_x": x.copy(), "train_y": y.copy()}
    return BaselineModel(kind, m, params)


def baseline_predict_proba(model, x):
    """Score rows of x in (0, 1); higher means more SZ-like."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValidationError(
            f"expected (n, {model.n_features}) input, got shape {x.shape}"
        )
    kind = model.kind
    p = model.params
    if kind.name == "logistic_regression":
        scores = expit(x @ p["weights"] + p["bias"])
    elif kind.name == "gaussian_nb":
        ll = []
        for cls in (0, 1):
            mu = p["means"][cls]
            var = p["variances"][cls]
            ll.append(
                -0.5 * np.sum(np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var, axis=1)
                + p["log_priors"][cls]
            )
        scores = expit((ll[1] - ll[0]) / model.n_features)
    elif kind.name == "lda":
        z = x @ p["weights"] + p["bias"]
        scores = expit(z / model.n_features)
    else:  # knn
        scores = np.empty(x.shape[0])
        train_x = p["train_x"]
        train_y = p["train_y"]
        for i, q in enumerate(x):
            d2 = np.sum((train_x - q) ** 2, axis=1)
            # stable sort: distance ties resolve to the smaller index
            nearest = np.argsort(d2, kind="stable")[: kind.k]
            scores[i] = train_y[nearest].mean()
    return np.clip(scores, PROB_CLIP, 1.0 - PROB_CLIP)
