"""Class-conditional synthetic data generation: fit ICA on the data
matrix labels-blind, split the mixing rows by diagnosis, fit a random
variate generator per class over mixing columns, and stream
reconstructed labeled batches on-the-fly.

No synthetic corpus is ever materialized; batches are built on demand
and all randomness flows from the caller's RngStream, so a stream is
reproducible from its seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .datamodel import LABEL_HC, LABEL_SZ, load_matrix, save_matrix
from .errors import StratificationError, ValidationError
from .ica import fit_ica, load_ica_model, save_ica_model
from .rvgen import (
    HistogramPdf,
    MvnParams,
    RvGeneratorKind,
    fit_histogram,
    fit_mvn,
    mvn_sample,
    rejection_sample,
)


@dataclass(frozen=True)
class BatchSpec:
    """How many subjects of each class per batch, and how many batches."""

    hc_per_batch: int
    sz_per_batch: int
    batches: int

    def __post_init__(self):
        if self.hc_per_batch < 0 or self.sz_per_batch < 0:
            raise ValidationError("per-batch counts must be >= 0")
        if self.hc_per_batch + self.sz_per_batch < 1:
            raise ValidationError("a batch needs at least one sample")
        if self.batches < 1:
            raise ValidationError("need at least one batch")

    @property
    def batch_size(self):
        return self.hc_per_batch + self.sz_per_batch


@dataclass(frozen=True)
class SyntheticBatch:
    """One labeled batch plus the mixing rows it was built from."""

    data: np.ndarray  # (batch_size, m)
    labels: np.ndarray  # (batch_size,)
    batch_index: int
    mixing_rows: np.ndarray  # (batch_size, c), aligned with data rows


@dataclass(frozen=True)
class GeneratorModel:
    """Fitted ICA model plus per-class RV state over mixing columns.

    For the rejection kind each class holds one histogram pdf per
    mixing column; for the MVN kind each class holds one joint
    mean/covariance. `fit_rows` records which dataset rows the RV
    models were allowed to see (all rows by default; the training fold
    in cross-validation).
    """

    ica: object
    kind: RvGeneratorKind
    hc_model: object
    sz_model: object
    class_counts: tuple
    fit_rows: tuple


def _fit_class_model(rows, kind):
    if kind.name == "mvn":
        return fit_mvn(rows)
    return [fit_histogram(rows[:, j], kind.bin_count) for j in range(rows.shape[1])]


def fit_generator(dataset, c, kind, rng, max_iter=200, tol=1e-4, fit_rows=None, ica_model=None):
    """Fit a class-conditional generator to a labeled dataset.

    ICA always sees the full data matrix and never the labels. The
    class-conditional RV models see only the mixing rows listed in
    `fit_rows` (default: all rows). A pre-fitted `ica_model` for the
    same data matrix may be supplied to avoid refitting across folds.
    """
    if fit_rows is None:
        fit_rows = np.arange(dataset.n_subjects)
    fit_rows = np.asarray(fit_rows, dtype=np.int64)
    if fit_rows.size == 0:
        raise ValidationError("fit_rows must not be empty")
    if fit_rows.min() < 0 or fit_rows.max() >= dataset.n_subjects:
        raise ValidationError("fit_rows out of range for dataset")

    labels = dataset.labels[fit_rows]
    n_hc = int(np.sum(labels == LABEL_HC))
    n_sz = int(np.sum(labels == LABEL_SZ))
    if n_hc < 2 or n_sz < 2:
        raise StratificationError(
            f"need at least 2 subjects per class to fit a generator; "
            f"got {n_hc} HC and {n_sz} SZ"
        )

    if ica_model is None:
        ica_model = fit_ica(dataset.data, c, max_iter=max_iter, tol=tol, rng=rng)
    elif ica_model.mixing.shape[0] != dataset.n_subjects:
        raise ValidationError(
            f"pre-fitted ICA covers {ica_model.mixing.shape[0]} subjects, "
            f"dataset has {dataset.n_subjects}"
        )

    hc_rows = fit_rows[labels == LABEL_HC]
    sz_rows = fit_rows[labels == LABEL_SZ]
    hc_model = _fit_class_model(ica_model.mixing[hc_rows], kind)
    sz_model = _fit_class_model(ica_model.mixing[sz_rows], kind)
    return GeneratorModel(
        ica_model, kind, hc_model, sz_model, (n_hc, n_sz), tuple(fit_rows.tolist())
    )


def _sample_class_rows(model, kind, count, rng):
    if kind.name == "mvn":
        return mvn_sample(model, count, rng)
    cols = [rejection_sample(pdf, count, rng) for pdf in model]
    return np.column_stack(cols) if cols else np.empty((count, 0))


def next_batch(gen, spec, batch_index, rng):
    """Build one synthetic batch, or return None past the end of the
    stream (batch_index >= spec.batches).

    Draw order is fixed: HC mixing rows first, then SZ (column by
    column for the rejection kind), then an in-batch shuffle.
    """
    batch_index = int(batch_index)
    if batch_index < 0:
        raise ValidationError("batch_index must be >= 0")
    if batch_index >= spec.batches:
        return None
    a_hc = _sample_class_rows(gen.hc_model, gen.kind, spec.hc_per_batch, rng)
    a_sz = _sample_class_rows(gen.sz_model, gen.kind, spec.sz_per_batch, rng)
    mixing_rows = np.vstack([a_hc, a_sz])
    labels = np.concatenate(
        [
            np.full(spec.hc_per_batch, LABEL_HC, dtype=np.int64),
            np.full(spec.sz_per_batch, LABEL_SZ, dtype=np.int64),
        ]
    )
    perm = rng.permutation(spec.batch_size)
    mixing_rows = mixing_rows[perm]
    labels = labels[perm]
    data = mixing_rows @ gen.ica.sources + gen.ica.feature_mean
    return SyntheticBatch(data, labels, batch_index, mixing_rows)


def generator_stream(gen, spec, rng):
    """Yield exactly spec.batches batches, each emitted once."""
    for i in range(spec.batches):
        yield next_batch(gen, spec, i, rng)


_CLASS_KEYS = {"hc": "hc_model", "sz": "sz_model"}


def save_generator_model(gen, directory):
    """Persist a generator as manifest.json + MAT1 blobs (ICA parts and
    per-class RV parameters).
    """
    os.makedirs(directory, exist_ok=True)
    save_ica_model(gen.ica, os.path.join(directory, "ica"))
    files = {}
    for tag, attr in _CLASS_KEYS.items():
        model = getattr(gen, attr)
        if gen.kind.name == "mvn":
            parts = {
                f"{tag}_mean": model.mean[None, :],
                f"{tag}_covariance": model.covariance,
                f"{tag}_spectral_root": model.spectral_root,
            }
        else:
            n = gen.kind.bin_count
            lowers = np.array([[pdf.lower for pdf in model]])
            uppers = np.array([[pdf.upper for pdf in model]])
            masses = np.zeros((len(model), n))
            for j, pdf in enumerate(model):
                masses[j, : pdf.masses.size] = pdf.masses
            parts = {
                f"{tag}_lower": lowers,
                f"{tag}_upper": uppers,
                f"{tag}_masses": masses,
            }
        for key, arr in parts.items():
            fname = f"{key}.mat"
            save_matrix(arr, os.path.join(directory, fname), "bin")
            files[key] = fname
    manifest = {
        "kind": "generator-model",
        "rv_kind": gen.kind.name,
        "bin_count": gen.kind.bin_count,
        "class_counts": list(gen.class_counts),
        "fit_rows": list(gen.fit_rows),
        "files": files,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_class_model(directory, files, tag, kind):
    if kind.name == "mvn":
        return MvnParams(
            load_matrix(os.path.join(directory, files[f"{tag}_mean"]), "bin")[0],
            load_matrix(os.path.join(directory, files[f"{tag}_covariance"]), "bin"),
            load_matrix(os.path.join(directory, files[f"{tag}_spectral_root"]), "bin"),
        )
    lowers = load_matrix(os.path.join(directory, files[f"{tag}_lower"]), "bin")[0]
    uppers = load_matrix(os.path.join(directory, files[f"{tag}_upper"]), "bin")[0]
    masses = load_matrix(os.path.join(directory, files[f"{tag}_masses"]), "bin")
    pdfs = []
    for j in range(lowers.shape[0]):
        if lowers[j] == uppers[j]:
            pdfs.append(HistogramPdf(1, lowers[j], uppers[j], np.array([1.0])))
        else:
            pdfs.append(HistogramPdf(kind.bin_count, lowers[j], uppers[j], masses[j]))
    return pdfs


def load_generator_model(directory):
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "generator-model":
        raise ValidationError(f"{directory}: manifest is not a generator-model manifest")
    if manifest["rv_kind"] == "mvn":
        kind = RvGeneratorKind.mvn()
    else:
        kind = RvGeneratorKind.rejection(manifest["bin_count"])
    ica_model = load_ica_model(os.path.join(directory, "ica"))
    files = manifest["files"]
    hc_model = _load_class_model(directory, files, "hc", kind)
    sz_model = _load_class_model(directory, files, "sz", kind)
    return GeneratorModel(
        ica_model,
        kind,
        hc_model,
        sz_model,
        tuple(manifest["class_counts"]),
        tuple(manifest["fit_rows"]),
    )
