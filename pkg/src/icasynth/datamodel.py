"""Dataset containers, portable matrix/label file I/O, and the
correlation-based subject quality-control filter.

Matrices are numpy 2-D float64 arrays. Two on-disk matrix layouts are
supported: headerless CSV with one subject per row, and the binary
"MAT1" layout (4 magic bytes, u32 rows, u32 cols, row-major float64
payload, all little-endian). Labels travel in a separate CSV with
header ``subject_id,label`` and tokens HC or SZ; internally HC maps to
0 and SZ to 1, with SZ as the positive class.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ParseError, ValidationError

LABEL_HC = 0
LABEL_SZ = 1
LABEL_TOKENS = {"HC": LABEL_HC, "SZ": LABEL_SZ}
LABEL_NAMES = {LABEL_HC: "HC", LABEL_SZ: "SZ"}

MATRIX_FORMATS = ("csv", "bin")
_MAGIC = b"MAT1"


def _as_matrix(x, what="matrix"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"{what} must be 2-D, got ndim={x.ndim}")
    if x.size and not np.isfinite(x).all():
        r, c = np.argwhere(~np.isfinite(x))[0]
        raise ValidationError(f"{what} has a non-finite value at row {r + 1}, column {c + 1}")
    return x


def load_matrix(path, format="csv"):
    """Read a matrix from `path` in the given format ("csv" or "bin")."""
    if format == "csv":
        x = _load_csv_matrix(path)
    elif format == "bin":
        x = _load_bin_matrix(path)
    else:
        raise ValidationError(f"unknown matrix format {format!r}; expected one of {MATRIX_FORMATS}")
    return _as_matrix(x, what=str(path))


def save_matrix(matrix, path, format="csv"):
    """Write a matrix to `path`. Binary round trips are bit-exact; CSV
    uses shortest round-trip decimal representation (exact for float64).
    """
    m = _as_matrix(matrix)
    if format == "csv":
        lines = [",".join(repr(v) for v in row) for row in m.tolist()]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines))
            if lines:
                fh.write("\n")
    elif format == "bin":
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
    else:
        raise ValidationError(f"unknown matrix format {format!r}; expected one of {MATRIX_FORMATS}")


def _load_csv_matrix(path):
    rows = []
    ncols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise ParseError(
                    f"{path}: line {lineno}: expected {ncols} values, found {len(parts)}"
                )
            row = []
            for field, token in enumerate(parts, start=1):
                try:
                    row.append(float(token))
                except ValueError as exc:
                    raise ParseError(
                        f"{path}: line {lineno}, field {field}: "
                        f"cannot parse {token.strip()!r} as a number"
                    ) from exc
            rows.append(row)
    if not rows:
        return np.empty((0, 0), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def _load_bin_matrix(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ParseError(f"{path}: truncated header at byte {len(blob)}; need 12 header bytes")
    if blob[:4] != _MAGIC:
        raise ParseError(f"{path}: bad magic at byte 0: {blob[:4]!r}, expected {_MAGIC!r}")
    nrows, ncols = struct.unpack_from("<II", blob, 4)
    expected = 12 + nrows * ncols * 8
    if len(blob) != expected:
        raise ParseError(
            f"{path}: payload mismatch at byte {min(len(blob), expected)}: "
            f"file has {len(blob)} bytes, header implies {expected}"
        )
    values = np.frombuffer(blob, dtype="<f8", count=nrows * ncols, offset=12)
    return values.reshape(nrows, ncols).astype(np.float64, copy=True)


def load_labels(path):
    """Read a labels CSV. Returns (subject_ids, labels) with labels as
    an int array of 0 (HC) / 1 (SZ) in file order.
    """
    ids = []
    labels = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "label"]:
            raise ParseError(f"{path}: line 1: expected header 'subject_id,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}: line {lineno}: expected 2 fields, found {len(row)}")
            sid, token = row[0].strip(), row[1].strip()
            if not sid:
                raise ValidationError(f"{path}: line {lineno}: empty subject_id")
            if token not in LABEL_TOKENS:
                raise ValidationError(
                    f"{path}: line {lineno}: unknown label {token!r}; expected HC or SZ"
                )
            if sid in ids:
                raise ValidationError(f"{path}: line {lineno}: duplicate subject_id {sid!r}")
            ids.append(sid)
            labels.append(LABEL_TOKENS[token])
    return ids, np.asarray(labels, dtype=np.int64)


def save_labels(subject_ids, labels, path):
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject_id,label\n")
        for sid, lab in zip(subject_ids, labels):
            fh.write(f"{sid},{LABEL_NAMES[int(lab)]}\n")


@dataclass(frozen=True)
class LabeledDataset:
    """A subject-by-feature matrix with per-subject class labels."""

    data: np.ndarray
    labels: np.ndarray
    subject_ids: tuple

    def __post_init__(self):
        data = _as_matrix(self.data, what="data")
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = tuple(str(s) for s in self.subject_ids)
        if labels.ndim != 1:
            raise ValidationError("labels must be a 1-D sequence")
        if not (len(labels) == data.shape[0] == len(ids)):
            raise AlignmentError(
                f"row counts disagree: data has {data.shape[0]} rows, "
                f"{len(labels)} labels, {len(ids)} subject ids"
            )
        bad = set(np.unique(labels)) - {LABEL_HC, LABEL_SZ}
        if bad:
            raise ValidationError(f"labels must be 0 (HC) or 1 (SZ); found {sorted(bad)}")
        if len(set(ids)) != len(ids):
            raise ValidationError("subject_ids contain duplicates")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n_subjects(self):
        return self.data.shape[0]

    @property
    def n_features(self):
        return self.data.shape[1]

    def class_indices(self, label):
        return np.where(self.labels == int(label))[0]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            self.data[rows],
            self.labels[rows],
            tuple(self.subject_ids[i] for i in rows),
        )


@dataclass(frozen=True)
class MultimodalDataset:
    """Ordered, named modalities over one shared subject roster."""

    names: tuple
    modalities: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        mods = tuple(self.modalities)
        if not names or len(names) != len(mods):
            raise ValidationError("need one name per modality, at least one modality")
        if len(set(names)) != len(names):
            raise ValidationError("modality names must be unique")
        first = mods[0]
        for name, mod in zip(names[1:], mods[1:]):
            if mod.subject_ids != first.subject_ids:
                raise AlignmentError(
                    f"modality {name!r} has different subject ids than {names[0]!r}"
                )
            if not np.array_equal(mod.labels, first.labels):
                raise AlignmentError(f"modality {name!r} has different labels than {names[0]!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "modalities", mods)

    @property
    def labels(self):
        return self.modalities[0].labels

    @property
    def subject_ids(self):
        return self.modalities[0].subject_ids

    @property
    def n_subjects(self):
        return self.modalities[0].n_subjects

    def __len__(self):
        return len(self.modalities)

    def get(self, name):
        try:
            return self.modalities[self.names.index(name)]
        except ValueError:
            raise ValidationError(f"no modality named {name!r}; have {list(self.names)}") from None

    def items(self):
        return list(zip(self.names, self.modalities))

    def subset(self, rows):
        return MultimodalDataset(self.names, tuple(m.subset(rows) for m in self.modalities))


def load_labeled_dataset(data_path, labels_path, format="csv", expected_ids=None):
    """Load a data matrix and its labels file into a LabeledDataset.

    Rows follow the data file order; the labels file is assumed to list
    subjects in that same order. When `expected_ids` is given (e.g. the
    roster of a previously loaded modality) the labels file is checked
    against it and reordered to match, and any missing or unknown
    subject ids are reported by name.
    """
    data = load_matrix(data_path, format)
    ids, labels = load_labels(labels_path)
    if expected_ids is not None:
        expected = [str(s) for s in expected_ids]
        have = {sid: k for k, sid in enumerate(ids)}
        missing = [s for s in expected if s not in have]
        if missing:
            raise AlignmentError(
                f"{labels_path}: missing subject ids: {', '.join(missing)}"
            )
        unknown = [s for s in ids if s not in set(expected)]
        if unknown:
            raise AlignmentError(
                f"{labels_path}: unexpected subject ids: {', '.join(unknown)}"
            )
        order = [have[s] for s in expected]
        ids = expected
        labels = labels[order]
    if len(ids) != data.shape[0]:
        raise AlignmentError(
            f"{labels_path} lists {len(ids)} subjects but {data_path} has "
            f"{data.shape[0]} rows"
        )
    return LabeledDataset(data, labels, tuple(ids))


def load_multimodal_dataset(entries, format="csv"):
    """Load several (name, data_path, labels_path) modalities sharing
    one subject roster. The first modality fixes the subject order.
    """
    entries = list(entries)
    if not entries:
        raise ValidationError("need at least one modality entry")
    names = []
    mods = []
    roster = None
    for name, data_path, labels_path in entries:
        ds = load_labeled_dataset(data_path, labels_path, format, expected_ids=roster)
        if roster is None:
            roster = ds.subject_ids
        names.append(name)
        mods.append(ds)
    return MultimodalDataset(tuple(names), tuple(mods))


@dataclass(frozen=True)
class QualityReport:
    """Outcome of the mean-pairwise-correlation subject filter."""

    mean_correlation: np.ndarray
    threshold: float
    kept: tuple
    discarded: tuple


def quality_control(data, sigmas=2.0):
    """Flag subjects whose mean correlation with all other subjects is
    more than `sigmas` population standard deviations below the mean.

    Discarding uses a strict less-than against the threshold, so when
    the spread of mean correlations is zero nothing is discarded.
    """
    x = _as_matrix(data, what="data")
    n = x.shape[0]
    if n < 3:
        raise ValidationError(f"quality control needs at least 3 subjects, got {n}")
    row_std = x.std(axis=1)
    zero = np.where(row_std == 0.0)[0]
    if zero.size:
        raise ValidationError(
            f"row {zero[0] + 1} has zero variance; correlation is undefined"
        )
    corr = np.corrcoef(x)
    np.fill_diagonal(corr, 0.0)
    mean_corr = corr.sum(axis=1) / (n - 1)
    mu = float(mean_corr.mean())
    sd = float(mean_corr.std())
    if sd == 0.0:
        threshold = mu
        discarded = np.empty(0, dtype=np.int64)
    else:
        threshold = mu - float(sigmas) * sd
        discarded = np.where(mean_corr < threshold)[0]
    kept = np.setdiff1d(np.arange(n), discarded)
    return QualityReport(mean_corr, float(threshold), tuple(kept.tolist()), tuple(discarded.tolist()))
