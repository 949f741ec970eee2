"""Cross-validated experiment harness: fold construction, AUC scoring,
paired significance testing, phantom ground-truth data, synthetic
pre-training orchestration, and the aggregate report.

The experiment compares, per modality and for the fused pair, MLPs
pre-trained on synthetic batches (one method per generator kind) against
the same architecture trained from random initialization and against
classical baselines. Every stage draws randomness from named sub-streams
of the experiment seed, so reports are bit-identical across runs and
independent of fold execution order.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from scipy.stats import t as t_dist

from .baselines import BaselineKind, baseline_predict_proba, fit_baseline
from .datamodel import LabeledDataset, MultimodalDataset
from .errors import IcasynthError, StratificationError, ValidationError
from .generator import BatchSpec, fit_generator, generator_stream
from .ica import fit_ica
from .mlp import MlpConfig, fine_tune, init_mlp, predict_proba, train_online, transfer_weights
from .numerics import RngStream
from .rvgen import RvGeneratorKind

FUSED_LABEL = "both"


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    """Per-subject fold assignment for k-fold cross-validation."""

    k: int
    assignments: np.ndarray  # (n,) fold index per subject
    stratified: bool

    def __post_init__(self):
        assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.k < 2:
            raise ValidationError("need at least 2 folds")
        if assignments.ndim != 1 or assignments.size < self.k:
            raise ValidationError("assignments must cover at least k subjects")
        if assignments.min() < 0 or assignments.max() >= self.k:
            raise ValidationError("fold indices must lie in [0, k)")
        object.__setattr__(self, "assignments", assignments)

    @property
    def n_subjects(self):
        return self.assignments.size

    def test_indices(self, fold):
        if not 0 <= fold < self.k:
            raise ValidationError(f"fold must lie in [0, {self.k}), got {fold}")
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold):
        if not 0 <= fold < self.k:
            raise ValidationError(f"fold must lie in [0, {self.k}), got {fold}")
        return np.flatnonzero(self.assignments != fold)


def make_folds(labels, k=8, stratified=True, rng=None):
    """Assign subjects to k folds, optionally stratified by class.

    Fold sizes differ by at most one; under stratification the same
    holds per class. Extra subjects from uneven splits always go to the
    currently smallest folds, which keeps the overall sizes balanced.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError("labels must be 1-D")
    n = labels.size
    if k < 2:
        raise ValidationError("need at least 2 folds")
    if k > n:
        raise ValidationError(f"k={k} exceeds the {n} subjects")
    if rng is None:
        rng = RngStream(0)
    assignments = np.empty(n, dtype=np.int64)
    if stratified:
        classes, counts = np.unique(labels, return_counts=True)
        smallest = int(counts.min())
        if k > smallest:
            raise StratificationError(
                f"k={k} exceeds the minority class count {smallest}"
            )
        loads = np.zeros(k, dtype=np.int64)
        for cls in classes:
            members = np.flatnonzero(labels == cls)
            members = members[rng.permutation(members.size)]
            base, extra = divmod(members.size, k)
            # extras go to the least-loaded folds, random tie order
            order = np.lexsort((rng.permutation(k), loads))
            sizes = np.full(k, base, dtype=np.int64)
            sizes[order[:extra]] += 1
            start = 0
            for fold in range(k):
                assignments[members[start : start + sizes[fold]]] = fold
                start += sizes[fold]
            loads += sizes
    else:
        order = rng.permutation(n)
        base, extra = divmod(n, k)
        start = 0
        for fold in range(k):
            size = base + (1 if fold < extra else 0)
            assignments[order[start : start + size]] = fold
            start += size
    return FoldPlan(k, assignments, stratified)


# ---------------------------------------------------------------------------
# scoring


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney statistic.

    Equals (# SZ/HC pairs with score_SZ > score_HC + 0.5 * ties) divided
    by n_SZ * n_HC, computed with tied ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValidationError("scores and labels must be aligned 1-D sequences")
    if not np.isfinite(scores).all():
        raise ValidationError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("both classes must be present to compute AUC")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def significance_test(aucs_a, aucs_b):
    """One-tailed paired t-test p-value for mean(a) > mean(b).

    Uses k-1 degrees of freedom over the fold-paired differences. A
    zero-variance nonzero difference is degenerate: p is 0 or 1 by the
    sign of the shift; identical samples give p = 0.5.
    """
    a = np.asarray(aucs_a, dtype=np.float64)
    b = np.asarray(aucs_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValidationError("paired samples must be 1-D and equal length")
    k = a.size
    if k < 2:
        raise ValidationError("need at least 2 paired values")
    d = a - b
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        if mean == 0.0:
            return 0.5
        return 0.0 if mean > 0.0 else 1.0
    t = mean / (sd / np.sqrt(k))
    return float(t_dist.sf(t, k - 1))


# ---------------------------------------------------------------------------
# phantom ground truth


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic ground-truth dataset.

    Each modality is built as loadings @ sources + noise: sources are
    smooth non-Gaussian patterns with unit variance, loadings are
    standard normal per subject, and SZ subjects get their loading on
    one designated component shifted by that modality's effect size (in
    units of the loading standard deviation). Modalities share subjects
    and labels but carry independent loadings, so their designated
    effects are complementary.
    """

    n_per_class: int = 80
    n_features: tuple = (2000, 2000)
    n_sources: int = 10
    effect_sizes: tuple = (1.0, 1.5)
    effect_components: tuple = (0, 1)
    noise_sigma: float = 1.0

    def __post_init__(self):
        features = self.n_features
        if np.isscalar(features):
            features = (int(features),) * len(self.effect_sizes)
        features = tuple(int(m) for m in features)
        effects = tuple(float(e) for e in self.effect_sizes)
        components = tuple(int(i) for i in self.effect_components)
        if self.n_per_class < 2:
            raise ValidationError("need at least 2 subjects per class")
        if self.n_sources < 1:
            raise ValidationError("need at least 1 source")
        if not features or len(effects) != len(features) or len(components) != len(features):
            raise ValidationError(
                "n_features, effect_sizes and effect_components must have one "
                "entry per modality"
            )
        if any(m < self.n_sources for m in features):
            raise ValidationError("each modality needs n_features >= n_sources")
        if any(e < 0 for e in effects):
            raise ValidationError("effect sizes must be >= 0")
        if any(not 0 <= i < self.n_sources for i in components):
            raise ValidationError("effect components must index a source")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        object.__setattr__(self, "n_features", features)
        object.__setattr__(self, "effect_sizes", effects)
        object.__setattr__(self, "effect_components", components)

    @property
    def n_modalities(self):
        return len(self.n_features)

    @property
    def n_subjects(self):
        return 2 * self.n_per_class


def _phantom_sources(rng, n_sources, m):
    # smooth white noise, then square (sign kept) for non-Gaussianity
    width = max(3, m // 50)
    kernel = np.full(width, 1.0 / width)
    rows = np.empty((n_sources, m))
    for i in range(n_sources):
        smooth = np.convolve(rng.standard_normal((m,)), kernel, mode="same")
        shaped = np.sign(smooth) * smooth**2
        shaped -= shaped.mean()
        rows[i] = shaped / shaped.std()
    return rows


def phantom_generate(spec, rng):
    """Build a multimodal dataset with known class structure."""
    if not isinstance(spec, PhantomSpec):
        raise ValidationError("spec must be a PhantomSpec")
    n = spec.n_subjects
    labels = np.array([0] * spec.n_per_class + [1] * spec.n_per_class)
    subject_ids = tuple(f"s{i:04d}" for i in range(n))
    modalities = []
    names = []
    for j in range(spec.n_modalities):
        mrng = rng.split(f"modality-{j}")
        m = spec.n_features[j]
        sources = _phantom_sources(mrng.split("sources"), spec.n_sources, m)
        loadings = mrng.split("loadings").standard_normal((n, spec.n_sources))
        loadings[labels == 1, spec.effect_components[j]] += spec.effect_sizes[j]
        data = loadings @ sources
        if spec.noise_sigma > 0:
            data = data + spec.noise_sigma * mrng.split("noise").standard_normal((n, m))
        names.append(f"mod{j + 1}")
        modalities.append(LabeledDataset(data, labels, subject_ids))
    return MultimodalDataset(tuple(names), tuple(modalities))


# ---------------------------------------------------------------------------
# pre-training


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine transform fitted on training rows."""

    mean: np.ndarray
    scale: np.ndarray

    def transform(self, x):
        return (x - self.mean) / self.scale


def fit_standardizer(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValidationError("need a non-empty 2-D matrix to standardize")
    return Standardizer(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-9))


@dataclass(frozen=True)
class PretrainingResult:
    """A pre-trained unimodal net plus the generator that fed it."""

    model: object
    generator: object
    trace: object

    @property
    def rv_fit_rows(self):
        # rows whose class-conditional statistics the generator saw
        return self.generator.fit_rows


def run_unimodal_pretraining(dataset, train_indices, *, c, rv_kind, batch_spec,
                             rng, mlp_config=None, transductive=True,
                             ica_model=None, standardizer=None,
                             ica_max_iter=200, ica_tol=1e-4):
    """Fit a generator on one modality's training split and train a
    fresh unimodal MLP on its synthetic batches, single pass.

    In transductive mode the ICA decomposition uses every subject's
    features (never labels); the class-conditional generators only ever
    see `train_indices` rows. Non-transductive mode restricts the whole
    fit to the training split. A provided `standardizer` is applied to
    every synthetic batch before it reaches the network.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.ndim != 1 or train_indices.size < 4:
        raise ValidationError("need a 1-D training index list with >= 4 subjects")
    if transductive:
        gen = fit_generator(dataset, c, rv_kind, rng.split("generator"),
                            max_iter=ica_max_iter, tol=ica_tol,
                            fit_rows=train_indices, ica_model=ica_model)
    else:
        gen = fit_generator(dataset.subset(train_indices), c, rv_kind,
                            rng.split("generator"), max_iter=ica_max_iter,
                            tol=ica_tol, ica_model=ica_model)
    if mlp_config is None:
        mlp_config = MlpConfig.unimodal(dataset.n_features)
    model = init_mlp(mlp_config, rng.split("init"))
    stream = generator_stream(gen, batch_spec, rng.split("stream"))
    if standardizer is not None:
        stream = (
            dataclasses.replace(batch, data=standardizer.transform(batch.data))
            for batch in stream
        )
    model, _, trace = train_online(model, stream, rng=rng.split("train"))
    return PretrainingResult(model, gen, trace)


# ---------------------------------------------------------------------------
# experiment


BASELINE_METHODS = ("logistic_regression", "gaussian_nb", "lda", "knn")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a cross-validated comparison run depends on."""

    c: int = 20
    rv_kinds: tuple = ("mvn", "rejection")
    bins: int = 20
    batch_spec: BatchSpec = BatchSpec(10, 10, 1000)
    folds: int = 8
    stratified: bool = True
    seed: int = 0
    transductive: bool = True
    transfer: str = "full"
    standardize: bool = False
    epochs: int = 1000
    eval_every: int = 100
    val_fraction: float = 0.1
    fine_tune_batch_size: int = 20
    branch_hidden: tuple = (20, 20, 20)
    merged_hidden: tuple = (20,)
    dropout_rate: float = 0.5
    learning_rate: float = 0.001
    ica_max_iter: int = 200
    ica_tol: float = 1e-4
    lr_l2: float = 1.0
    lda_shrinkage: float = 0.5
    knn_k: int = 5
    parallel_folds: int | None = None

    def __post_init__(self):
        kinds = []
        for kind in self.rv_kinds:
            if isinstance(kind, str):
                if kind == "mvn":
                    kind = RvGeneratorKind.mvn()
                elif kind == "rejection":
                    kind = RvGeneratorKind.rejection(bin_count=self.bins)
                else:
                    raise ValidationError(f"unknown generator kind {kind!r}")
            kinds.append(kind)
        if not kinds or len({k.name for k in kinds}) != len(kinds):
            raise ValidationError("rv_kinds must be non-empty and unique")
        if self.c < 1 or self.folds < 2 or self.seed < 0:
            raise ValidationError("c >= 1, folds >= 2 and seed >= 0 required")
        if self.transfer not in ("full", "input-only"):
            raise ValidationError('transfer must be "full" or "input-only"')
        if self.parallel_folds is not None and self.parallel_folds < 1:
            raise ValidationError("parallel_folds must be >= 1 when set")
        object.__setattr__(self, "rv_kinds", tuple(kinds))
        object.__setattr__(self, "branch_hidden", tuple(self.branch_hidden))
        object.__setattr__(self, "merged_hidden", tuple(self.merged_hidden))

    @property
    def method_order(self):
        mlp = tuple(f"mlp-{kind.name}" for kind in self.rv_kinds) + ("mlp-raw",)
        return mlp + BASELINE_METHODS

    def baseline_kind(self, method):
        if method == "logistic_regression":
            return BaselineKind.logistic_regression(l2=self.lr_l2)
        if method == "gaussian_nb":
            return BaselineKind.gaussian_nb()
        if method == "lda":
            return BaselineKind.lda(shrinkage=self.lda_shrinkage)
        if method == "knn":
            return BaselineKind.knn(k=self.knn_k)
        raise ValidationError(f"unknown baseline method {method!r}")


@dataclass(frozen=True)
class ExperimentRow:
    method: str
    modalities: str
    fold: int
    auc: float


@dataclass(frozen=True)
class ExperimentReport:
    """Per-fold AUC entries plus deterministic aggregation helpers."""

    rows: tuple
    method_order: tuple
    modality_order: tuple
    folds: int

    def fold_aucs(self, method, modalities):
        values = [r.auc for r in self.rows
                  if r.method == method and r.modalities == modalities]
        if len(values) != self.folds:
            raise ValidationError(
                f"expected {self.folds} folds for ({method}, {modalities}), "
                f"found {len(values)}"
            )
        return np.array(values)

    def aggregate(self):
        out = []
        for modalities in self.modality_order:
            for method in self.method_order:
                values = self.fold_aucs(method, modalities)
                out.append((method, modalities,
                            float(values.mean()), float(values.std(ddof=1))))
        return out

    def to_csv_text(self):
        lines = ["method,modalities,fold,auc"]
        for row in self.rows:
            lines.append(f"{row.method},{row.modalities},{row.fold},{row.auc!r}")
        return "\n".join(lines) + "\n"

    def to_table_text(self):
        cells = {}
        for method, modalities, mean, std in self.aggregate():
            cells[(method, modalities)] = f"{mean:.3f} ± {std:.3f}"
        name_width = max(len("method"), max(len(m) for m in self.method_order))
        col_width = max(
            max(len(m) for m in self.modality_order),
            max(len(v) for v in cells.values()),
        )
        header = "method".ljust(name_width) + "  " + "  ".join(
            m.rjust(col_width) for m in self.modality_order
        )
        lines = [
            f"AUC mean ± sample standard deviation over {self.folds} folds",
            "",
            header,
        ]
        for method in self.method_order:
            cells_row = "  ".join(
                cells[(method, m)].rjust(col_width) for m in self.modality_order
            )
            lines.append(method.ljust(name_width) + "  " + cells_row)
        return "\n".join(lines) + "\n"


@contextmanager
def _stage(fold, name):
    try:
        yield
    except IcasynthError as exc:
        raise type(exc)(f"fold {fold}, stage {name}: {exc}") from exc


def _fold_rng(seed, fold):
    return RngStream(seed).split(f"fold-{fold}")


def _mlp_scores(model, xs_train, y_train, xs_test, config, rng):
    result = fine_tune(model, xs_train, y_train,
                       val_fraction=config.val_fraction, epochs=config.epochs,
                       eval_every=config.eval_every,
                       batch_size=config.fine_tune_batch_size, rng=rng)
    return predict_proba(result.model, xs_test)


def _run_fold(dataset, plan, fold, config, ica_models):
    rng = _fold_rng(config.seed, fold)
    train_idx = plan.train_indices(fold)
    test_idx = plan.test_indices(fold)
    y_train = dataset.labels[train_idx]
    y_test = dataset.labels[test_idx]
    rows = []

    def record(method, modalities, scores):
        rows.append(ExperimentRow(method, modalities, fold, auc(scores, y_test)))

    scalers = {}
    mlp_train = {}
    mlp_test = {}
    pretrained = {kind.name: {} for kind in config.rv_kinds}
    for name in dataset.names:
        modality = dataset.get(name)
        x_train = modality.data[train_idx]
        x_test = modality.data[test_idx]
        scaler = fit_standardizer(x_train) if config.standardize else None
        scalers[name] = scaler
        mlp_train[name] = scaler.transform(x_train) if scaler else x_train
        mlp_test[name] = scaler.transform(x_test) if scaler else x_test

        if config.transductive:
            fold_ica = ica_models.get(name)
        else:
            # one decomposition of the training split, shared by all kinds
            with _stage(fold, f"ica on {name}"):
                fold_ica = fit_ica(x_train, config.c,
                                   max_iter=config.ica_max_iter,
                                   tol=config.ica_tol,
                                   rng=rng.split(f"ica-{name}"))

        unimodal_cfg = MlpConfig.unimodal(
            modality.n_features, branch_hidden=config.branch_hidden,
            dropout_rate=config.dropout_rate, learning_rate=config.learning_rate)
        for kind in config.rv_kinds:
            method = f"mlp-{kind.name}"
            with _stage(fold, f"{method} pretraining on {name}"):
                pre = run_unimodal_pretraining(
                    modality, train_idx, c=config.c, rv_kind=kind,
                    batch_spec=config.batch_spec,
                    rng=rng.split(f"pretrain-{kind.name}-{name}"),
                    mlp_config=unimodal_cfg, transductive=config.transductive,
                    ica_model=fold_ica, standardizer=scaler,
                    ica_max_iter=config.ica_max_iter, ica_tol=config.ica_tol)
            pretrained[kind.name][name] = pre.model
            with _stage(fold, f"{method} fine-tuning on {name}"):
                record(method, name, _mlp_scores(
                    pre.model, mlp_train[name], y_train, mlp_test[name],
                    config, rng.split(f"tune-{kind.name}-{name}")))
        with _stage(fold, f"mlp-raw training on {name}"):
            raw = init_mlp(unimodal_cfg, rng.split(f"raw-init-{name}"))
            record("mlp-raw", name, _mlp_scores(
                raw, mlp_train[name], y_train, mlp_test[name],
                config, rng.split(f"raw-tune-{name}")))
        for method in BASELINE_METHODS:
            with _stage(fold, f"{method} on {name}"):
                fitted = fit_baseline(config.baseline_kind(method), x_train, y_train)
                record(method, name, baseline_predict_proba(fitted, x_test))

    if len(dataset.names) >= 2:
        dims = tuple(dataset.get(name).n_features for name in dataset.names)
        fused_cfg = MlpConfig.multimodal(
            dims, branch_hidden=config.branch_hidden,
            merged_hidden=config.merged_hidden,
            dropout_rate=config.dropout_rate,
            learning_rate=config.learning_rate)
        xs_train = [mlp_train[name] for name in dataset.names]
        xs_test = [mlp_test[name] for name in dataset.names]
        for kind in config.rv_kinds:
            method = f"mlp-{kind.name}"
            with _stage(fold, f"{method} weight transfer"):
                fused = transfer_weights(
                    [pretrained[kind.name][name] for name in dataset.names],
                    fused_cfg, rng.split(f"transfer-{kind.name}"),
                    mode=config.transfer)
            with _stage(fold, f"{method} fine-tuning on {FUSED_LABEL}"):
                record(method, FUSED_LABEL, _mlp_scores(
                    fused, xs_train, y_train, xs_test, config,
                    rng.split(f"tune-{kind.name}-{FUSED_LABEL}")))
        with _stage(fold, f"mlp-raw training on {FUSED_LABEL}"):
            raw = init_mlp(fused_cfg, rng.split("raw-init-fused"))
            record("mlp-raw", FUSED_LABEL, _mlp_scores(
                raw, xs_train, y_train, xs_test, config,
                rng.split("raw-tune-fused")))
        # baselines see the standardized concatenation of all modalities
        concat_scalers = {
            name: scalers[name] if config.standardize
            else fit_standardizer(dataset.get(name).data[train_idx])
            for name in dataset.names
        }
        concat_train = np.hstack([
            concat_scalers[name].transform(dataset.get(name).data[train_idx])
            for name in dataset.names
        ])
        concat_test = np.hstack([
            concat_scalers[name].transform(dataset.get(name).data[test_idx])
            for name in dataset.names
        ])
        for method in BASELINE_METHODS:
            with _stage(fold, f"{method} on {FUSED_LABEL}"):
                fitted = fit_baseline(config.baseline_kind(method),
                                      concat_train, y_train)
                record(method, FUSED_LABEL, baseline_predict_proba(fitted, concat_test))
    return rows


def _fold_worker(args):
    dataset, plan, fold, config, ica_models = args
    return _run_fold(dataset, plan, fold, config, ica_models)


def run_experiment(dataset, config):
    """Run the full cross-validated comparison and build the report.

    Each fold derives its random stream from (seed, fold index) alone,
    so results do not depend on execution order and `parallel_folds`
    changes wall time only.
    """
    if not isinstance(dataset, MultimodalDataset):
        raise ValidationError("run_experiment needs a MultimodalDataset")
    if not isinstance(config, ExperimentConfig):
        raise ValidationError("config must be an ExperimentConfig")
    root = RngStream(config.seed)
    plan = make_folds(dataset.labels, k=config.folds,
                      stratified=config.stratified, rng=root.split("folds"))
    ica_models = {}
    if config.transductive:
        # one label-blind decomposition per modality, shared by all folds
        for name in dataset.names:
            with _stage("all", f"transductive ica on {name}"):
                ica_models[name] = fit_ica(
                    dataset.get(name).data, config.c,
                    max_iter=config.ica_max_iter, tol=config.ica_tol,
                    rng=root.split(f"ica-{name}"))
    jobs = [(dataset, plan, fold, config, ica_models)
            for fold in range(config.folds)]
    if config.parallel_folds is not None and config.parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=config.parallel_folds) as pool:
            per_fold = list(pool.map(_fold_worker, jobs))
    else:
        per_fold = [_fold_worker(job) for job in jobs]
    modality_order = tuple(dataset.names)
    if len(dataset.names) >= 2:
        modality_order += (FUSED_LABEL,)
    method_rank = {m: i for i, m in enumerate(config.method_order)}
    modality_rank = {m: i for i, m in enumerate(modality_order)}
    rows = sorted(
        (row for rows in per_fold for row in rows),
        key=lambda r: (method_rank[r.method], modality_rank[r.modalities], r.fold),
    )
    return ExperimentReport(tuple(rows), config.method_order, modality_order,
                            config.folds)
