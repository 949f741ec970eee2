"""Tests for fold construction, scoring, phantom data, and the
cross-validated experiment harness."""

import dataclasses

import numpy as np
import pytest

from icasynth.baselines import BaselineKind, baseline_predict_proba, fit_baseline
from icasynth.errors import StratificationError, ValidationError
from icasynth.generator import BatchSpec
from icasynth.mlp import predict_proba
from icasynth.numerics import RngStream
from icasynth.pipeline import (
    ExperimentConfig,
    PhantomSpec,
    auc,
    fit_standardizer,
    make_folds,
    phantom_generate,
    run_experiment,
    run_unimodal_pretraining,
    significance_test,
)
from icasynth.rvgen import RvGeneratorKind


def brute_force_auc(scores, labels):
    """All-pairs concordance count: greater pairs + half credit for ties."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestMakeFolds:
    """k-fold assignment balance and stratification."""

    def test_one_subject_per_fold(self):
        plan = make_folds(np.array([0, 1] * 4), k=8, stratified=False, rng=RngStream(0))
        assert sorted(plan.test_indices(f).size for f in range(8)) == [1] * 8

    def test_304_subjects_8_folds_gives_38_per_fold(self):
        labels = np.array([0] * 152 + [1] * 152)
        plan = make_folds(labels, k=8, rng=RngStream(1))
        assert all(plan.test_indices(f).size == 38 for f in range(8))

    def test_stratified_counts_exact(self):
        labels = np.array([0] * 20 + [1] * 12)
        plan = make_folds(labels, k=4, rng=RngStream(2))
        for f in range(4):
            test = labels[plan.test_indices(f)]
            assert (test == 0).sum() == 5
            assert (test == 1).sum() == 3

    def test_every_subject_in_exactly_one_fold(self):
        rng = RngStream(3)
        labels = np.array([0] * 17 + [1] * 14)
        plan = make_folds(labels, k=5, rng=rng)
        all_test = np.concatenate([plan.test_indices(f) for f in range(5)])
        assert np.array_equal(np.sort(all_test), np.arange(31))
        for f in range(5):
            combined = np.concatenate([plan.train_indices(f), plan.test_indices(f)])
            assert np.array_equal(np.sort(combined), np.arange(31))

    def test_fold_sizes_differ_by_at_most_one(self):
        base = np.random.default_rng(4)
        for trial in range(20):
            n = int(base.integers(10, 60))
            labels = base.integers(0, 2, size=n)
            while min((labels == 0).sum(), (labels == 1).sum()) < 2:
                labels = base.integers(0, 2, size=n)
            k = int(base.integers(2, min((labels == 0).sum(), (labels == 1).sum()) + 1))
            for stratified in (False, True):
                plan = make_folds(labels, k=k, stratified=stratified,
                                  rng=RngStream(trial))
                sizes = [plan.test_indices(f).size for f in range(k)]
                assert max(sizes) - min(sizes) <= 1
                if stratified:
                    for cls in (0, 1):
                        per = [(labels[plan.test_indices(f)] == cls).sum()
                               for f in range(k)]
                        assert max(per) - min(per) <= 1

    def test_k_exceeding_minority_class_rejected(self):
        labels = np.array([0] * 10 + [1] * 3)
        with pytest.raises(StratificationError):
            make_folds(labels, k=4, rng=RngStream(0))

    def test_k_bounds_rejected(self):
        with pytest.raises(ValidationError):
            make_folds(np.array([0, 1, 0, 1]), k=1)
        with pytest.raises(ValidationError):
            make_folds(np.array([0, 1, 0, 1]), k=5, stratified=False)

    def test_deterministic_under_seed(self):
        labels = np.array([0] * 30 + [1] * 26)
        a = make_folds(labels, k=7, rng=RngStream(9))
        b = make_folds(labels, k=7, rng=RngStream(9))
        assert np.array_equal(a.assignments, b.assignments)

    def test_different_seeds_differ(self):
        labels = np.array([0] * 30 + [1] * 26)
        a = make_folds(labels, k=7, rng=RngStream(9))
        b = make_folds(labels, k=7, rng=RngStream(10))
        assert not np.array_equal(a.assignments, b.assignments)


class TestAuc:
    """Mann-Whitney AUC with tie handling."""

    def test_documented_example(self):
        assert auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == 0.75

    def test_perfect_separation(self):
        assert auc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0
        assert auc(np.array([0.8, 0.9, 0.1, 0.2]), np.array([0, 0, 1, 1])) == 0.0

    def test_all_tied_scores_give_half(self):
        assert auc(np.full(6, 0.3), np.array([0, 1, 0, 1, 0, 1])) == 0.5

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            n = int(rng.integers(2, 31))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1  # force both classes
            scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
            assert auc(scores, labels) == brute_force_auc(scores, labels)

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(size=25)
        labels = rng.integers(0, 2, size=25)
        labels[:2] = [0, 1]
        base = auc(scores, labels)
        assert auc(2.0 * scores + 1.0, labels) == base
        assert auc(np.exp(scores), labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            auc(np.array([0.2, 0.4]), np.array([1, 1]))

    def test_non_finite_scores_rejected(self):
        with pytest.raises(ValidationError):
            auc(np.array([0.2, np.nan]), np.array([0, 1]))


class TestSignificanceTest:
    """One-tailed paired t-test over fold AUC differences."""

    def test_identical_samples_give_half(self):
        assert significance_test(np.ones(4), np.ones(4)) == 0.5

    def test_constant_shift_is_degenerate(self):
        base = np.array([0.5, 0.6, 0.7])
        assert significance_test(base + 1.0, base) == 0.0
        assert significance_test(base, base + 1.0) == 1.0

    def test_hand_sized_example_matches_t_table(self):
        # differences with mean 1.5075 and sd 1.5811 give t = 2.1318,
        # the 95th percentile of t with 4 degrees of freedom
        b = np.full(5, 0.5)
        a = b + 1.5075 + np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        assert significance_test(a, b) == pytest.approx(0.05, abs=1e-3)

    def test_complementary_directions(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(size=8)
        b = rng.uniform(size=8)
        assert significance_test(a, b) + significance_test(b, a) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValidationError):
            significance_test(np.ones(1), np.ones(1))
        with pytest.raises(ValidationError):
            significance_test(np.ones(3), np.ones(4))


def small_phantom(seed=11, effect=2.0, noise=1.0, n_per_class=20, m=150, sources=5):
    spec = PhantomSpec(n_per_class=n_per_class, n_features=(m, m),
                       n_sources=sources, effect_sizes=(effect, effect),
                       effect_components=(0, 1), noise_sigma=noise)
    return phantom_generate(spec, RngStream(seed))


def permutation_null_sigma(scores, labels, n_perm=1000, seed=0):
    """Standard deviation of AUC under label permutation."""
    rng = np.random.default_rng(seed)
    values = [auc(scores, rng.permutation(labels)) for _ in range(n_perm)]
    return float(np.std(values))


class TestPhantom:
    """Ground-truth synthetic dataset construction."""

    def test_shapes_and_labels(self):
        ds = small_phantom()
        assert ds.names == ("mod1", "mod2")
        assert ds.get("mod1").data.shape == (40, 150)
        assert list(ds.labels) == [0] * 20 + [1] * 20
        assert ds.subject_ids[0] == "s0000"
        assert ds.subject_ids[-1] == "s0039"

    def test_modalities_share_roster(self):
        ds = small_phantom()
        assert ds.get("mod1").subject_ids == ds.get("mod2").subject_ids
        assert np.array_equal(ds.get("mod1").labels, ds.get("mod2").labels)

    def test_fixed_seed_bit_identical(self):
        a = small_phantom(seed=3)
        b = small_phantom(seed=3)
        for name in a.names:
            assert np.array_equal(a.get(name).data, b.get(name).data)

    def test_zero_effect_gives_chance_level_auc(self):
        ds = small_phantom(seed=5, effect=0.0, n_per_class=40)
        labels = ds.labels.astype(float)
        train = np.r_[0:20, 40:60]
        test = np.r_[20:40, 60:80]
        x = ds.get("mod1").data
        model = fit_baseline(BaselineKind.lda(), x[train], labels[train])
        scores = baseline_predict_proba(model, x[test])
        sigma = permutation_null_sigma(scores, ds.labels[test])
        assert abs(auc(scores, ds.labels[test]) - 0.5) < 3.0 * sigma

    def test_large_effect_no_noise_separates(self):
        ds = small_phantom(seed=7, effect=3.0, noise=0.0, n_per_class=40)
        labels = ds.labels.astype(float)
        train = np.r_[0:20, 40:60]
        test = np.r_[20:40, 60:80]
        x = ds.get("mod2").data
        model = fit_baseline(BaselineKind.lda(), x[train], labels[train])
        assert auc(baseline_predict_proba(model, x[test]), ds.labels[test]) > 0.95

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValidationError):
            PhantomSpec(n_features=(5, 5), n_sources=10)
        with pytest.raises(ValidationError):
            PhantomSpec(effect_sizes=(-1.0, 1.0))
        with pytest.raises(ValidationError):
            PhantomSpec(effect_components=(0, 10))
        with pytest.raises(ValidationError):
            PhantomSpec(noise_sigma=-0.5)
        with pytest.raises(ValidationError):
            PhantomSpec(n_features=(100,), effect_sizes=(1.0, 1.5))


class TestPretraining:
    """Generator-fed unimodal pre-training."""

    def test_exact_step_count_and_single_pass(self):
        ds = small_phantom()
        train = np.arange(30)
        pre = run_unimodal_pretraining(
            ds.get("mod1"), train, c=5, rv_kind=RvGeneratorKind.mvn(),
            batch_spec=BatchSpec(10, 10, 100), rng=RngStream(21))
        assert pre.trace.n_steps == 100
        assert pre.trace.batch_indices == tuple(range(100))

    def test_identical_seeds_identical_weights(self):
        ds = small_phantom()
        train = np.arange(30)
        runs = [
            run_unimodal_pretraining(
                ds.get("mod1"), train, c=5, rv_kind=RvGeneratorKind.rejection(),
                batch_spec=BatchSpec(10, 10, 50), rng=RngStream(8))
            for _ in range(2)
        ]
        a, b = runs
        for branch_a, branch_b in zip(a.model.branches, b.model.branches):
            for la, lb in zip(branch_a, branch_b):
                assert np.array_equal(la.weights, lb.weights)
                assert np.array_equal(la.biases, lb.biases)
        for la, lb in zip(a.model.head, b.model.head):
            assert np.array_equal(la.weights, lb.weights)

    def test_class_models_never_see_heldout_rows(self):
        ds = small_phantom()
        train = np.r_[0:15, 20:35]
        held_out = np.r_[15:20, 35:40]
        pre = run_unimodal_pretraining(
            ds.get("mod1"), train, c=5, rv_kind=RvGeneratorKind.mvn(),
            batch_spec=BatchSpec(5, 5, 20), rng=RngStream(4))
        assert not set(pre.rv_fit_rows) & set(held_out.tolist())
        assert set(pre.rv_fit_rows) == set(train.tolist())

    def test_pretrained_net_beats_permutation_null(self):
        ds = small_phantom(seed=11, effect=2.0, n_per_class=60)
        labels = ds.labels
        train = np.r_[0:30, 60:90]
        test = np.r_[30:60, 90:120]
        mod = ds.get("mod1")
        scaler = fit_standardizer(mod.data[train])
        pre = run_unimodal_pretraining(
            mod, train, c=5, rv_kind=RvGeneratorKind.mvn(),
            batch_spec=BatchSpec(10, 10, 800), rng=RngStream(21),
            standardizer=scaler)
        scores = predict_proba(pre.model, scaler.transform(mod.data[test]))
        sigma = permutation_null_sigma(scores, labels[test])
        assert auc(scores, labels[test]) > 0.5 + 3.0 * sigma

    def test_non_transductive_mode_runs(self):
        ds = small_phantom()
        train = np.arange(30)
        pre = run_unimodal_pretraining(
            ds.get("mod1"), train, c=4, rv_kind=RvGeneratorKind.mvn(),
            batch_spec=BatchSpec(5, 5, 10), rng=RngStream(2), transductive=False)
        assert pre.generator.ica.mixing.shape[0] == 30


def tiny_config(**overrides):
    base = dict(c=4, batch_spec=BatchSpec(5, 5, 50), folds=4, seed=9,
                epochs=60, eval_every=20, knn_k=3)
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    spec = PhantomSpec(n_per_class=16, n_features=(120, 120), n_sources=4,
                       effect_sizes=(1.5, 1.5), effect_components=(0, 1),
                       noise_sigma=1.0)
    ds = phantom_generate(spec, RngStream(2))
    return ds, tiny_config(), run_experiment(ds, tiny_config())


class TestRunExperiment:
    """Cross-validated comparison harness."""

    def test_report_rows_complete(self, tiny_run):
        _, config, report = tiny_run
        assert report.method_order == (
            "mlp-mvn", "mlp-rejection", "mlp-raw",
            "logistic_regression", "gaussian_nb", "lda", "knn")
        assert report.modality_order == ("mod1", "mod2", "both")
        assert len(report.rows) == 7 * 3 * 4
        seen = {(r.method, r.modalities, r.fold) for r in report.rows}
        assert len(seen) == len(report.rows)
        for row in report.rows:
            assert 0.0 <= row.auc <= 1.0

    def test_every_aggregate_backed_by_k_folds(self, tiny_run):
        _, config, report = tiny_run
        for method in report.method_order:
            for modalities in report.modality_order:
                assert report.fold_aucs(method, modalities).size == config.folds

    def test_aggregate_recomputable_from_rows(self, tiny_run):
        _, _, report = tiny_run
        for method, modalities, mean, std in report.aggregate():
            values = np.array([r.auc for r in report.rows
                               if r.method == method and r.modalities == modalities])
            assert mean == values.mean()
            assert std == values.std(ddof=1)

    def test_csv_round_trips(self, tiny_run):
        _, _, report = tiny_run
        text = report.to_csv_text()
        lines = text.strip().split("\n")
        assert lines[0] == "method,modalities,fold,auc"
        assert len(lines) == 1 + len(report.rows)
        for line, row in zip(lines[1:], report.rows):
            method, modalities, fold, value = line.split(",")
            assert (method, modalities, int(fold)) == (row.method, row.modalities, row.fold)
            assert float(value) == row.auc

    def test_table_text_lists_all_methods(self, tiny_run):
        _, _, report = tiny_run
        table = report.to_table_text()
        assert "sample standard deviation over 4 folds" in table
        for method in report.method_order:
            assert method in table
        for modalities in report.modality_order:
            assert modalities in table

    def test_repeat_run_byte_identical(self, tiny_run):
        ds, config, report = tiny_run
        again = run_experiment(ds, config)
        assert again.to_csv_text() == report.to_csv_text()

    def test_parallel_folds_match_sequential(self, tiny_run):
        ds, config, report = tiny_run
        parallel = run_experiment(ds, dataclasses.replace(config, parallel_folds=2))
        assert parallel.to_csv_text() == report.to_csv_text()

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(rv_kinds=("mvn", "mvn"))
        with pytest.raises(ValidationError):
            ExperimentConfig(rv_kinds=("gaussian",))
        with pytest.raises(ValidationError):
            ExperimentConfig(transfer="partial")
        with pytest.raises(ValidationError):
            ExperimentConfig(folds=1)
        with pytest.raises(ValidationError):
            ExperimentConfig(parallel_folds=0)

    def test_error_names_fold_and_stage(self):
        spec = PhantomSpec(n_per_class=8, n_features=(40, 40), n_sources=3,
                           effect_sizes=(1.0, 1.0), effect_components=(0, 1),
                           noise_sigma=1.0)
        ds = phantom_generate(spec, RngStream(1))
        # c exceeds what a 12-subject training split can support
        config = tiny_config(c=12, folds=4)
        with pytest.raises(ValidationError) as excinfo:
            run_experiment(ds, dataclasses.replace(config, transductive=False))
        assert "fold 0" in str(excinfo.value)
        assert "stage" in str(excinfo.value)
