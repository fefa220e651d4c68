import numpy as np
import pytest
import scipy.linalg
import torch

from bsdgan.data import LabeledDataset, stratified_split
from bsdgan.evaluate import (
    ALL_MODELS,
    BenchmarkReport,
    FeatureExtractor,
    ModelResult,
    _confusion,
    benchmark,
    fid,
    fid_protocol,
)
from bsdgan.networks import ArchitectureDescriptor, build_autoencoder
from bsdgan.pretrain import fit_latent_prior
from bsdgan.toy import make_toy_dataset


def diagonal_feature_set(mu, variances):
    """2d points per dimension with exact mean mu and diagonal sample covariance."""
    mu = np.asarray(mu, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    d = len(mu)
    n = 2 * d
    points = np.tile(mu, (n, 1))
    for j in range(d):
        spread = np.sqrt(variances[j] * (n - 1) / 2.0)
        points[2 * j, j] += spread
        points[2 * j + 1, j] -= spread
    return points


def fid_diagonal_oracle(mu_a, var_a, mu_b, var_b):
    """Closed form for diagonal covariances, computed per dimension."""
    mu_a, mu_b = np.asarray(mu_a), np.asarray(mu_b)
    var_a, var_b = np.asarray(var_a), np.asarray(var_b)
    mean_term = ((mu_a - mu_b) ** 2).sum()
    cov_term = (var_a + var_b - 2.0 * np.sqrt(var_a * var_b)).sum()
    return float(mean_term + cov_term)


class TestFid:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(40, 6))
        assert fid(a, a.copy()) == pytest.approx(0.0, abs=1e-6)

    def test_one_dimensional_mean_shift(self):
        # unit variances, means 0 and 1 -> 1.0
        a = diagonal_feature_set([0.0], [1.0])
        b = diagonal_feature_set([1.0], [1.0])
        assert fid(a, b) == pytest.approx(1.0, abs=1e-6)

    def test_one_dimensional_variance_gap(self):
        # equal means, variances 1 and 4 -> 1 + 4 - 2*2 = 1.0
        a = diagonal_feature_set([0.0], [1.0])
        b = diagonal_feature_set([0.0], [4.0])
        assert fid(a, b) == pytest.approx(1.0, abs=1e-6)

    def test_diagonal_covariance_matches_per_dimension_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = int(rng.integers(2, 6))
            mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
            var_a = rng.uniform(0.5, 3.0, size=d)
            var_b = rng.uniform(0.5, 3.0, size=d)
            a = diagonal_feature_set(mu_a, var_a)
            b = diagonal_feature_set(mu_b, var_b)
            expected = fid_diagonal_oracle(mu_a, var_a, mu_b, var_b)
            assert fid(a, b) == pytest.approx(expected, abs=1e-6)

    def test_matches_scipy_sqrtm_on_random_sets(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = rng.normal(size=(60, 5))
            b = rng.normal(loc=0.3, scale=1.4, size=(50, 5))
            mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
            cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
            cross = scipy.linalg.sqrtm(cov_a @ cov_b)
            expected = float(
                ((mu_a - mu_b) ** 2).sum()
                + np.trace(cov_a + cov_b - 2.0 * np.real(cross))
            )
            assert fid(a, b) == pytest.approx(expected, rel=1e-8, abs=1e-8)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(30, 4))
        b = rng.normal(loc=1.0, size=(25, 4))
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(30, 4))
        b = rng.normal(size=(20, 4))
        perm_a = a[rng.permutation(len(a))]
        perm_b = b[rng.permutation(len(b))]
        assert fid(a, b) == pytest.approx(fid(perm_a, perm_b), abs=1e-9)

    def test_translation_adds_squared_norm(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(40, 5))
        t = rng.normal(size=5)
        assert fid(a, a + t) == pytest.approx(float((t**2).sum()), abs=1e-6)

    def test_input_validation(self):
        good = np.zeros((3, 2))
        with pytest.raises(ValueError):
            fid(good, np.zeros((3, 3)))
        with pytest.raises(ValueError):
            fid(good[:1], good)
        bad = good.copy()
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            fid(bad, good)


def small_desc(T=16, K=3):
    return ArchitectureDescriptor(
        input_shape=(3, T),
        latent_dim=8,
        conv_blocks=((4, 5, 2), (8, 5, 2)),
        activations=("leaky_relu", "leaky_relu"),
        class_count=K,
    )


class TestFeatureExtractor:
    def test_dim_and_shape(self):
        enc, _ = build_autoencoder(small_desc(), seed=0)
        fx = FeatureExtractor(enc)
        assert fx.dim == 8
        feats = fx.extract(np.random.default_rng(0).normal(size=(5, 3, 16)).astype(np.float32))
        assert feats.shape == (5, 8)

    def test_frozen_and_deterministic(self):
        enc, _ = build_autoencoder(small_desc(), seed=0)
        fx = FeatureExtractor(enc)
        x = np.random.default_rng(1).normal(size=(4, 3, 16)).astype(np.float32)
        before = fx.extract(x)
        np.testing.assert_array_equal(before, fx.extract(x))
        # mutating the source encoder afterwards must not leak into the extractor
        with torch.no_grad():
            for p in enc.parameters():
                p.add_(1.0)
        np.testing.assert_array_equal(fx.extract(x), before)

    def test_matches_manual_trunk_pooling(self):
        enc, _ = build_autoencoder(small_desc(), seed=2)
        fx = FeatureExtractor(enc)
        x = np.random.default_rng(2).normal(size=(3, 3, 16)).astype(np.float32)
        with torch.no_grad():
            manual = enc.blocks(torch.from_numpy(x)).mean(dim=2).numpy()
        np.testing.assert_allclose(fx.extract(x), manual, atol=1e-6)


class TestFidProtocol:
    def _setup(self, seed=0):
        ds = make_toy_dataset((30, 40, 25), length=16, seed=seed)
        train, val, _ = stratified_split(ds, (0.6, 0.3, 0.1), seed=seed)
        enc, dec = build_autoencoder(small_desc(), seed=seed)
        prior = fit_latent_prior(enc, train)
        return train, val, enc, dec, prior

    def test_generated_equals_val_gives_zero(self):
        train, val, enc, dec, prior = self._setup()
        generated = {c: val.values[val.labels == c] for c in range(3)}
        report = fid_protocol(generated, train, val, enc, dec, prior)
        assert len(report.per_class) == 3
        for entry in report.per_class:
            assert entry.generated_vs_val == pytest.approx(0.0, abs=1e-6)

    def test_two_invocations_identical(self):
        train, val, enc, dec, prior = self._setup(seed=1)
        generated = {c: train.values[train.labels == c][:5] for c in range(3)}
        r1 = fid_protocol(generated, train, val, enc, dec, prior)
        r2 = fid_protocol(generated, train, val, enc, dec, prior)
        for a, b in zip(r1.per_class, r2.per_class):
            assert a.generated_vs_val == b.generated_vs_val
            assert a.best_reference == b.best_reference
            assert a.worst_reference == b.worst_reference

    def test_missing_class_skipped_with_note(self):
        train, val, enc, dec, prior = self._setup(seed=2)
        generated = {0: train.values[train.labels == 0][:5]}  # classes 1,2 absent
        report = fid_protocol(generated, train, val, enc, dec, prior)
        assert {c for c, _ in report.skipped} == {1, 2}
        assert [e.class_index for e in report.per_class] == [0]

    def test_report_serializes(self):
        train, val, enc, dec, prior = self._setup(seed=3)
        generated = {c: train.values[train.labels == c][:4] for c in range(3)}
        d = fid_protocol(generated, train, val, enc, dec, prior).to_dict()
        assert d["feature_dim"] == 8
        assert len(d["per_class"]) == 3

    def test_worst_reference_is_decoded_prior(self):
        # an untrained decoder generating from the prior should score worse
        # than real train data (best reference) on every class
        train, val, enc, dec, prior = self._setup(seed=4)
        generated = {c: train.values[train.labels == c][:6] for c in range(3)}
        report = fid_protocol(generated, train, val, enc, dec, prior)
        for entry in report.per_class:
            assert entry.worst_reference > 0.0


class TestBenchmark:
    def _splits(self, counts=(40, 40, 40), seed=0):
        ds = make_toy_dataset(counts, length=16, seed=seed)
        return stratified_split(ds, (0.6, 0.2, 0.2), seed=seed)

    def test_degenerate_single_class_train(self):
        train, val, test = self._splits(seed=1)
        only = train.subset(np.flatnonzero(train.labels == 1))
        report = benchmark(only, val, test, models=("dt",), seed=0)
        recall = report.result("dt").per_class_recall
        assert recall[1] == pytest.approx(1.0)
        assert recall[0] == 0.0 and recall[2] == 0.0

    def test_confusion_matrix_consistency(self):
        y_true = np.array([0, 0, 1, 1, 2, 2, 2])
        y_pred = np.array([0, 1, 1, 1, 2, 0, 2])
        result = ModelResult(model="x", hyperparams={}, confusion=_confusion(y_true, y_pred, 3))
        assert result.accuracy == pytest.approx(5 / 7)
        np.testing.assert_allclose(result.per_class_recall, [0.5, 1.0, 2 / 3])
        assert result.confusion.sum() == 7

    def test_traditional_models_beat_chance_on_toy(self):
        train, val, test = self._splits(seed=2)
        report = benchmark(train, val, test, models=("knn", "rf", "dt"), seed=0)
        for r in report.results:
            assert r.error is None
            assert r.accuracy > 1 / 3, r.model

    def test_cnn_beats_chance_on_toy(self):
        ds = make_toy_dataset((40, 40, 40), length=32, seed=3, noise=0.25)
        train, val, test = stratified_split(ds, (0.6, 0.2, 0.2), seed=3)
        report = benchmark(train, val, test, models=("cnn",), seed=0, deep_epochs=15)
        assert report.result("cnn").accuracy > 1 / 3

    def test_lstm_variants_run(self):
        train, val, test = self._splits(counts=(20, 20, 20), seed=4)
        report = benchmark(train, val, test, models=("lstm", "cnn_lstm"), seed=0, deep_epochs=3)
        for r in report.results:
            assert r.error is None
            assert r.confusion.sum() == len(test)

    def test_synthetic_in_test_split_rejected(self):
        train, val, test = self._splits(seed=5)
        test.synthetic = np.ones(len(test), dtype=bool)
        with pytest.raises(ValueError, match="synthetic"):
            benchmark(train, val, test, models=("dt",))

    def test_unknown_model_rejected(self):
        train, val, test = self._splits(seed=6)
        with pytest.raises(ValueError, match="unknown"):
            benchmark(train, val, test, models=("dt", "svm"))

    def test_failing_model_recorded_not_raised(self):
        train, val, test = self._splits(seed=7)
        empty = LabeledDataset(
            values=np.zeros((0, 3, 16), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_names=train.class_names,
        )
        report = benchmark(empty, val, test, models=("knn", "dt"), seed=0)
        assert all(r.error is not None for r in report.results)

    def test_deterministic_given_seed(self):
        train, val, test = self._splits(seed=8)
        r1 = benchmark(train, val, test, models=("rf", "cnn"), seed=5, deep_epochs=4)
        r2 = benchmark(train, val, test, models=("rf", "cnn"), seed=5, deep_epochs=4)
        for a, b in zip(r1.results, r2.results):
            np.testing.assert_array_equal(a.confusion, b.confusion)

    def test_report_serializes(self):
        train, val, test = self._splits(seed=9)
        d = benchmark(train, val, test, models=("dt",), seed=0).to_dict()
        assert d["variant"] == "imbalanced"
        assert d["results"][0]["model"] == "dt"
        assert len(d["results"][0]["confusion"]) == 3
