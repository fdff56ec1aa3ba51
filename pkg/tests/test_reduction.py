import numpy as np
import pytest

from src.algorithm.reduction import (apply_2d2pca, apply_pca, fit_2d2pca, fit_pca, fit_refiner, flat_features,
                                     refine, scalarize, scalarize_batch)
from src.core.numeric import make_rng
from src.errors import ShapeError, ValidationError


class TestPca:
    def test_full_rank_preserves_distances(self, rng):
        x = rng.normal(size=(40, 6))
        model = fit_pca(x)
        y = apply_pca(model, x)
        for i, j in [(0, 1), (5, 17), (30, 39)]:
            assert np.isclose(np.linalg.norm(y[i] - y[j]), np.linalg.norm(x[i] - x[j]), atol=1e-9)

    def test_variance_threshold(self, rng):
        x = rng.normal(size=(200, 3)) * np.array([10.0, 1.0, 0.01])
        model = fit_pca(x, variance_threshold=0.95)
        assert model.d == 1
        assert model.retained_variance() >= 0.95

    def test_centred_projection(self, rng):
        x = rng.normal(size=(30, 4)) + 5.0
        y = apply_pca(fit_pca(x, d=2), x)
        assert np.allclose(y.mean(axis=0), 0.0, atol=1e-9)

    def test_argument_errors(self, rng):
        x = rng.normal(size=(10, 3))
        with pytest.raises(ValidationError):
            fit_pca(x, d=4)
        with pytest.raises(ValidationError):
            fit_pca(x, d=1, variance_threshold=0.5)
        with pytest.raises(ValidationError):
            fit_pca(x[:1])
        with pytest.raises(ShapeError):
            apply_pca(fit_pca(x), np.zeros(2))


class TestTwoDPca:
    def test_full_rank_reconstruction(self, rng):
        maps = rng.normal(size=(25, 5, 5))
        model = fit_2d2pca([maps], d=5, r=5)
        entry = model.entries[0]
        projected = apply_2d2pca(model, 0, maps[3])
        assert np.allclose(entry.q @ projected @ entry.w.T, maps[3], atol=1e-9)

    def test_scalarizer_matches_projection(self, rng):
        maps = rng.normal(size=(20, 4, 4, 3))
        model = fit_2d2pca(maps)
        values = scalarize(maps[0], 'twod_pca', model)
        expected = [apply_2d2pca(model, j, maps[0, :, :, j])[0, 0] for j in range(3)]
        assert np.allclose(values, expected)

    def test_scalarizer_needs_rank_one(self, rng):
        maps = rng.normal(size=(10, 4, 4, 2))
        with pytest.raises(ValidationError):
            scalarize_batch(maps, 'twod_pca', fit_2d2pca(maps, d=2, r=1))


def test_max_and_mean_scalarizers():
    p = np.zeros((2, 2, 2))
    p[..., 0] = [[1.0, 2.0], [3.0, 4.0]]
    p[..., 1] = -1.0
    assert scalarize(p, 'max').tolist() == [4.0, -1.0]
    assert scalarize(p, 'mean').tolist() == [2.5, -1.0]
    with pytest.raises(ValidationError):
        scalarize(p, 'median')


class TestRefiners:
    def test_scale_maps_training_range_to_unit(self):
        x = make_rng(0).normal(size=(50, 3))
        out = refine(fit_refiner(x, 'scale'), x)
        assert np.allclose(out.min(axis=0), 0.0) and np.allclose(out.max(axis=0), 1.0)

    def test_standard_zero_mean_unit_std(self):
        x = make_rng(0).normal(size=(50, 3)) * 4.0 + 2.0
        out = refine(fit_refiner(x, 'standard'), x)
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.std(axis=0), 1.0)

    def test_norm_and_none(self):
        x = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 1.0]])
        assert np.allclose(refine(fit_refiner(x, 'norm'), x)[:, 0], [-0.5, 0.0, 0.5])
        assert np.array_equal(refine(fit_refiner(x, 'none'), x), x)

    def test_constant_feature_maps_to_zero(self):
        x = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 1.0]])
        for kind in ('scale', 'standard', 'norm'):
            assert np.all(refine(fit_refiner(x, kind), x)[:, 1] == 0.0)

    def test_rounding_noise_counts_as_constant(self):
        x = np.full((30, 1), 0.1)
        for kind in ('scale', 'standard', 'norm'):
            model = fit_refiner(x, kind)
            assert flat_features(model).tolist() == [True]
            assert np.allclose(refine(model, x), 0.0, atol=1e-15)
            # divisor is 1, so a small deviation is not amplified
            assert abs(refine(model, np.array([0.1 + 1e-12]))[0]) < 1e-11

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            fit_refiner(np.zeros((3, 2)), 'robust')


def test_rank_one_ensemble_recovers_factors():
    rng = make_rng(4)
    u = np.array([1.0, 2.0, -1.0, 0.5])
    w = np.array([0.3, -1.0, 2.0, 1.0])
    maps = rng.normal(size=(30,))[:, None, None] * np.outer(u, w)[None]
    entry = fit_2d2pca([maps]).entries[0]
    assert np.isclose(abs(entry.q[:, 0] @ u) / np.linalg.norm(u), 1.0)
    assert np.isclose(abs(entry.w[:, 0] @ w) / np.linalg.norm(w), 1.0)


def test_norm_refiner_relation():
    x = make_rng(6).normal(size=(40, 3))
    norm = refine(fit_refiner(x, 'norm'), x)
    standard_model = fit_refiner(x, 'standard')
    expected = refine(standard_model, x) * standard_model.v_sigma / (standard_model.v_max - standard_model.v_min)
    assert np.allclose(norm, expected)
