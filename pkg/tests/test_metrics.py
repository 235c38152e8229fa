import math

import numpy as np
import pytest

from mangagen.errors import ConfigError, DataError
from mangagen.metrics import (
    FeatureSet,
    StubFeatureExtractor,
    build_extractor,
    clip_i,
    features_from_dir,
    frechet_distance,
    frechet_from_moments,
)


def _set(features, tag="stub"):
    return FeatureSet(features=np.asarray(features, dtype=np.float64), extractor_id=tag)


class TestFrechet:
    def test_identical_sets_are_zero(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(50, 8))
        a, b = _set(feats), _set(feats.copy())
        assert abs(frechet_distance(a, b)) < 1e-6

    def test_unit_gaussians_one_apart(self):
        rng = np.random.default_rng(1)
        a = _set(rng.normal(0.0, 1.0, size=(100_000, 1)))
        b = _set(rng.normal(1.0, 1.0, size=(100_000, 1)))
        d = frechet_distance(a, b)
        assert abs(d - 1.0) < 0.05

    def test_injected_moments_diagonal_case(self):
        d_feat = 6
        mu = np.zeros(d_feat)
        got = frechet_from_moments(mu, np.eye(d_feat), mu, 4.0 * np.eye(d_feat))
        # Tr(I + 4I - 2 * 2I) = Tr(I) = d_feat
        assert math.isclose(got, d_feat, rel_tol=1e-9)

    def test_symmetry_and_zero_iff_matching_moments(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mu_a, mu_b = rng.normal(size=4), rng.normal(size=4)
            ra = rng.normal(size=(4, 4))
            rb = rng.normal(size=(4, 4))
            cov_a, cov_b = ra @ ra.T + np.eye(4), rb @ rb.T + np.eye(4)
            ab = frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
            ba = frechet_from_moments(mu_b, cov_b, mu_a, cov_a)
            assert math.isclose(ab, ba, rel_tol=1e-7, abs_tol=1e-8)
            assert ab > 0
            assert abs(frechet_from_moments(mu_a, cov_a, mu_a, cov_a)) < 1e-9

    def test_feature_scaling_scales_quadratically(self):
        rng = np.random.default_rng(3)
        feats_a = rng.normal(size=(200, 5))
        feats_b = rng.normal(1.0, 2.0, size=(200, 5))
        base = frechet_distance(_set(feats_a), _set(feats_b))
        scaled = frechet_distance(_set(3.0 * feats_a), _set(3.0 * feats_b))
        assert math.isclose(scaled, 9.0 * base, rel_tol=1e-8)

    def test_small_sets_rejected(self):
        with pytest.raises(DataError):
            frechet_distance(_set([[1.0, 2.0]]), _set([[1.0, 2.0], [3.0, 4.0]]))

    def test_extractor_mismatch_rejected(self):
        a = _set(np.zeros((3, 2)), tag="stub")
        b = _set(np.zeros((3, 2)), tag="other")
        with pytest.raises(DataError, match="extractor"):
            frechet_distance(a, b)

    def test_deep_negative_eigenvalue_is_an_error(self):
        mu = np.zeros(2)
        bad = np.array([[1.0, 0.0], [0.0, -0.5]])  # not a covariance
        with pytest.raises(DataError, match="eigenvalue"):
            frechet_from_moments(mu, bad, mu, np.eye(2))

    def test_tiny_negative_eigenvalue_is_clamped(self):
        mu = np.zeros(2)
        nearly = np.array([[1.0, 0.0], [0.0, -1e-9]])
        got = frechet_from_moments(mu, nearly, mu, nearly)
        assert abs(got) < 1e-6


class TestClipI:
    def test_identical_features_give_one(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(10, 6))
        assert math.isclose(clip_i(_set(feats), _set(feats.copy())), 1.0, rel_tol=1e-12)

    def test_orthogonal_pairs_give_zero(self):
        gen = _set([[1.0, 0.0], [0.0, 1.0]])
        ref = _set([[0.0, 1.0], [1.0, 0.0]])
        assert clip_i(gen, ref) == 0.0

    def test_hand_computed_cosine(self):
        gen = _set([[1.0, 0.0, 0.0]])
        ref = _set([[1.0 / 2**0.5, 1.0 / 2**0.5, 0.0]])
        assert math.isclose(clip_i(gen, ref), 1.0 / 2**0.5, rel_tol=1e-9)

    def test_positive_rescaling_invariance(self):
        rng = np.random.default_rng(5)
        gen = rng.normal(size=(8, 4))
        ref = rng.normal(size=(8, 4))
        base = clip_i(_set(gen), _set(ref))
        scales = rng.uniform(0.1, 10.0, size=(8, 1))
        assert math.isclose(clip_i(_set(gen * scales), _set(ref)), base, rel_tol=1e-9)

    def test_zero_vector_named(self):
        gen = _set([[0.0, 0.0], [1.0, 0.0]])
        ref = _set([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DataError, match=r"gen\[0\]"):
            clip_i(gen, ref)

    def test_count_mismatch_rejected(self):
        with pytest.raises(DataError, match="size"):
            clip_i(_set(np.ones((3, 2))), _set(np.ones((2, 2))))


class TestStubExtractor:
    def test_feature_shape_and_determinism(self):
        rng = np.random.default_rng(6)
        images = [rng.uniform(size=(33, 21, 3)), rng.uniform(size=(64, 48, 3))]
        ext = StubFeatureExtractor()
        a = ext.extract(images)
        b = ext.extract(images)
        assert a.features.shape == (2, 64)
        assert (a.features == b.features).all()
        assert a.extractor_id == "stub"

    def test_flat_image_maps_to_constant_feature(self):
        ext = StubFeatureExtractor()
        white = np.ones((16, 16, 3))
        feats = ext.extract([white]).features
        assert np.allclose(feats, 1.0)

    def test_directory_extraction_sorted(self, tmp_path):
        from mangagen.panels import save_image

        for name, level in [("b.png", 128 / 255), ("a.png", 0.0)]:
            save_image(tmp_path / name, np.full((16, 16, 3), level, dtype=np.float32))
        feats = features_from_dir(StubFeatureExtractor(), tmp_path).features
        assert np.allclose(feats[0], 0.0)  # a.png first
        assert np.allclose(feats[1], 128 / 255)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            features_from_dir(StubFeatureExtractor(), tmp_path)

    def test_unknown_extractor_rejected(self):
        with pytest.raises(ConfigError):
            build_extractor("inception-v3")
