import numpy as np
import pytest
from scipy import stats

from qudec.data import sample_clean_images
from qudec.niqe import (FEATURE_DIM, PristineModel, block_features, compute_mscn,
                        default_pristine_model, extract_patch_features, fit_aggd,
                        fit_pristine_model, image_block_features, mahalanobis_score, niqe_score,
                        pristine_from_features, regularize, to_luminance)


@pytest.fixture(scope="module")
def pristine():
    return default_pristine_model()


@pytest.fixture(scope="module")
def patches():
    imgs = sample_clean_images(5, 256, seed=11)
    return [im[:, i:i + 128, j:j + 128] for im in imgs for i, j in ((0, 0), (128, 128))]


def test_mscn_constant_image_is_zero():
    assert np.abs(compute_mscn(np.full((32, 32), 127.5)).coefficients).max() < 1e-6


def test_mscn_white_noise_symmetric():
    noise = np.random.default_rng(0).normal(128, 20, (256, 256))
    coeffs = compute_mscn(noise).coefficients.ravel()
    assert abs(stats.skew(coeffs)) < 0.1


def test_mscn_nearly_scale_invariant():
    gray = to_luminance(sample_clean_images(1, 256, seed=2)[0]) * 0.5
    a = compute_mscn(gray)
    b = compute_mscn(2 * gray)
    field_a, field_b = a.coefficients, b.coefficients
    # compare where local contrast dominates the stabilizer
    mu = gray.mean()
    textured = np.abs(field_a) > 0
    assert np.isfinite(mu) and textured.any()
    assert np.median(np.abs(field_a - field_b)) < 0.05


def test_mscn_natural_mean_near_zero():
    for img in sample_clean_images(3, 256, seed=4):
        assert abs(compute_mscn(to_luminance(img)).coefficients.mean()) < 0.1


def test_aggd_gaussian_oracle():
    p = fit_aggd(np.random.default_rng(0).standard_normal(1_000_000))
    assert 1.9 <= p.alpha <= 2.1
    assert 0.95 <= p.left_scale <= 1.05 and 0.95 <= p.right_scale <= 1.05


def test_aggd_laplace_oracle():
    p = fit_aggd(np.random.default_rng(1).laplace(size=1_000_000))
    assert 0.9 <= p.alpha <= 1.1


def test_aggd_symmetric_input():
    x = np.random.default_rng(2).standard_t(5, 5000)
    p = fit_aggd(np.concatenate([x, -x]))
    assert abs(p.left_scale - p.right_scale) / p.left_scale < 0.02


def test_aggd_errors():
    with pytest.raises(ValueError):
        fit_aggd(np.ones(1000))
    with pytest.raises(ValueError):
        fit_aggd(np.random.default_rng(0).standard_normal(50))


def test_patch_features(patches):
    f1 = extract_patch_features(patches[0])
    assert f1.shape == (FEATURE_DIM,) and np.isfinite(f1).all()
    assert np.array_equal(f1, extract_patch_features(patches[0].copy()))
    flat = extract_patch_features(np.full((3, 128, 128), 0.4))
    assert np.isfinite(flat).all()


def test_pristine_matches_brute_force():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(50, FEATURE_DIM)) * rng.uniform(0.5, 3, FEATURE_DIM)
    model = pristine_from_features(feats)
    n, d = feats.shape
    mean = [sum(feats[i, k] for i in range(n)) / n for k in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((feats[i, a] - mean[a]) * (feats[i, b] - mean[b]) for i in range(n)) / (n - 1)
    cov += 1e-6 * np.trace(cov) / d * np.eye(d)
    assert np.allclose(model.mean, mean, rtol=0, atol=1e-9)
    assert np.allclose(model.cov, cov, rtol=0, atol=1e-9)
    assert np.abs(model.cov - model.cov.T).max() < 1e-9
    assert np.linalg.eigvalsh(model.cov).min() >= -1e-9


def test_pristine_repeated_patch_is_pure_regularization():
    feats = np.tile(np.arange(FEATURE_DIM, dtype=float), (40, 1))
    model = pristine_from_features(feats)
    assert np.allclose(model.cov, regularize(np.zeros((FEATURE_DIM, FEATURE_DIM))))
    assert np.count_nonzero(model.cov - np.diag(np.diag(model.cov))) == 0


def test_pristine_fit_errors():
    with pytest.raises(ValueError, match="larger corpus"):
        pristine_from_features(np.zeros((10, FEATURE_DIM)))
    with pytest.raises(ValueError, match="20"):
        fit_pristine_model(sample_clean_images(3, 128))


def test_fit_is_permutation_invariant():
    imgs = [im[:, :192, :192] for im in sample_clean_images(11, 256, seed=1)] * 2
    a = fit_pristine_model(imgs)
    b = fit_pristine_model(imgs[::-1])
    assert np.allclose(a.mean, b.mean, atol=1e-12) and np.allclose(a.cov, b.cov, atol=1e-10)


def test_score_zero_at_pristine_mean(pristine):
    score = mahalanobis_score(pristine.mean, pristine.cov, pristine)
    assert score.value == pytest.approx(0.0, abs=1e-9)
    assert not score.pseudo_inverse


def test_singular_covariance_flags_pinv():
    model = PristineModel(np.zeros(3), np.diag([1.0, 1.0, 0.0]))
    score = mahalanobis_score(np.array([1.0, 0.0, 0.0]), np.diag([1.0, 1.0, 0.0]), model)
    assert score.pseudo_inverse and score.value == pytest.approx(1.0)


def test_noise_monotonicity(pristine, patches):
    rng = np.random.default_rng(0)
    ok = 0
    for p in patches:
        noise = rng.standard_normal(p.shape)
        s = [niqe_score(np.clip(p + sigma * noise, 0, 1), pristine).value for sigma in (0.0, 0.05, 0.1)]
        ok += s[0] <= s[1] <= s[2]
    assert ok >= 8


def test_scores_nonnegative_and_deterministic(pristine, patches):
    a = [niqe_score(p, pristine).value for p in patches[:3]]
    b = [niqe_score(p, pristine).value for p in patches[:3]]
    assert a == b and min(a) >= 0


def test_pristine_file_round_trip(tmp_path, pristine):
    path = tmp_path / "p.json"
    pristine.save(path)
    loaded = PristineModel.load(path)
    assert np.array_equal(loaded.mean, pristine.mean) and np.array_equal(loaded.cov, pristine.cov)
    assert loaded.descriptor == pristine.descriptor and loaded.feature_dim == FEATURE_DIM


def test_block_features_dimension():
    mscn = compute_mscn(np.random.default_rng(0).normal(100, 10, (96, 96))).coefficients
    assert block_features(mscn).shape == (FEATURE_DIM // 2,)
    assert image_block_features(np.random.default_rng(0).normal(100, 10, (192, 192))).shape == (4, FEATURE_DIM)
