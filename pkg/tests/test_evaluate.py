import numpy as np
import pytest
import scipy.linalg
from PIL import Image

from casdm.evaluate import (
    FrechetStats,
    feature_stats,
    frechet_distance,
    grid_array,
    matrix_sqrt_psd,
    proxy_fd,
    render_grid,
    stats_from_features,
)
from casdm.metricfn import MetricTransform, load_extractor


def random_psd(rng, d, rank=None):
    m = rng.standard_normal((rank or d, d))
    return m.T @ m


def scipy_fd(a, b):
    covmean = scipy.linalg.sqrtm(a.sigma @ b.sigma).real
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma + b.sigma - 2 * covmean))


def test_sqrt_examples():
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 8, 32, 64])
def test_sqrt_reconstruction(d, rng):
    a = random_psd(rng, d)
    b = matrix_sqrt_psd(a)
    assert np.linalg.norm(b @ b - a) / np.linalg.norm(a) < 1e-5
    np.testing.assert_allclose(b, b.T)
    assert np.linalg.eigvalsh(b).min() > -1e-8
    np.testing.assert_allclose(matrix_sqrt_psd(b @ b), b, atol=1e-4 * np.abs(b).max())


def test_sqrt_rank_deficient_and_errors(rng):
    a = random_psd(rng, 6, rank=2)
    b = matrix_sqrt_psd(a)
    assert np.linalg.norm(b @ b - a) / np.linalg.norm(a) < 1e-5
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt_psd(-np.eye(2))


def test_stats_examples(rng):
    img = rng.standard_normal(5)
    s = stats_from_features(np.tile(img, (4, 1)))
    assert np.all(s.sigma == 0) and np.allclose(s.mu, img)
    two = stats_from_features(rng.standard_normal((2, 5)))
    assert np.linalg.matrix_rank(two.sigma) <= 1
    with pytest.raises(ValueError):
        stats_from_features(rng.standard_normal((1, 3)))
    with pytest.warns(UserWarning):
        stats_from_features(rng.standard_normal((3, 5)))


def test_stats_recover_generator(rng):
    d, n = 4, 20000
    mu = np.array([1.0, -2.0, 0.5, 0.0])
    L = rng.standard_normal((d, d)) * 0.5
    cov = L @ L.T + np.eye(d) * 0.1
    x = rng.multivariate_normal(mu, cov, size=n)
    s = stats_from_features(x)
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(s.mu - mu) < 5 * se)
    # entrywise sd of the sample covariance is sqrt((S_ii S_jj + S_ij^2) / n)
    sd = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
    assert np.all(np.abs(s.sigma - cov) < 5 * sd)
    np.testing.assert_allclose(s.sigma, np.cov(x, rowvar=False), rtol=1e-10)


def test_fd_identical_is_zero(rng):
    s = FrechetStats(rng.standard_normal(8), random_psd(rng, 8), 100)
    assert frechet_distance(s, s) < 1e-6


@pytest.mark.parametrize("d,s1,s2", [(4, 1.0, 2.0), (16, 0.3, 0.7), (64, 1.5, 0.5)])
def test_fd_isotropic_closed_form(d, s1, s2):
    a = FrechetStats(np.zeros(d), s1**2 * np.eye(d), 10)
    b = FrechetStats(np.zeros(d), s2**2 * np.eye(d), 10)
    assert frechet_distance(a, b) == pytest.approx(d * (s1 - s2) ** 2, abs=1e-4)


def test_fd_mean_shift_only(rng):
    sig = random_psd(rng, 5)
    m = rng.standard_normal(5)
    a, b = FrechetStats(np.zeros(5), sig, 10), FrechetStats(m, sig, 10)
    assert frechet_distance(a, b) == pytest.approx(m @ m, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fd_matches_scipy_and_is_symmetric(seed):
    r = np.random.default_rng(seed)
    a = FrechetStats(r.standard_normal(10), random_psd(r, 10), 50)
    b = FrechetStats(r.standard_normal(10), random_psd(r, 10), 50)
    d = frechet_distance(a, b)
    assert d == pytest.approx(scipy_fd(a, b), rel=1e-6)
    assert d == pytest.approx(frechet_distance(b, a), rel=1e-9)
    assert d >= 0


def test_fd_monotone_in_shift(rng):
    d = 6
    m = rng.standard_normal(d)
    ref = FrechetStats(np.zeros(d), np.eye(d), 10)
    vals = [frechet_distance(ref, FrechetStats(t * m, np.eye(d), 10)) for t in np.linspace(0, 2, 9)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_fd_dim_mismatch():
    with pytest.raises(ValueError):
        frechet_distance(FrechetStats(np.zeros(2), np.eye(2), 3), FrechetStats(np.zeros(3), np.eye(3), 3))


def test_proxy_fd_discriminates(rng):
    e, tr = load_extractor("lpips_avgpool", 1), MetricTransform()
    a = rng.uniform(-1, 1, (300, 8, 8, 1)).astype(np.float32)
    b = rng.uniform(-1, 1, (300, 8, 8, 1)).astype(np.float32)
    c = np.clip(rng.standard_normal((300, 8, 8, 1)) * 0.1 + 0.8, -1, 1).astype(np.float32)
    same = proxy_fd(a, b, e, tr)
    diff = proxy_fd(a, c, e, tr)
    assert diff > 10 * same
    assert feature_stats(a, e, tr).dim == 64


def test_grid_layout():
    imgs = np.stack([np.full((3, 3, 1), v) for v in (-1.0, 1.0, 0.0, 1.0)])
    g = grid_array(imgs, cols=2)
    assert g.shape == (2 * 3 + 3 * 2, 2 * 3 + 3 * 2, 1)
    assert g[2, 2, 0] == 0 and g[2, 7, 0] == 255 and g[7, 2, 0] == 128
    assert g[0, :, 0].max() == 0  # frame
    one = grid_array(imgs[:1], cols=4)
    assert one.shape == (7, 7, 1)


def test_render_grid_png(tmp_path, rng):
    p = render_grid(rng.uniform(-1, 1, (5, 4, 4, 3)), 3, tmp_path / "g.png")
    with Image.open(p) as im:
        assert im.mode == "RGB" and im.size == (3 * 4 + 4 * 2, 2 * 4 + 3 * 2)
    with pytest.raises(OSError) as exc:
        render_grid(np.zeros((1, 2, 2, 1)), 1, tmp_path / "nodir" / "g.png")
    assert "nodir" in str(exc.value)
