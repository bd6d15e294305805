"""Fréchet statistics over extractor features, and sample grids.

The distance here uses this package's own fixed extractor, not Inception-V3,
so values are only comparable between runs that share an extractor
("proxy-FD").
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from casdm.data import to_pixels
from casdm.metricfn import FeatureExtractor, MetricTransform
from casdm.netcore import ad

SYM_TOL = 1e-8
EIG_TOL = 1e-6


@dataclass(frozen=True)
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


def stats_from_features(feats: np.ndarray) -> FrechetStats:
    feats = np.asarray(feats, dtype=np.float64)
    n, d = feats.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {n}")
    if n <= d:
        warnings.warn(f"{n} samples for {d}-dimensional features: covariance is rank-deficient", stacklevel=2)
    mu = feats.mean(axis=0)
    centred = feats - mu
    sigma = centred.T @ centred / (n - 1)
    return FrechetStats(mu=mu, sigma=0.5 * (sigma + sigma.T), n=n)


def pooled_features(
    images: np.ndarray,
    extractor: FeatureExtractor,
    transform: MetricTransform,
    tap: int = -1,
    chunk: int = 256,
) -> np.ndarray:
    """Spatially averaged activations of one tap, shape (n, channels)."""
    out = []
    for i in range(0, len(images), chunk):
        x = np.asarray(images[i : i + chunk], dtype=np.float32)
        feats = extractor.extract(transform(x))
        out.append(ad.global_avg_pool(feats[tap]).data.astype(np.float64))
    return np.concatenate(out, axis=0)


def feature_stats(images, extractor: FeatureExtractor, transform: MetricTransform, tap: int = -1) -> FrechetStats:
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    return stats_from_features(pooled_features(images, extractor, transform, tap))


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; tiny negative eigenvalues clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.size and w.min() < -EIG_TOL * scale:
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3g}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    whose argument is symmetric PSD.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    ra = matrix_sqrt_psd(a.sigma)
    middle = ra @ b.sigma @ ra
    cross = np.trace(matrix_sqrt_psd(0.5 * (middle + middle.T)))
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    if d < 0:
        if d < -EIG_TOL * max(1.0, float(np.trace(a.sigma) + np.trace(b.sigma))):
            raise ArithmeticError(f"Fréchet distance came out negative: {d}")
        d = 0.0
    return d


def proxy_fd(images_a, images_b, extractor: FeatureExtractor, transform: MetricTransform) -> float:
    return frechet_distance(
        feature_stats(images_a, extractor, transform), feature_stats(images_b, extractor, transform)
    )


# ---------------------------------------------------------------------------
# grids

GRID_PAD = 2


def grid_array(images: np.ndarray, cols: int) -> np.ndarray:
    """Tile (n, H, W, C) images row-major with a 2px black frame; returns uint8 (h, w, C)."""
    images = np.asarray(images)
    if images.ndim != 4 or len(images) < 1:
        raise ValueError(f"expected (n, H, W, C) with n >= 1, got {images.shape}")
    n, h, w, c = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    pix = to_pixels(images)
    out = np.zeros((rows * h + (rows + 1) * GRID_PAD, cols * w + (cols + 1) * GRID_PAD, c), dtype=np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        y = GRID_PAD + r * (h + GRID_PAD)
        x = GRID_PAD + k * (w + GRID_PAD)
        out[y : y + h, x : x + w] = pix[i]
    return out


def render_grid(images: np.ndarray, cols: int, path: str | Path) -> Path:
    from PIL import Image

    arr = grid_array(images, cols)
    path = Path(path)
    img = Image.fromarray(arr[..., 0], mode="L") if arr.shape[-1] == 1 else Image.fromarray(arr[..., :3], mode="RGB")
    try:
        img.save(path)
    except OSError as exc:
        raise OSError(f"could not write grid to {path}: {exc}") from exc
    return path
