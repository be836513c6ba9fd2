"""Evaluation metrics: Fréchet-distance proxy, mode coverage, artifact scan.

The Fréchet proxy fits Gaussian moments to feature vectors (identity features
for 2D point data, a frozen random dense projection for images) and compares
them in closed form. It is a relative score across methods on the same data,
not a claim of comparability with published Inception-based numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Array
from .losses import LossBreakdown

PSD_CLAMP = 1e-9
PSD_ERROR = 1e-6

FeatureMap = Callable[[Array], Array]


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation snapshot.

    mode_coverage/high_quality_fraction are 0.0 for datasets without known
    mode centers; artifact_fraction is 0.0 when no patch size applies.
    """

    step: int
    frechet: float
    mode_coverage: float
    high_quality_fraction: float
    artifact_fraction: float
    losses: LossBreakdown


def identity_features(x: Array) -> Array:
    return np.asarray(x, dtype=np.float64)


def random_feature_map(input_dim: int, out_dim: int = 16,
                       hidden: int = 64, seed: int = 0) -> FeatureMap:
    """Frozen two-layer random projection: tanh(x W1 + b1) W2.

    Weights are drawn once from the fixed seed, so the map is identical
    across runs and processes.
    """
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((input_dim, hidden)) / np.sqrt(input_dim)
    b1 = rng.standard_normal(hidden) * 0.1
    w2 = rng.standard_normal((hidden, out_dim)) / np.sqrt(hidden)

    def apply(x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        return np.tanh(x @ w1 + b1) @ w2

    return apply


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and symmetric covariance of a feature distribution."""

    mu: Array
    sigma: Array

    def __post_init__(self):
        if self.mu.ndim != 1 or self.sigma.shape != (len(self.mu),) * 2:
            raise ValueError(
                f"moments shapes {self.mu.shape}/{self.sigma.shape}")


def fit_moments(samples: Array,
                features: Optional[FeatureMap] = None) -> GaussianMoments:
    """Sample mean and unbiased covariance of the mapped samples."""
    feats = (features or identity_features)(samples)
    feats = np.asarray(feats, dtype=np.float64)
    n, d = feats.shape
    if n < d + 1:
        raise ValueError(
            f"fit_moments: need at least d+1={d + 1} samples, got {n}")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianMoments(mu=mu, sigma=sigma)


def _psd_sqrt(matrix: Array, context: str) -> Array:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below -PSD_ERROR raise; small negatives from roundoff are
    clamped to zero.
    """
    vals, vecs = np.linalg.eigh(matrix)
    if vals.min() < -PSD_ERROR:
        raise ValueError(
            f"{context}: eigenvalue {vals.min():.3e} violates PSD")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(p: GaussianMoments, q: GaussianMoments,
                     eps: float = 0.0) -> float:
    """Fréchet distance between Gaussians in moment form.

    ||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p S_q)^{1/2}), with the cross
    square root computed as sqrt(S_p^{1/2) S_q S_p^{1/2}) so the matrix stays
    symmetric. ``eps`` adds eps*I to both covariances first (the evaluation
    pipeline uses 1e-6; the default keeps closed-form cases exact).
    """
    if p.mu.shape != q.mu.shape:
        raise ValueError(
            f"frechet_distance: dims {p.mu.shape} vs {q.mu.shape}")
    d = len(p.mu)
    sp = p.sigma + eps * np.eye(d) if eps else p.sigma
    sq = q.sigma + eps * np.eye(d) if eps else q.sigma
    root_p = _psd_sqrt(sp, "frechet_distance: first covariance")
    inner = root_p @ sq @ root_p
    inner = 0.5 * (inner + inner.T)
    cross = _psd_sqrt(inner, "frechet_distance: cross product")
    diff = p.mu - q.mu
    value = float(diff @ diff + np.trace(sp) + np.trace(sq)
                  - 2.0 * np.trace(cross))
    return max(value, 0.0)


def mode_coverage(samples: Array, centers: Array,
                  capture_radius: float) -> Tuple[float, float]:
    """(fraction of centers hit, fraction of samples near any center)."""
    if capture_radius <= 0:
        raise ValueError("capture_radius must be > 0")
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    dists = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    within = dists <= capture_radius
    coverage = float(within.any(axis=0).mean())
    high_quality = float(within.any(axis=1).mean())
    return coverage, high_quality


def artifact_patch_fraction(images: Array, patch: int, value: float = 0.0,
                            tol: float = 0.25) -> float:
    """Fraction of images containing a patch x patch square of near-constant
    ``value`` pixels (all channels within tol), via an exhaustive scan."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(
            f"artifact_patch_fraction: expected (n, h, w, c), got "
            f"{images.shape}")
    n, h, w, _ = images.shape
    p = int(patch)
    if not 0 < p <= min(h, w):
        raise ValueError(f"patch {p} outside (0, {min(h, w)}]")
    near = np.all(np.abs(images - value) <= tol, axis=3).astype(np.int64)
    # Integral image per sample; window sum == p*p marks an all-near patch.
    integral = np.zeros((n, h + 1, w + 1), dtype=np.int64)
    integral[:, 1:, 1:] = near.cumsum(axis=1).cumsum(axis=2)
    window = (integral[:, p:, p:] - integral[:, :-p, p:]
              - integral[:, p:, :-p] + integral[:, :-p, :-p])
    hits = (window == p * p).any(axis=(1, 2))
    return float(hits.mean())
