"""Frechet-distance quality scoring between real and generated image sets.

The Inception network of the standard metric is replaced by a desk-scale
probe: either the penultimate layer of the defect classifier trained once on
the corpus, or a dependency-free 8x8 average-pool fallback. Scores are
therefore comparable across runs of this artifact but not to published
Inception-based numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamplesError, NumericDegenerateError

EXTRACTORS = ("trained-probe-net", "downsampled-pixels")

_POOL_SIDE = 8
_SYMMETRY_TOL = 1e-8
_PSD_TOL = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    """Gaussian fit of a feature cloud: mean vector, covariance, sample count."""

    mu: np.ndarray
    cov: np.ndarray
    n: int


def _pool_8x8(image: np.ndarray) -> np.ndarray:
    """Adaptive average pool to 8x8 (block means over near-even index splits);
    images smaller than 8 pixels a side pool to their own size."""
    side_h = min(_POOL_SIDE, image.shape[0])
    side_w = min(_POOL_SIDE, image.shape[1])
    h_idx = np.array_split(np.arange(image.shape[0]), side_h)
    w_idx = np.array_split(np.arange(image.shape[1]), side_w)
    out = np.empty((side_h, side_w), dtype=np.float64)
    for i, hs in enumerate(h_idx):
        row = image[hs]
        for j, ws in enumerate(w_idx):
            out[i, j] = row[:, ws].mean()
    return out


def extract_features(images, extractor: str = "downsampled-pixels", probe=None) -> np.ndarray:
    """Map an image set (n, H, W) in [0,1] to an (n, F) feature matrix.

    "downsampled-pixels" flattens an 8x8 average-pooled copy of each image
    (F=64, no dependencies). "trained-probe-net" uses the penultimate layer of
    a trained defect classifier, which must be passed as `probe`.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.size == 0 or images.shape[0] == 0:
        raise ValueError("empty image set")
    if extractor == "downsampled-pixels":
        return np.stack([_pool_8x8(img).ravel() for img in images])
    if extractor == "trained-probe-net":
        if probe is None:
            raise ValueError("trained-probe-net extractor requires a probe model")
        return np.asarray(probe.features(images), dtype=np.float64)
    raise ValueError(f"unknown extractor {extractor!r}; expected one of {EXTRACTORS}")


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Column mean and unbiased sample covariance of an (n, F) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected (n, F) feature matrix, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mu=mu, cov=cov, n=n)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    scale = max(abs(vals[0]), abs(vals[-1]), 1.0)
    if vals[0] < -_PSD_TOL * scale:
        raise NumericDegenerateError(
            f"covariance not PSD beyond tolerance (min eigenvalue {vals[0]:.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """Frechet distance between two Gaussian fits.

    ||mu_r - mu_g||^2 + Tr(C_r + C_g - 2 (C_r C_g)^{1/2}), with the matrix
    square root taken through the symmetric product sqrt(C_r) C_g sqrt(C_r)
    and negative eigenvalues clamped at zero.
    """
    if real.mu.shape != gen.mu.shape or real.cov.shape != gen.cov.shape:
        raise ValueError(
            f"feature dimension mismatch: {real.mu.shape} vs {gen.mu.shape}")
    for cov in (real.cov, gen.cov):
        scale = max(np.abs(cov).max(), 1.0)
        if np.abs(cov - cov.T).max() > _SYMMETRY_TOL * scale:
            raise ValueError("covariance matrix is not symmetric")
    s = _psd_sqrt(real.cov)
    inner = s @ gen.cov @ s
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    scale = max(abs(vals[0]), abs(vals[-1]), 1.0)
    if vals[0] < -_PSD_TOL * scale:
        raise NumericDegenerateError(
            f"cross term not PSD beyond tolerance (min eigenvalue {vals[0]:.3e})")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = real.mu - gen.mu
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)
