"""Evaluation proxies: Frechet feature distance and background consistency.

The feature extractor is a fixed, seeded, untrained two-layer strided
conv net; its absolute feature values mean nothing, but Frechet
distances between Gaussian fits of its outputs order real/generated
distributions deterministically, with no pretrained weights involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import DataConfig
from .data import BACKGROUND_COLORS, SceneMeta, frames_to_float
from .errors import StatsError

FEATURE_DIM = 32
_HIDDEN = 16


@dataclass(frozen=True)
class GaussianStats:
    """Sample mean and covariance of a feature cloud."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int
    diagonal_fallback: bool = False


def _extractor_weights(feat_seed: int):
    rng = np.random.default_rng(feat_seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(3 * 9), (_HIDDEN, 3, 3, 3))
    b1 = rng.normal(0.0, 0.1, _HIDDEN)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(_HIDDEN * 9), (FEATURE_DIM, _HIDDEN, 3, 3))
    b2 = rng.normal(0.0, 0.1, FEATURE_DIM)
    return w1, b1, w2, b2


def feature_extract(frames, feat_seed: int) -> np.ndarray:
    """[n, 32] features: two stride-2 convs with tanh, global average pool.

    Weights are drawn once from feat_seed and never trained, so identical
    seeds give identical features.
    """
    impl = kernels.active()
    w1, b1, w2, b2 = _extractor_weights(feat_seed)
    rows = []
    for frame in frames:
        frame = np.asarray(frame, dtype=np.float64)
        h = np.tanh(impl.conv2d_fwd(frame, w1, b1, 2, 1))
        h = np.tanh(impl.conv2d_fwd(h, w2, b2, 2, 1))
        rows.append(h.mean(axis=(1, 2)))
    return np.stack(rows)


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance; diagonal fallback when the
    sample is too small for a full-rank fit (n < d + 1)."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < 2:
        raise StatsError(f"fit_gaussian needs at least 2 samples, got {n}")
    mu = features.mean(axis=0)
    centered = features - mu
    if n < d + 1:
        sigma = np.diag((centered * centered).sum(axis=0) / (n - 1))
        return GaussianStats(mu, sigma, n, diagonal_fallback=True)
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu, sigma, n, diagonal_fallback=False)


def _sqrt_psd(mat: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-8:
        raise StatsError(f"{label} is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the cross
    term computed through the symmetric product S_a^(1/2) S_b S_a^(1/2)
    and eigenvalues clipped at zero.
    """
    if a.mu.shape != b.mu.shape:
        raise StatsError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    delta = a.mu - b.mu
    root_a = _sqrt_psd(a.sigma, "first covariance")
    inner = root_a @ b.sigma @ root_a
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigh(inner)[0]
    if vals.min() < -1e-8:
        raise StatsError(f"cross product is not PSD (min eigenvalue {vals.min():.3e})")
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    dist = float(delta @ delta + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    return max(dist, 0.0)


def background_consistency(frames, scene: SceneMeta, cfg: DataConfig) -> float:
    """Fraction of non-character pixels matching the true background.

    Over frames 2..L: pixels outside every character's grid cell count as
    matching when all channels sit within 0.25 (in [-1,1] units) of the
    background colour; the per-frame fractions are averaged.
    """
    bg = frames_to_float(BACKGROUND_COLORS[scene.background])[:, None, None]
    cell = cfg.cell
    scores = []
    for i in range(1, len(frames)):
        frame = np.asarray(frames[i], dtype=np.float64)
        keep = np.ones(frame.shape[1:], dtype=bool)
        for track in scene.characters:
            row, col = track.cells[i]
            keep[row * cell : (row + 1) * cell, col * cell : (col + 1) * cell] = False
        close = (np.abs(frame - bg) <= 0.25).all(axis=0)
        scores.append(float(close[keep].mean()))
    return float(np.mean(scores))
