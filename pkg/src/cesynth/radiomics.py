"""Hand-rolled radiomics features: first-order intensity statistics plus
gray-level co-occurrence texture, in a fixed documented order, for the
Frechet radiomics set metric.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

GLCM_LEVELS = 32
ENTROPY_BINS = 64
GLCM_ANGLES = ((0, 1), (1, 0))  # distance-1 offsets: 0 and 90 degrees
MIN_REGION_PIXELS = 4

FEATURE_NAMES = [
    "mean",
    "std",
    "skewness",
    "kurtosis",
    "entropy",
    "p10",
    "p50",
    "p90",
    "energy",
    "glcm_contrast",
    "glcm_homogeneity",
    "glcm_energy",
    "glcm_correlation",
]


def _first_order(values: np.ndarray) -> list[float]:
    values = values.astype(np.float64)
    mean = values.mean()
    m2 = ((values - mean) ** 2).mean()
    std = np.sqrt(m2)
    if m2 > 0:
        skew = ((values - mean) ** 3).mean() / m2**1.5
        kurt = ((values - mean) ** 4).mean() / m2**2
    else:
        skew = kurt = 0.0
    hist, _ = np.histogram(values, bins=ENTROPY_BINS, range=(0.0, 1.0))
    p = hist / hist.sum()
    p = p[p > 0]
    entropy = float(-(p * np.log2(p)).sum())
    p10, p50, p90 = np.percentile(values, [10, 50, 90])
    energy = float((values**2).mean())
    return [float(mean), float(std), float(skew), float(kurt), entropy, float(p10), float(p50), float(p90), energy]


def glcm_matrix(img: np.ndarray, offset: tuple[int, int], mask: Optional[np.ndarray] = None,
                levels: int = GLCM_LEVELS) -> np.ndarray:
    """Symmetric normalized co-occurrence matrix for one pixel offset.

    Pairs are counted only where both pixels fall inside the mask.
    """
    q = np.minimum((np.clip(img, 0.0, 1.0) * levels).astype(np.int64), levels - 1)
    dr, dc = offset
    h, w = q.shape
    a = q[: h - dr, : w - dc]
    b = q[dr:, dc:]
    if mask is not None:
        m = mask > 0
        keep = m[: h - dr, : w - dc] & m[dr:, dc:]
        a, b = a[keep], b[keep]
    else:
        a, b = a.ravel(), b.ravel()
    counts = np.zeros((levels, levels), dtype=np.float64)
    np.add.at(counts, (a, b), 1.0)
    counts = counts + counts.T  # symmetric accumulation
    total = counts.sum()
    return counts / total if total > 0 else counts


def _glcm_features(p: np.ndarray) -> list[float]:
    levels = p.shape[0]
    i, j = np.meshgrid(np.arange(levels), np.arange(levels), indexing="ij")
    contrast = float((p * (i - j) ** 2).sum())
    homogeneity = float((p / (1.0 + (i - j) ** 2)).sum())
    energy = float(np.sqrt((p**2).sum()))
    pi = p.sum(axis=1)
    mu_i = (np.arange(levels) * pi).sum()
    var_i = ((np.arange(levels) - mu_i) ** 2 * pi).sum()
    pj = p.sum(axis=0)
    mu_j = (np.arange(levels) * pj).sum()
    var_j = ((np.arange(levels) - mu_j) ** 2 * pj).sum()
    if var_i * var_j > 0:
        correlation = float(((i - mu_i) * (j - mu_j) * p).sum() / np.sqrt(var_i * var_j))
    else:
        correlation = 1.0  # degenerate single-level region
    return [contrast, homogeneity, energy, correlation]


def radiomics_features(img: np.ndarray, mask: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """Fixed-order 13-feature vector; None when the region is under 4 pixels.

    Feature order follows FEATURE_NAMES; GLCM terms are averaged over the
    0 and 90 degree distance-1 offsets. Values are raw (z-scoring against a
    reference set happens at Frechet-computation time).
    """
    img = np.asarray(img, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask)
        region = img[mask > 0]
    else:
        region = img.ravel()
    if region.size < MIN_REGION_PIXELS:
        return None
    feats = _first_order(region)
    per_angle = [_glcm_features(glcm_matrix(img, off, mask)) for off in GLCM_ANGLES]
    feats.extend(np.mean(per_angle, axis=0).tolist())
    return np.asarray(feats, dtype=np.float64)
