"""Mask overlap, Hausdorff distance, MSE/SSIM and Frechet distance."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.linalg import eigvalsh
from scipy.spatial.distance import directed_hausdorff
from skimage.metrics import structural_similarity
from sklearn.covariance import LedoitWolf

from ..errors import ConfigError

log = logging.getLogger(__name__)


class SmallSampleWarning(UserWarning):
    pass


def _pixels(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "pixels", mask)).astype(bool)


def _pair(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ConfigError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """``2|a&b| / (|a|+|b|)``; two empty masks score 1."""
    a, b = _pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance in pixels between foreground sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    a, b = _pair(a, b)
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float(np.hypot(*a.shape))
    return float(max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0]))


def _unit_float(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    img = img.astype(np.float64)
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ConfigError("float images must lie in [0, 1]")
    return img


def _images(i1, i2):
    a, b = _unit_float(i1), _unit_float(i2)
    if a.shape != b.shape:
        raise ConfigError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_pct(i1, i2) -> float:
    """Mean squared error on [0, 1] pixels, times 100."""
    a, b = _images(i1, i2)
    return float(np.mean((a - b) ** 2) * 100.0)


def ssim_pct(i1, i2) -> float:
    """Gaussian-window SSIM (sigma 1.5, 11x11 support) times 100."""
    a, b = _images(i1, i2)
    channel_axis = -1 if a.ndim == 3 else None
    val = structural_similarity(
        a, b, data_range=1.0, channel_axis=channel_axis,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    )
    return float(val * 100.0)


def _sqrtm_trace(s1: np.ndarray, s2: np.ndarray) -> float:
    # tr sqrt(S1 S2) = sum sqrt(eig(sqrt(S1) S2 sqrt(S1))), both PSD
    w, v = np.linalg.eigh(s1)
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    ev = eigvalsh(root @ s2 @ root)
    return float(np.sqrt(np.clip(ev, 0, None)).sum())


def gaussian_fit(feats: np.ndarray, shrinkage: bool = True) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ConfigError(f"need a 2-D feature array with >= 2 rows, got shape {feats.shape}")
    n, d = feats.shape
    mu = feats.mean(0)
    if n < 2 * d:
        if not shrinkage:
            raise ConfigError(f"{n} samples for {d}-dim features; need >= {2 * d} or enable shrinkage")
        warnings.warn(
            f"{n} samples < 2 x {d} feature dims; using Ledoit-Wolf covariance shrinkage",
            SmallSampleWarning, stacklevel=3,
        )
        cov = LedoitWolf().fit(feats).covariance_
    else:
        cov = np.cov(feats, rowvar=False, bias=True)
    return mu, cov


def frechet_distance(feats_a, feats_b, shrinkage: bool = True) -> float:
    mu_a, cov_a = gaussian_fit(feats_a, shrinkage)
    mu_b, cov_b = gaussian_fit(feats_b, shrinkage)
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _sqrtm_trace(cov_a, cov_b)
    return float(max(val, 0.0))


def fid(set_a, set_b, extractor, shrinkage: bool = True) -> float:
    """Frechet distance between Gaussian fits of ``extractor`` features."""
    return frechet_distance(extractor(set_a), extractor(set_b), shrinkage)
