"""Distortion and perception metrics.

Perception is proxied by the Fréchet distance between feature statistics of
patch sets; the feature map is pluggable and defaults to the pooled
bottleneck of the segmentation-pretrained discriminator encoder, so nothing
external is downloaded. Scores are therefore comparable within this
toolkit only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation, InsufficientSamplesError

PSNR_CAP_DB = 100.0  # returned instead of infinity when MSE is exactly 0


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractViolation("shape mismatch")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian summary of a feature sample: mean, covariance, count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int


def feature_stats(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ContractViolation("expected (n, d) feature matrix")
    if f.shape[0] < 2:
        raise InsufficientSamplesError("need at least 2 samples for covariance")
    mean = f.mean(axis=0)
    cov = np.cov(f, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FeatureStats(mean=mean, cov=cov, count=f.shape[0])


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negatives clipped."""
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mean.shape != b.mean.shape:
        raise ContractViolation("feature dimension mismatch")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)


def extract_patches(images, patch: int) -> np.ndarray:
    """Non-overlapping patch tiling of each image, stacked to (n, p, p, C)."""
    out = []
    for img in images:
        img = np.asarray(img)
        h, w = img.shape[:2]
        if h < patch or w < patch:
            raise ContractViolation("image smaller than patch size")
        for i in range(h // patch):
            for j in range(w // patch):
                out.append(img[i * patch : (i + 1) * patch, j * patch : (j + 1) * patch])
    return np.stack(out)


def flatten_features(patches: np.ndarray) -> np.ndarray:
    """Identity feature map: raw pixels flattened to vectors."""
    p = np.asarray(patches, dtype=np.float64)
    return p.reshape(p.shape[0], -1)


def disc_feature_fn(disc, pool_to: int = 1):
    """Pooled discriminator-encoder bottleneck as a frozen feature map."""

    def fn(patches: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(
            np.ascontiguousarray(np.asarray(patches, dtype=np.float32).transpose(0, 3, 1, 2))
        )
        with torch.no_grad():
            feats = disc.bottleneck_features(x)
            pooled = torch.nn.functional.adaptive_avg_pool2d(feats, pool_to)
        return pooled.flatten(1).numpy().astype(np.float64)

    return fn


def perception_score(real_images, fake_images, feature_fn, patch: int = 32) -> float:
    """Fréchet distance between patch-feature statistics of two image sets."""
    real_feats = feature_fn(extract_patches(real_images, patch))
    fake_feats = feature_fn(extract_patches(fake_images, patch))
    return frechet_distance(feature_stats(real_feats), feature_stats(fake_feats))


def spectrum(x: np.ndarray) -> np.ndarray:
    """Centered log-magnitude spectrum of a square single-channel plane.

    Normalized to [0, 1] for emission as an image file.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ContractViolation("expected a square single-channel plane")
    mag = np.abs(np.fft.fftshift(np.fft.fft2(x)))
    logmag = np.log1p(mag)
    top = logmag.max()
    if top > 0:
        logmag = logmag / top
    return logmag
