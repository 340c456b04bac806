"""Probability models for quantized latents.

Two variants share one symbol interface: a per-channel factorized Gaussian
prior, and a mean-scale hyperprior where a small hyper-latent predicts
per-element means and scales. Either way a symbol's probability is the
Gaussian CDF mass on its unit-width integer bin, with the scale floored so
every probability stays strictly positive.

The same models drive both the differentiable rate estimate (training) and
the quantized CDF tables used by the range coder (deployment).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr
from torch import nn

from .errors import ContractViolation

SCALE_FLOOR = 1e-2
CDF_PRECISION = 16  # quantized CDFs sum to 2**16
NUM_SCALE_BINS = 512  # log-spaced, nearest binning keeps the rate gap tiny
NUM_OFFSET_BINS = 32  # fractional-mean offsets within [-0.5, 0.5)
MAX_SCALE = 24.0
MAX_WINDOW = 64  # half-width cap of the coded symbol window per bin

LOG2E = math.log2(math.e)


def quantize(v: torch.Tensor, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """Discretize a continuous latent.

    noise: additive Uniform(-0.5, 0.5), the differentiable rate surrogate.
    round: nearest integer (half-to-even), the inference path.
    round_ste: rounds forward, identity gradient backward.
    """
    if not torch.isfinite(v).all():
        raise ContractViolation("quantize requires finite inputs")
    if mode == "noise":
        u = torch.rand(v.shape, generator=generator, dtype=v.dtype, device=v.device) - 0.5
        return v + u
    if mode == "round":
        return torch.round(v)
    if mode == "round_ste":
        return v + (torch.round(v) - v).detach()
    raise ContractViolation(f"unknown quantize mode: {mode!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return torch.special.ndtr(x)


def gaussian_bits(y: torch.Tensor, means: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Per-element information content -log2 P(y) under unit-bin Gaussian mass.

    ``scales`` must already be floored; the tiny likelihood clamp only guards
    float underflow for symbols many sigmas out.
    """
    upper = _std_normal_cdf((y + 0.5 - means) / scales)
    lower = _std_normal_cdf((y - 0.5 - means) / scales)
    p = (upper - lower).clamp_min(1e-12)
    return -torch.log2(p)


def floored_scale(raw: torch.Tensor) -> torch.Tensor:
    return SCALE_FLOOR + F.softplus(raw)


class FactorizedPrior(nn.Module):
    """Independent per-channel Gaussian over integer symbols."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.loc = nn.Parameter(torch.zeros(channels))
        self.scale_raw = nn.Parameter(torch.full((channels,), 1.0))

    def params_for(self, y: torch.Tensor):
        """Broadcast (means, scales) to the shape of a (B, C, H, W) latent."""
        shape = (1, self.channels, 1, 1)
        means = self.loc.reshape(shape).expand_as(y)
        scales = floored_scale(self.scale_raw).reshape(shape).expand_as(y)
        return means, scales

    def bits(self, y: torch.Tensor) -> torch.Tensor:
        means, scales = self.params_for(y)
        return gaussian_bits(y, means, scales)


class HyperEncoder(nn.Module):
    def __init__(self, latent_channels: int, width: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, stride=1, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, hyper_channels, 3, stride=2, padding=1),
        )

    def forward(self, y):
        return self.net(y)


class HyperDecoder(nn.Module):
    """Maps the quantized hyper-latent to per-element (mean, raw scale)."""

    def __init__(self, latent_channels: int, width: int, hyper_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(hyper_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 2 * latent_channels, 3, padding=1)

    def forward(self, z):
        h = F.leaky_relu(self.conv1(F.interpolate(z, scale_factor=2, mode="nearest")), 0.2)
        h = F.leaky_relu(self.conv2(F.interpolate(h, scale_factor=2, mode="nearest")), 0.2)
        out = self.conv3(h)
        means, scale_raw = out.chunk(2, dim=1)
        return means, floored_scale(scale_raw)


@dataclass
class Conditioned:
    """Everything the rate estimate and the coder need for one forward pass."""

    means: torch.Tensor
    scales: torch.Tensor
    z_hat: torch.Tensor | None
    z_bits: torch.Tensor  # scalar tensor, 0 when no hyper-latent

    def bits(self, y: torch.Tensor) -> torch.Tensor:
        return gaussian_bits(y, self.means, self.scales)


class EntropyModel(nn.Module):
    """Probability model of the latent, optionally hyperprior-conditioned."""

    def __init__(
        self,
        latent_channels: int,
        use_hyperprior: bool = True,
        hyper_channels: int = 16,
        hyper_width: int = 48,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.use_hyperprior = use_hyperprior
        self.hyper_channels = hyper_channels if use_hyperprior else 0
        if use_hyperprior:
            self.hyper_enc = HyperEncoder(latent_channels, hyper_width, hyper_channels)
            self.hyper_dec = HyperDecoder(latent_channels, hyper_width, hyper_channels)
            self.z_prior = FactorizedPrior(hyper_channels)
        else:
            self.y_prior = FactorizedPrior(latent_channels)

    def condition(self, v: torch.Tensor, mode: str, generator=None) -> Conditioned:
        """Prepare symbol parameters from the continuous latent ``v``.

        mode "noise" is the training surrogate; "round" is the coding path.
        """
        if self.use_hyperprior:
            z = self.hyper_enc(v)
            z_hat = quantize(z, mode, generator)
            means, scales = self.hyper_dec(z_hat)
            z_bits = self.z_prior.bits(z_hat).sum()
            return Conditioned(means=means, scales=scales, z_hat=z_hat, z_bits=z_bits)
        means, scales = self.y_prior.params_for(v)
        zero = torch.zeros((), dtype=v.dtype, device=v.device)
        return Conditioned(means=means, scales=scales, z_hat=None, z_bits=zero)

    def condition_from_z(self, z_hat: torch.Tensor, y_shape) -> Conditioned:
        """Decoder-side conditioning: rebuild (means, scales) from a decoded z."""
        if not self.use_hyperprior:
            raise ContractViolation("no hyper-latent in a factorized model")
        means, scales = self.hyper_dec(z_hat)
        z_bits = self.z_prior.bits(z_hat).sum()
        return Conditioned(means=means, scales=scales, z_hat=z_hat, z_bits=z_bits)

    def digest(self) -> int:
        """64-bit identifier of the entropy-model parameters."""
        h = hashlib.blake2b(digest_size=8)
        h.update(f"{self.latent_channels}/{self.hyper_channels}".encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().astype(np.float32, copy=False).tobytes())
        return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# Quantized CDF tables for the range coder.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinTable:
    """Coding table for one (scale, mean-offset) bin.

    Alphabet: symbols 0..2K map to offsets -K..K from the element's integer
    center; symbol 2K+1 is the escape for values outside the window.
    """

    half_width: int
    cdf: tuple  # length 2K+3, cdf[0]=0, cdf[-1]=2**CDF_PRECISION


def scale_bin_values() -> np.ndarray:
    return np.geomspace(SCALE_FLOOR, MAX_SCALE, NUM_SCALE_BINS)


def offset_bin_centers() -> np.ndarray:
    return (np.arange(NUM_OFFSET_BINS) + 0.5) / NUM_OFFSET_BINS - 0.5


_LOG_STEP = math.log(MAX_SCALE / SCALE_FLOOR) / (NUM_SCALE_BINS - 1)


def scales_to_bins(scales: np.ndarray) -> np.ndarray:
    """Nearest bin in log-scale space; clipped to the modeled range."""
    s = np.clip(np.asarray(scales, dtype=np.float64), SCALE_FLOOR, MAX_SCALE)
    idx = np.rint(np.log(s / SCALE_FLOOR) / _LOG_STEP)
    return np.clip(idx, 0, NUM_SCALE_BINS - 1).astype(np.int32)


def means_to_offset_bins(means: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Bin of the fractional mean offset (mean - round(mean)) in [-0.5, 0.5)."""
    frac = np.asarray(means, dtype=np.float64) - centers
    idx = np.floor((frac + 0.5) * NUM_OFFSET_BINS).astype(np.int64)
    return np.clip(idx, 0, NUM_OFFSET_BINS - 1).astype(np.int32)


def _quantize_pmf(pmf: np.ndarray, total: int) -> np.ndarray:
    """Scale a pmf to integer masses summing to ``total`` with minimum mass 1."""
    n = len(pmf)
    if total < n:
        raise ContractViolation("total CDF mass smaller than alphabet")
    raw = pmf * (total - n)
    base = np.floor(raw).astype(np.int64) + 1
    remainder = raw - np.floor(raw)
    deficit = total - int(base.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(n), -remainder))
        base[order[:deficit]] += 1
    return base


class TableCache:
    """Lazy (scale_bin, offset_bin) -> BinTable map.

    Only bins a model actually uses get built; construction is deterministic
    so encoder and decoder always agree.
    """

    def __init__(self, precision: int = CDF_PRECISION):
        self.precision = precision
        self._cache: dict = {}

    def get(self, scale_bin: int, offset_bin: int) -> BinTable:
        key = (scale_bin, offset_bin)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        total = 1 << self.precision
        sigma = float(scale_bin_values()[scale_bin])
        f = float(offset_bin_centers()[offset_bin])
        k = int(min(MAX_WINDOW, max(1, math.ceil(4.0 * sigma))))
        offsets = np.arange(-k, k + 1)
        upper = ndtr((offsets + 0.5 - f) / sigma)
        lower = ndtr((offsets - 0.5 - f) / sigma)
        pmf = upper - lower
        tail = max(
            float(ndtr((-k - 0.5 - f) / sigma) + 1.0 - ndtr((k + 0.5 - f) / sigma)), 0.0
        )
        pmf_full = np.concatenate([pmf, [tail]])
        pmf_full = pmf_full / pmf_full.sum()
        masses = _quantize_pmf(pmf_full, total)
        cdf = np.concatenate([[0], np.cumsum(masses)])
        table = BinTable(half_width=k, cdf=tuple(int(c) for c in cdf))
        self._cache[key] = table
        return table


@lru_cache(maxsize=2)
def coding_tables(precision: int = CDF_PRECISION) -> TableCache:
    return TableCache(precision)


def symbol_grid(values: np.ndarray, means: np.ndarray, scales: np.ndarray):
    """Flatten (values, centers, scale bins, offset bins) for the coder."""
    v = np.asarray(values)
    if not np.all(v == np.round(v)):
        raise ContractViolation("coded latents must be integer-valued")
    means = np.asarray(means, dtype=np.float64)
    centers = np.round(means).astype(np.int64)
    sbins = scales_to_bins(np.asarray(scales, dtype=np.float64))
    obins = means_to_offset_bins(means, centers)
    return (
        v.astype(np.int64).ravel(),
        centers.ravel(),
        sbins.ravel(),
        obins.ravel(),
    )
