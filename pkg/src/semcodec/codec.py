"""Analysis/synthesis transforms and the rate-distortion objective.

The encoder downsamples an image to a continuous latent; the generator is
its convolutional mirror. Two generator instances play different roles in
the training schedule: one optimized for reconstruction error only, one
fine-tuned adversarially. The generator exposes its penultimate feature
field so a retrofit residual head can be attached later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .entropy import EntropyModel, quantize  # noqa: F401  (quantize re-exported)
from .errors import ConfigError, ContractViolation


@dataclass
class CodecConfig:
    latent_channels: int = 32
    downsample_factor: int = 8
    base_width: int = 64
    lam: float = 1.0  # rate weight, > 0
    use_hyperprior: bool = True
    hyper_channels: int = 16
    hyper_width: int = 48

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigError("downsample_factor must be a power of two >= 2")
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if self.latent_channels < 1 or self.base_width < 1:
            raise ConfigError("channel counts must be >= 1")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = self.conv2(h)
        return x + h


class Encoder(nn.Module):
    """Strided-convolutional analysis transform, image -> continuous latent."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        layers: list[nn.Module] = []
        in_ch = 3
        for stage in range(cfg.num_stages):
            layers.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            layers.append(ResBlock(w))
            in_ch = w
        layers.append(nn.Conv2d(w, cfg.latent_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ContractViolation("expected (B, 3, H, W) input")
        f = self.cfg.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ContractViolation(f"input spatial dims must be multiples of {f}; pad first")
        return self.net(x)


class Generator(nn.Module):
    """Upsampling synthesis transform, latent -> image.

    ``forward`` optionally returns the penultimate full-resolution feature
    field consumed by the residual head.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        self.head = nn.Conv2d(cfg.latent_channels, w, 3, padding=1)
        blocks = []
        for stage in range(cfg.num_stages):
            blocks.append(ResBlock(w))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(w, 3, 3, padding=1)

    @property
    def feature_channels(self) -> int:
        return self.cfg.base_width

    def forward(self, y: torch.Tensor, return_features: bool = False):
        if y.dim() != 4 or y.shape[1] != self.cfg.latent_channels:
            raise ContractViolation(
                f"expected (B, {self.cfg.latent_channels}, h, w) latent, got {tuple(y.shape)}"
            )
        h = F.leaky_relu(self.head(y), 0.2)
        for block in self.blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h)
        x = self.to_rgb(h)
        if return_features:
            return x, h
        return x


def synthesize(y: torch.Tensor, generator: Generator, clamp: bool = True) -> torch.Tensor:
    """Decode a latent; clamps to [0, 1] for inference, never for training."""
    x = generator(y)
    return x.clamp(0.0, 1.0) if clamp else x


def rate_bits(y: torch.Tensor, model) -> torch.Tensor:
    """Total information content of a latent under ``model`` in bits.

    ``model`` is anything with a ``bits(y)`` method returning per-element
    bits (an EntropyModel prior or a Conditioned parameter bundle).
    """
    return model.bits(y).sum()


def rd_loss(x, x_hat, y_surrogate, model, lam: float, distortion_fn) -> torch.Tensor:
    """Rate-distortion objective: lam * bits-per-pixel + distortion."""
    num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    bpp = rate_bits(y_surrogate, model) / num_pixels
    return lam * bpp + distortion_fn(x, x_hat)


def build_codec(cfg: CodecConfig, seed: int | None = None):
    """Construct (encoder, generator, entropy model) with seeded init."""
    if seed is not None:
        torch.manual_seed(seed)
    encoder = Encoder(cfg)
    generator = Generator(cfg)
    entropy_model = EntropyModel(
        latent_channels=cfg.latent_channels,
        use_hyperprior=cfg.use_hyperprior,
        hyper_channels=cfg.hyper_channels,
        hyper_width=cfg.hyper_width,
    )
    return encoder, generator, entropy_model
