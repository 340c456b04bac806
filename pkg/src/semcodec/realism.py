"""Decode-time realism control via output residual prediction.

A small head predicts, from the GAN generator's penultimate features, the
reconstruction the error-optimized decoder would have produced. The
difference between that prediction and the GAN output is a residual whose
weight can be dialed at decode time: alpha = 1 keeps the GAN output
bit-exactly, alpha = 0 yields the predicted error-optimized output, and the
path between them is affine. Image- and weight-space interpolation between
two trained generators are provided as baselines.
"""

from __future__ import annotations

import torch
from torch import nn

from .codec import Generator, ResBlock
from .errors import ContractViolation


class ResidualHead(nn.Module):
    """Predicts the error-optimized decode from GAN-generator features.

    Sized to a few percent of the generator it rides on; the only trainable
    component during realism fine-tuning.
    """

    def __init__(self, feature_channels: int, width: int = 12):
        super().__init__()
        self.reduce = nn.Conv2d(feature_channels, width, 1)
        self.block = ResBlock(width)
        self.out = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h = self.reduce(features)
        h = self.block(h)
        return self.out(h)


def realism_output(
    g2_out: torch.Tensor,
    features: torch.Tensor,
    head: ResidualHead,
    alpha: float,
) -> torch.Tensor:
    """Blend the GAN output with the predicted error-optimized output.

    Short-circuits at the endpoints: alpha = 1 returns ``g2_out`` without
    evaluating the head (bit-exact), alpha = 0 returns the head's
    prediction exactly.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ContractViolation("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return g2_out
    mse_pred = head(features)
    if alpha == 0.0:
        return mse_pred
    residual = mse_pred - g2_out
    return g2_out + (1.0 - alpha) * residual


def image_interpolate(x1: torch.Tensor, x2: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex combination of two decodes: (1 - alpha) * x1 + alpha * x2."""
    if x1.shape != x2.shape:
        raise ContractViolation("shape mismatch")
    if alpha == 0.0:
        return x1
    if alpha == 1.0:
        return x2
    return (1.0 - alpha) * x1 + alpha * x2


def weight_interpolate(theta1: dict, theta2: dict, alpha: float) -> dict:
    """Per-parameter convex combination of two structurally equal models."""
    if set(theta1) != set(theta2):
        raise ContractViolation("parameter sets differ in structure")
    out = {}
    for name, a in theta1.items():
        b = theta2[name]
        if a.shape != b.shape:
            raise ContractViolation(f"shape mismatch for {name}")
        if alpha == 0.0:
            out[name] = a.clone()
        elif alpha == 1.0:
            out[name] = b.clone()
        else:
            out[name] = (1.0 - alpha) * a + alpha * b
    return out


def interpolated_generator(g1: Generator, g2: Generator, alpha: float) -> Generator:
    """A fresh generator loaded with interpolated weights."""
    theta = weight_interpolate(g1.state_dict(), g2.state_dict(), alpha)
    g = Generator(g1.cfg)
    g.load_state_dict(theta)
    return g


DEFAULT_ALPHA_GRID = (0.0, 0.17, 0.33, 0.5, 0.67, 0.83, 1.0)
