"""Training objectives: distortion, adversarial terms, and regularizers.

All losses are mean-reduced over pixels and batch so their weights stay
comparable across image sizes. Label maps use classes {1..N}; the fake
class of the segmentation discriminator is N+1 (the last logit channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation
from .util import rng_for

SMALL_COMPONENT_AREA = 64 * 64  # components strictly smaller get weight 3
SMALL_COMPONENT_WEIGHT = 3.0
DEFAULT_MIX_COEF = 10.0


@dataclass
class LossWeights:
    """Scalar weights of the combined objective."""

    k_m: float = 100.0  # squared-error weight inside the distortion term
    k_p: float = 1.0  # perceptual-distance weight inside the distortion term
    beta: float = 0.30  # adversarial weight in the generator objective
    mix_coef: float = DEFAULT_MIX_COEF  # consistency regularizer coefficient
    lam: float = 1.0  # rate weight

    def validate(self):
        for name in ("k_m", "k_p", "beta", "mix_coef", "lam"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ContractViolation("shape mismatch")
    return ((x - x_hat) ** 2).mean()


class RandomConvFeatures(nn.Module):
    """Frozen random 3-layer conv stack used as the default perceptual space.

    A stand-in for pretrained perceptual features: fixed seed, never trained,
    distance is the mean squared feature difference across layers.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        torch.manual_seed(seed)
        layers = []
        in_ch = 3
        for w in widths:
            layers.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            in_ch = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        feats = []
        h = x
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, x, x_hat):
        fa = self.features(x)
        fb = self.features(x_hat)
        return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb)) / len(fa)


def distortion(x, x_hat, k_m: float, k_p: float, perceptual_fn=None) -> torch.Tensor:
    """Full-reference distortion: k_m * MSE + k_p * perceptual distance."""
    d = k_m * mse(x, x_hat)
    if k_p != 0.0:
        if perceptual_fn is None:
            raise ContractViolation("k_p != 0 requires a perceptual_fn")
        d = d + k_p * perceptual_fn(x, x_hat)
    return d


def _label_components(labels: np.ndarray):
    """Yield (class_value, component_mask) under 4-connectivity."""
    labels = np.asarray(labels)
    for cls in np.unique(labels):
        comp, n = ndi.label(labels == cls)
        for i in range(1, n + 1):
            yield int(cls), comp == i


def pixel_weights(labels) -> np.ndarray:
    """Per-pixel loss weights emphasizing small same-class components."""
    labels = np.asarray(labels)
    w = np.ones(labels.shape, dtype=np.float32)
    for _cls, mask in _label_components(labels):
        if mask.sum() < SMALL_COMPONENT_AREA:
            w[mask] = SMALL_COMPONENT_WEIGHT
    return w


def _check_labels(labels: torch.Tensor, num_real_classes: int):
    if labels.min() < 1 or labels.max() > num_real_classes:
        raise ContractViolation(
            f"labels must lie in 1..{num_real_classes}, got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def weighted_ce(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor | None,
    target: str,
) -> torch.Tensor:
    """Per-pixel cross entropy over the N+1 segmentation classes.

    target="real": weighted CE against the true semantic labels.
    target="fake": unweighted CE against the constant fake class N+1.
    """
    if logits.dim() != 4:
        raise ContractViolation("logits must be (B, N+1, H, W)")
    n_plus_1 = logits.shape[1]
    logp = F.log_softmax(logits, dim=1)
    if target == "fake":
        return -logp[:, n_plus_1 - 1].mean()
    if target != "real":
        raise ContractViolation("target must be 'real' or 'fake'")
    _check_labels(labels, n_plus_1 - 1)
    idx = (labels.long() - 1).unsqueeze(1)  # class c -> channel c-1
    picked = logp.gather(1, idx).squeeze(1)
    if weights is None:
        return -picked.mean()
    return -(weights * picked).mean()


def generator_adv_seg(logits_fake_input, labels, weights, beta: float) -> torch.Tensor:
    """Generator's adversarial term: reward D calling fakes by true classes."""
    if beta == 0.0:
        return torch.zeros((), dtype=logits_fake_input.dtype)
    return beta * weighted_ce(logits_fake_input, labels, weights, target="real")


def discriminator_loss_seg(logits_real, logits_fake, labels, weights) -> torch.Tensor:
    """Segmentation-discriminator objective: true classes on reals, fake class on fakes."""
    real_term = weighted_ce(logits_real, labels, weights, target="real")
    fake_term = weighted_ce(logits_fake, labels, None, target="fake")
    return real_term + fake_term


def mix_mask(labels, seed: int) -> np.ndarray:
    """Binary mask constant on each connected same-class segment, fair coin each."""
    labels = np.asarray(labels)
    rng = rng_for(seed, "mix_mask")
    m = np.zeros(labels.shape, dtype=np.float32)
    for _cls, mask in _label_components(labels):
        m[mask] = float(rng.integers(0, 2))
    return m


def mix_images(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """mask * a + (1 - mask) * b, mask broadcast over channels."""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).unsqueeze(0)
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1)
    return mask * a + (1.0 - mask) * b


def mix_consistency(d_logits_fn, x, x_hat, mask) -> torch.Tensor:
    """Penalize D for not commuting with segment-wise real/fake mixing.

    Mean squared difference between D's logits on the mixed image and the
    same mix applied to D's logits on the two inputs.
    """
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask).to(x.dtype)
    mixed = mix_images(x, x_hat, mask)
    lhs = d_logits_fn(mixed)
    rhs = mix_images(d_logits_fn(x), d_logits_fn(x_hat), mask)
    return ((lhs - rhs) ** 2).mean()


def nonsaturating_pair(d_logits_fn, x, x_hat):
    """Baseline non-saturating adversarial pair on patch logits.

    Returns (generator_term, discriminator_term); logit-space formulation so
    probabilities never saturate to exact 0/1.
    """
    l_real = d_logits_fn(x)
    l_fake = d_logits_fn(x_hat)
    gen = F.softplus(-l_fake).mean()
    disc = F.softplus(l_fake).mean() + F.softplus(-l_real).mean()
    return gen, disc


def focal_frequency_map(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-frequency weighted squared spectrum difference (see loss below)."""
    if x.shape != x_hat.shape:
        raise ContractViolation("shape mismatch")
    fx = torch.fft.fft2(x)
    fy = torch.fft.fft2(x_hat)
    diff = fx - fy
    dist = diff.real**2 + diff.imag**2
    amp = torch.sqrt(dist + 1e-24)
    denom = amp.amax(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    return (amp / denom) * dist


def focal_frequency_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Frequency-domain discrepancy with self-weighted emphasis.

    Per channel 2-D DFT; the per-frequency squared difference is weighted by
    its own magnitude normalized to a maximum of one (focal exponent 1).
    """
    return focal_frequency_map(x, x_hat).mean()
