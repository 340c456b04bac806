"""Segmentation-guided U-Net discriminator and the patch baseline.

The main discriminator classifies every pixel into the N real semantic
classes plus one fake class. Conditioning on the latent uses a pixel-wise
projection: the pre-processed latent is dotted with the final U-Net
features per pixel and the resulting scalar map is added to every class
logit. All of its convolutions carry weight normalization.

The patch discriminator is the concatenation-conditioned baseline used by
the plain non-saturating objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from .errors import ConfigError, ContractViolation
from .losses import pixel_weights
from .util import rng_for


@dataclass
class DiscConfig:
    image_size: int = 64
    num_classes: int = 4  # real semantic classes; fake class is index N
    latent_channels: int = 32
    depth: int = 4
    down_channels: tuple = (32, 32, 64, 64)
    prep_width: int = 64  # latent pre-processing width and projection width

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if len(self.down_channels) != self.depth:
            raise ConfigError("down_channels length must equal depth")
        if self.image_size % (2**self.depth) != 0:
            raise ConfigError("image_size must be divisible by 2**depth")
        if self.image_size // (2**self.depth) < 4:
            raise ConfigError("bottleneck would be smaller than 4x4")


def _wn_conv(in_ch, out_ch, k=3, stride=1, padding=1):
    return weight_norm(nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=padding))


class ResBlockDown(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = _wn_conv(in_ch, out_ch)
        self.conv2 = _wn_conv(out_ch, out_ch)
        self.skip = _wn_conv(in_ch, out_ch, k=1, padding=0) if in_ch != out_ch else None

    def forward(self, x):
        h = self.conv1(F.leaky_relu(x, 0.2))
        h = self.conv2(F.leaky_relu(h, 0.2))
        h = F.avg_pool2d(h, 2)
        s = x if self.skip is None else self.skip(x)
        return h + F.avg_pool2d(s, 2)


class ResBlockUp(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = _wn_conv(in_ch, out_ch)
        self.conv2 = _wn_conv(out_ch, out_ch)
        self.skip = _wn_conv(in_ch, out_ch, k=1, padding=0) if in_ch != out_ch else None

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(F.leaky_relu(x, 0.2))
        h = self.conv2(F.leaky_relu(h, 0.2))
        s = x if self.skip is None else self.skip(x)
        return h + s


class SegmentationDiscriminator(nn.Module):
    """U-Net producing (N+1)-class per-pixel logits, latent-conditioned."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.down_channels
        downs = []
        in_ch = 3
        for c in ch:
            downs.append(ResBlockDown(in_ch, c))
            in_ch = c
        self.downs = nn.ModuleList(downs)

        ups = []
        up_in = ch[-1]
        for k in range(cfg.depth):
            out_ch = ch[cfg.depth - 2 - k] if k < cfg.depth - 1 else cfg.prep_width
            ups.append(ResBlockUp(up_in, out_ch))
            # next block consumes the upsampled features concatenated with its skip
            if k + 1 < cfg.depth:
                up_in = out_ch + ch[cfg.depth - 2 - k]
        self.ups = nn.ModuleList(ups)
        self.classify = _wn_conv(cfg.prep_width, cfg.num_classes + 1)
        self.prep = _wn_conv(cfg.latent_channels, cfg.prep_width)

    def prep_latent(self, y: torch.Tensor, target_size: int) -> torch.Tensor:
        """Latent pre-processing: one conv + leaky-ReLU, nearest resize."""
        h = F.leaky_relu(self.prep(y), 0.2)
        return F.interpolate(h, size=(target_size, target_size), mode="nearest")

    @staticmethod
    def project(u_final: torch.Tensor, y_prep: torch.Tensor) -> torch.Tensor:
        """Per-pixel inner product across channels, (B, 1, H, W)."""
        if u_final.shape != y_prep.shape:
            raise ContractViolation("projection operands must have matching shapes")
        return (u_final * y_prep).sum(dim=1, keepdim=True)

    def encode(self, x: torch.Tensor):
        feats = []
        h = x
        for down in self.downs:
            h = down(h)
            feats.append(h)
        return feats

    def bottleneck_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode(x)[-1]

    def forward(self, x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.cfg.image_size or x.shape[-2] != self.cfg.image_size:
            raise ContractViolation(
                f"expected {self.cfg.image_size}px input, got {tuple(x.shape)}"
            )
        feats = self.encode(x)
        u = feats[-1]
        for k, up in enumerate(self.ups):
            if k > 0:
                u = torch.cat([u, feats[self.cfg.depth - 1 - k]], dim=1)
            u = up(u)
        out = self.classify(u)
        if y is not None:
            y_prep = self.prep_latent(y, self.cfg.image_size)
            out = out + self.project(u, y_prep)
        return out


class PatchDiscriminator(nn.Module):
    """Strided conv stack over the image concatenated with the resized latent.

    The latent runs through a 12-filter spectral-norm conv before nearest
    upsampling, so the stack sees 3 + 12 input channels. One logit per patch
    on a (size / 8)^2 grid.
    """

    PREP_FILTERS = 12

    def __init__(self, image_size: int = 64, latent_channels: int = 32, width: int = 16):
        super().__init__()
        self.image_size = image_size
        self.prep = spectral_norm(nn.Conv2d(latent_channels, self.PREP_FILTERS, 3, padding=1))
        w = width
        self.stack = nn.Sequential(
            spectral_norm(nn.Conv2d(3 + self.PREP_FILTERS, w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(w, 2 * w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(4 * w, 4 * w, 3, stride=1, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(4 * w, 1, 1)),
        )

    def conditioned_input(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        y_prep = F.leaky_relu(self.prep(y), 0.2)
        y_up = F.interpolate(y_prep, size=x.shape[-2:], mode="nearest")
        return torch.cat([x, y_up], dim=1)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.stack(self.conditioned_input(x, y))


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts[t, p] of pixels with true class t+1 predicted as p+1."""
    pred = np.asarray(pred).ravel() - 1
    true = np.asarray(true).ravel() - 1
    idx = true * num_classes + pred
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean IoU over classes that appear in either prediction or truth."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    valid = denom > 0
    if not valid.any():
        return 0.0
    return float((tp[valid] / denom[valid]).mean())


def segmentation_miou(disc: SegmentationDiscriminator, samples) -> float:
    """Held-out mIoU of the unconditional N-class segmentation head."""
    n = disc.cfg.num_classes
    cm = np.zeros((n, n), dtype=np.int64)
    disc.eval()
    with torch.no_grad():
        for s in samples:
            x = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))[None]
            logits = disc(x)[:, :n]
            pred = logits.argmax(dim=1)[0].numpy() + 1
            cm += confusion_matrix(pred, s.labels, n)
    disc.train()
    return miou_from_confusion(cm)


def pretrain_segmentation(
    disc: SegmentationDiscriminator,
    dataset,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    holdout: int = 16,
) -> float:
    """Warm-start the U-Net on the N-class segmentation task.

    Trains with pixel-weighted cross entropy over the real classes only; the
    fake logit and the projection path receive no gradient. Returns the mIoU
    on the held-out slice.
    """
    from .data import split_holdout  # local import to avoid a cycle

    train, heldout = split_holdout(dataset, holdout)
    n = disc.cfg.num_classes
    params = [p for name, p in disc.named_parameters() if not name.startswith("prep.")]
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
    weights_cache = {s.id: torch.from_numpy(pixel_weights(s.labels)) for s in train}

    for step in range(steps):
        rng = rng_for(seed, "disc_pretrain_batch", step)
        idx = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        batch = [train[i] for i in idx]
        x = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in batch]
        )
        labels = torch.stack([torch.from_numpy(s.labels.astype(np.int64)) for s in batch])
        w = torch.stack([weights_cache[s.id] for s in batch])
        # N-class CE on the real-class logits only; fake logit gets no gradient.
        logp = F.log_softmax(disc(x)[:, :n], dim=1)
        picked = logp.gather(1, (labels - 1).unsqueeze(1)).squeeze(1)
        loss = -(w * picked).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return segmentation_miou(disc, heldout) if heldout else segmentation_miou(disc, train)
