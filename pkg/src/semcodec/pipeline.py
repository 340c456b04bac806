"""Image-level operations binding codec, coder, and realism control.

One compressed stream per image; the realism knob only changes how the
decoder renders it, never what was coded.
"""

from __future__ import annotations

import sys

import numpy as np
import torch

from .checkpoint import ModelBundle
from .coder import Bitstream, bpp, decode_stream, encode_stream
from .data import crop_to_size, pad_to_factor
from .entropy import quantize
from .errors import ConfigError
from .evaluation import extract_patches, feature_stats, frechet_distance, psnr
from .realism import realism_output
from .util import tensor_digest


def compress_image(bundle: ModelBundle, image: np.ndarray) -> Bitstream:
    """Pad, analyze, round, and entropy-code one image."""
    padded, orig = pad_to_factor(np.asarray(image, dtype=np.float32), bundle.codec_cfg.downsample_factor)
    x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1)))[None]
    with torch.no_grad():
        v = bundle.encoder(x)
        cond = bundle.entropy_model.condition(v, "round")
        y = quantize(v, "round")
    z = cond.z_hat if bundle.entropy_model.use_hyperprior else None
    return encode_stream(y, bundle.entropy_model, image_size=orig, z=z)


def decode_latent(bundle: ModelBundle, stream: Bitstream) -> torch.Tensor:
    y, _z = decode_stream(stream, bundle.entropy_model)
    return y


def reconstruct(bundle: ModelBundle, y: torch.Tensor, alpha: float = 1.0, image_size=None) -> np.ndarray:
    """Synthesize an image from a decoded latent at realism ``alpha``."""
    gen = bundle.decode_generator
    with torch.no_grad():
        if bundle.residual_head is not None:
            out, feats = gen(y, return_features=True)
            out = realism_output(out, feats, bundle.residual_head, alpha)
        else:
            if alpha != 1.0:
                print(
                    "warning: no realism head in checkpoint; alpha ignored",
                    file=sys.stderr,
                )
            out = gen(y)
        out = out.clamp(0.0, 1.0)
    img = out[0].numpy().transpose(1, 2, 0)
    if image_size is not None:
        img = crop_to_size(img, image_size)
    return img


def decompress_image(bundle: ModelBundle, stream: Bitstream, alpha: float = 1.0) -> np.ndarray:
    y = decode_latent(bundle, stream)
    return reconstruct(bundle, y, alpha=alpha, image_size=stream.image_size)


def eval_dataset(bundle: ModelBundle, samples, feature_fn, patch: int = 32, alpha: float = 1.0):
    """Compress and reconstruct a dataset; per-image rows plus an aggregate.

    Returns (rows, aggregate) where each row is a dict with image_id, bpp,
    psnr_db; the aggregate adds the set-level perception score.
    """
    if not samples:
        raise ConfigError("empty dataset")
    rows = []
    recons = []
    for s in samples:
        stream = compress_image(bundle, s.image)
        recon = decompress_image(bundle, stream, alpha=alpha)
        recons.append(recon)
        rows.append(
            {
                "image_id": s.id,
                "bpp": bpp(stream),
                "psnr_db": psnr(s.image, recon),
            }
        )
    reals = [s.image for s in samples]
    agg = {
        "image_id": "ALL",
        "bpp": float(np.mean([r["bpp"] for r in rows])),
        "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
        "perception": frechet_distance(
            feature_stats(feature_fn(extract_patches(reals, patch))),
            feature_stats(feature_fn(extract_patches(recons, patch))),
        ),
    }
    return rows, agg


def sweep_alpha(bundle: ModelBundle, samples, alphas, feature_fn, patch: int = 32):
    """Compress once per image, decode at every alpha, tabulate metrics.

    Returns (rows, latent_digests). Per-image rows carry an image-local
    perception score (own real patches vs own reconstruction patches);
    aggregate rows (image_id "ALL") carry the set-level score per alpha.
    """
    if bundle.residual_head is None:
        raise ConfigError("alpha sweep requires a checkpoint with a realism head")
    if not samples:
        raise ConfigError("empty dataset")
    alphas = [float(a) for a in alphas]
    rows = []
    digests = {}
    recons_by_alpha = {a: [] for a in alphas}
    for s in samples:
        stream = compress_image(bundle, s.image)
        rate = bpp(stream)
        y = decode_latent(bundle, stream)
        digests[s.id] = tensor_digest(y)
        real_stats = feature_stats(feature_fn(extract_patches([s.image], patch)))
        for a in alphas:
            recon = reconstruct(bundle, y, alpha=a, image_size=stream.image_size)
            recons_by_alpha[a].append(recon)
            fake_stats = feature_stats(feature_fn(extract_patches([recon], patch)))
            rows.append(
                {
                    "image_id": s.id,
                    "alpha": a,
                    "bpp": rate,
                    "psnr_db": psnr(s.image, recon),
                    "perception_score": frechet_distance(real_stats, fake_stats),
                }
            )
    reals = [s.image for s in samples]
    real_stats = feature_stats(feature_fn(extract_patches(reals, patch)))
    mean_bpp = float(np.mean([r["bpp"] for r in rows]))
    for a in alphas:
        fake_stats = feature_stats(feature_fn(extract_patches(recons_by_alpha[a], patch)))
        rows.append(
            {
                "image_id": "ALL",
                "alpha": a,
                "bpp": mean_bpp,
                "psnr_db": float(
                    np.mean([r["psnr_db"] for r in rows if r["alpha"] == a and r["image_id"] != "ALL"])
                ),
                "perception_score": frechet_distance(real_stats, fake_stats),
            }
        )
    return rows, digests
