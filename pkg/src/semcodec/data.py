"""Synthetic labeled-shapes dataset plus padding/cropping utilities.

Images are float32 H x W x 3 arrays in [0, 1]; label maps are uint8 H x W
arrays over classes {1..N} with class 1 reserved for the background. Values
are quantized to the 8-bit grid at generation time so that PNG persistence
round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractViolation
from .util import rng_for

MANIFEST_NAME = "manifest.json"

# Shape types cycle over classes 2..N.
_SHAPE_KINDS = ("rectangle", "ellipse", "triangle")


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters that fully determine a generated dataset."""

    num_samples: int
    image_size: int = 64
    num_classes: int = 4
    seed: int = 0
    shapes_min: int = 1
    shapes_max: int = 4

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background plus one shape class)")
        if self.image_size % 8 != 0:
            raise ConfigError("image_size must be a multiple of 8")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0")
        if not (0 <= self.shapes_min <= self.shapes_max):
            raise ConfigError("need 0 <= shapes_min <= shapes_max")


@dataclass(frozen=True)
class LabeledImage:
    """One sample: image plane, per-pixel semantic labels, stable id."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 in {1..N}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ContractViolation("image and labels must share spatial dims")
        self.image.setflags(write=False)
        self.labels.setflags(write=False)


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Smooth noise in [0, 1]: bilinear upsampling of a coarse random grid."""
    grid = rng.random((cells + 1, cells + 1))
    xs = np.linspace(0, cells, size, endpoint=False)
    i0 = xs.astype(int)
    f = xs - i0
    i1 = i0 + 1
    top = grid[np.ix_(i0, i0)] * (1 - f)[None, :] + grid[np.ix_(i0, i1)] * f[None, :]
    bot = grid[np.ix_(i1, i0)] * (1 - f)[None, :] + grid[np.ix_(i1, i1)] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray | None:
    """Boolean mask for one randomly placed shape, or None if degenerate."""
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = max(6, size // 8), max(10, size // 2 - 4)
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    cy = int(rng.integers(h // 2 + 1, size - h // 2 - 1))
    cx = int(rng.integers(w // 2 + 1, size - w // 2 - 1))
    if kind == "rectangle":
        return (np.abs(yy - cy) <= h // 2) & (np.abs(xx - cx) <= w // 2)
    if kind == "ellipse":
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    # Triangle: three vertices sampled inside the bounding box around (cy, cx).
    vy = cy + rng.integers(-h // 2, h // 2 + 1, size=3)
    vx = cx + rng.integers(-w // 2, w // 2 + 1, size=3)
    area2 = abs(
        (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0])
    )
    if area2 < max(16, h * w // 6):
        return None
    mask = np.ones((size, size), dtype=bool)
    for i in range(3):
        ay, ax = vy[i], vx[i]
        by, bx = vy[(i + 1) % 3], vx[(i + 1) % 3]
        oy, ox = vy[(i + 2) % 3], vx[(i + 2) % 3]
        side = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        ref = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
        mask &= side * ref >= 0
    return mask


def _generate_sample(spec: DatasetSpec, index: int) -> LabeledImage:
    """Render one sample; a pure function of (spec.seed, index)."""
    rng = rng_for(spec.seed, "sample", index)
    size = spec.image_size

    base = np.array([0.28, 0.32, 0.38]) + rng.uniform(-0.08, 0.08, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    # Two octaves of smooth texture so the background carries spatial detail.
    tex = 0.6 * _value_noise(rng, size, 4) + 0.4 * _value_noise(rng, size, 12)
    img += 0.22 * (tex - 0.5)[:, :, None]
    labels = np.ones((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    placed_boxes: list[np.ndarray] = []
    for _ in range(n_shapes):
        cls = int(rng.integers(2, spec.num_classes + 1))
        kind = _SHAPE_KINDS[(cls - 2) % len(_SHAPE_KINDS)]
        mask = None
        for _attempt in range(20):
            cand = _shape_mask(kind, size, rng)
            if cand is None or not cand.any():
                continue
            overlap = any((cand & prev).sum() > 0.1 * cand.sum() for prev in placed_boxes)
            mask = cand
            if not overlap:
                break
        if mask is None:
            continue
        placed_boxes.append(mask)
        color = rng.uniform(0.08, 0.92, size=3)
        while np.abs(color - base).max() < 0.18:
            color = rng.uniform(0.08, 0.92, size=3)
        shade = 1.0 + 0.10 * (tex - 0.5)
        img[mask] = color[None, :] * shade[mask, None]
        labels[mask] = cls  # later shape wins on overlap

    img += rng.normal(0.0, 0.008, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # Snap to the 8-bit grid so PNG persistence is lossless.
    img8 = np.round(img * 255.0).astype(np.uint8)
    return LabeledImage(
        image=(img8.astype(np.float32) / 255.0),
        labels=labels,
        id=f"s{index:05d}",
    )


def generate_dataset(spec: DatasetSpec) -> list[LabeledImage]:
    """Generate the dataset described by ``spec``.

    Deterministic in spec alone; per-sample seeding keeps the output
    independent of any parallel generation order.
    """
    spec.validate()
    return [_generate_sample(spec, i) for i in range(spec.num_samples)]


def pad_to_factor(x: np.ndarray, factor: int):
    """Reflect-pad spatial dims up to the next multiple of ``factor``.

    Returns (padded, original_size) where original_size = (H, W).
    """
    if factor < 1:
        raise ContractViolation("factor must be >= 1")
    h, w = x.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="reflect"), (h, w)


def crop_to_size(x: np.ndarray, original_size) -> np.ndarray:
    """Top-left crop back to ``original_size``; inverse of pad_to_factor."""
    h, w = original_size
    if h > x.shape[0] or w > x.shape[1]:
        raise ContractViolation("original size exceeds input size")
    return x[:h, :w]


def save_dataset(samples, spec: DatasetSpec, out_dir) -> None:
    """Persist samples as lossless PNGs plus a manifest describing the spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img8 = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(out / f"{s.id}_img.png")
        Image.fromarray(s.labels, mode="L").save(out / f"{s.id}_lab.png")
        entries.append({"id": s.id, "height": int(s.image.shape[0]), "width": int(s.image.shape[1])})
    manifest = {"spec": asdict(spec), "samples": entries}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(dataset_dir) -> list[LabeledImage]:
    """Load a dataset previously written by save_dataset."""
    root = Path(dataset_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for e in manifest["samples"]:
        img = np.asarray(Image.open(root / f"{e['id']}_img.png"), dtype=np.float32) / 255.0
        lab = np.asarray(Image.open(root / f"{e['id']}_lab.png"), dtype=np.uint8)
        samples.append(LabeledImage(image=img, labels=lab, id=e["id"]))
    return samples


def load_manifest_spec(dataset_dir) -> DatasetSpec:
    manifest = json.loads((Path(dataset_dir) / MANIFEST_NAME).read_text())
    return DatasetSpec(**manifest["spec"])


def split_holdout(samples, holdout: int):
    """Deterministic train/heldout split: the last ``holdout`` samples."""
    if holdout <= 0:
        return list(samples), []
    if holdout >= len(samples):
        raise ConfigError("holdout must leave at least one training sample")
    return list(samples[:-holdout]), list(samples[-holdout:])
