"""Delimited report output and figure rendering.

All figures go straight to files (Agg backend); the CSV next to them holds
the numbers the figures were drawn from.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402


def write_csv(rows, path, columns) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def dp_scatter(rows, path) -> None:
    """Distortion-perception scatter from aggregate sweep rows (one per alpha)."""
    agg = sorted((r for r in rows if r["image_id"] == "ALL"), key=lambda r: r["alpha"])
    if not agg:
        return
    xs = [r["perception_score"] for r in agg]
    ys = [r["psnr_db"] for r in agg]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, "o-", color="tab:blue")
    for r, x, y in zip(agg, xs, ys):
        ax.annotate(f"a={r['alpha']:.2f}", (x, y), fontsize=8, xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("perception score (lower is better)")
    ax.set_ylabel("PSNR [dB]")
    ax.set_title(f"distortion-perception sweep @ {agg[0]['bpp']:.3f} bpp")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def rd_scatter(rows, path) -> None:
    """Per-image rate-distortion scatter from eval rows."""
    pts = [r for r in rows if r["image_id"] != "ALL"]
    if not pts:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([r["bpp"] for r in pts], [r["psnr_db"] for r in pts], s=14, alpha=0.7)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR [dB]")
    ax.set_title("per-image rate vs distortion")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curves(records, path) -> None:
    """Loss / rate / quality traces from a metrics log."""
    recs = [r for r in records if r.get("step") is not None]
    if not recs:
        return
    steps = [r["step"] for r in recs]
    series = [k for k in ("loss_avg", "bpp", "psnr", "g_loss", "d_loss", "disc_acc", "head_mse", "miou") if any(k in r and r[k] is not None for r in recs)]
    if not series:
        return
    fig, axes = plt.subplots(1, len(series), figsize=(4 * len(series), 3.2))
    if len(series) == 1:
        axes = [axes]
    for ax, key in zip(axes, series):
        xs = [s for s, r in zip(steps, recs) if key in r and r[key] is not None]
        ys = [r[key] for r in recs if key in r and r[key] is not None]
        ax.plot(xs, ys)
        ax.set_xlabel("step")
        ax.set_title(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_spectrum_png(map01: np.ndarray, path) -> None:
    """Emit a [0, 1] spectrum map as an 8-bit grayscale image."""
    arr = np.clip(np.asarray(map01), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)
