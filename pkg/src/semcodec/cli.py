"""Command-line surface: gen-data, train, compress, decompress, eval, sweep.

Every command resolves its configuration as flags > config file > defaults,
echoes the resolved values into its output directory, and maps failures to
exit codes: 1 usage/config, 2 data/model incompatibility, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, bundle_from_checkpoint
from .coder import Bitstream, bpp
from .codec import CodecConfig
from .config import echo_config, parse_config_file, resolve
from .data import DatasetSpec, generate_dataset, load_dataset, load_manifest_spec, save_dataset
from .discriminator import DiscConfig
from .errors import (
    ConfigError,
    ContractViolation,
    CorruptStreamError,
    DivergenceError,
    IncompatibleModelError,
    InsufficientSamplesError,
    SemcodecError,
)
from .evaluation import disc_feature_fn, flatten_features, spectrum
from .pipeline import compress_image, decode_latent, decompress_image, eval_dataset, reconstruct, sweep_alpha
from .realism import DEFAULT_ALPHA_GRID
from .report import dp_scatter, rd_scatter, save_spectrum_png, training_curves, write_csv
from .training import MetricsLog, TrainPlan, run_disc_pretrain, run_orp, run_stage1, run_stage2
from .util import tensor_digest

# Learning-rate presets per stage; "paper" mirrors the published schedule,
# "desk" scales it up for tiny models on tiny data.
PRESET_LR = {
    "desk": {"1": 1e-3, "2": 1e-4, "orp": 1e-3, "disc_pretrain": 1e-3},
    "paper": {"1": 1e-4, "2": 1e-5, "orp": 1e-4, "disc_pretrain": 1e-3},
}
# Fraction of stage-1 steps after which lr decays x0.1 when set to auto.
PRESET_DECAY_FRAC = {"desk": 0.8, "paper": 0.9}

GEN_DATA_DEFAULTS = {
    "n": 64,
    "size": 64,
    "classes": 4,
    "seed": 0,
    "shapes_min": 1,
    "shapes_max": 4,
}

TRAIN_DEFAULTS = {
    "stage": "1",
    "strategy": "I",
    "steps": 3000,
    "batch_size": 8,
    "lr": -1.0,  # negative = use the preset for the stage
    "lr_decay_step": -1,  # negative = auto (stage 1 only), 0 = never
    "lam": 1.0,
    "beta": 0.30,
    "k_m": 100.0,
    "k_p": 1.0,
    "mix_coef": 10.0,
    "seed": 0,
    "cadence": 500,
    "holdout": 16,
    "preset": "desk",
    "latent_channels": 32,
    "downsample_factor": 8,
    "base_width": 64,
    "use_hyperprior": True,
    "hyper_channels": 16,
    "hyper_width": 48,
    "disc_depth": 4,
    "head_width": 12,
}

EVAL_DEFAULTS = {"alpha": 1.0, "patch": 32}
SWEEP_DEFAULTS = {"alphas": ",".join(str(a) for a in DEFAULT_ALPHA_GRID), "patch": 32}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise ConfigError(message)


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input image not found: {p}")
    try:
        img = Image.open(p).convert("RGB")
    except Exception as e:
        raise ConfigError(f"cannot read image {p}: {e}") from e
    return np.asarray(img, dtype=np.float32) / 255.0


def _save_image(img: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _feature_fn_for(bundle):
    if bundle.discriminator is not None:
        return disc_feature_fn(bundle.discriminator)
    print("note: no discriminator in checkpoint; using raw-pixel features", file=sys.stderr)
    return flatten_features


def _default_disc_channels(depth: int) -> tuple:
    base = (32, 32, 64, 64, 128, 128)
    if depth > len(base):
        raise ConfigError(f"disc_depth up to {len(base)} supported")
    return base[:depth]


def _acquire_lock(run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    if lock.exists():
        raise ConfigError(f"run directory {run_dir} is locked (stale {lock}? remove it)")
    lock.write_text("locked\n")
    return lock


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    flags = {
        "n": args.n,
        "size": args.size,
        "classes": args.classes,
        "seed": args.seed,
        "shapes_min": args.shapes_min,
        "shapes_max": args.shapes_max,
    }
    file_vals = parse_config_file(args.config) if args.config else None
    cfg = resolve(GEN_DATA_DEFAULTS, file_vals, flags)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    spec = DatasetSpec(
        num_samples=cfg["n"],
        image_size=cfg["size"],
        num_classes=cfg["classes"],
        seed=cfg["seed"],
        shapes_min=cfg["shapes_min"],
        shapes_max=cfg["shapes_max"],
    )
    samples = generate_dataset(spec)
    save_dataset(samples, spec, out)
    echo_config(cfg, out / "config.echo")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _resolve_train_config(args) -> dict:
    flags = {k: getattr(args, k, None) for k in TRAIN_DEFAULTS}
    file_vals = parse_config_file(args.config) if args.config else None
    cfg = resolve(TRAIN_DEFAULTS, file_vals, flags)
    cfg["stage"] = str(cfg["stage"]).replace("-", "_")
    if cfg["stage"] not in ("1", "2", "orp", "disc_pretrain"):
        raise ConfigError(f"unknown stage {cfg['stage']!r}")
    if cfg["preset"] not in PRESET_LR:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    if cfg["lr"] < 0:
        cfg["lr"] = PRESET_LR[cfg["preset"]][cfg["stage"]]
    if cfg["lr_decay_step"] < 0:
        if cfg["stage"] == "1" and cfg["steps"] > 0:
            cfg["lr_decay_step"] = int(PRESET_DECAY_FRAC[cfg["preset"]] * cfg["steps"])
        else:
            cfg["lr_decay_step"] = 0
    if cfg["stage"] == "2" and cfg["strategy"] == "II":
        cfg["k_m"] = 0.0
        cfg["k_p"] = 0.0
        cfg["beta"] = 1.0
    return cfg


def _plan_from_config(cfg: dict) -> TrainPlan:
    return TrainPlan(
        stage=cfg["stage"],
        strategy=cfg["strategy"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        lr_decay_step=cfg["lr_decay_step"] if cfg["lr_decay_step"] > 0 else None,
        lam=cfg["lam"],
        beta=cfg["beta"],
        k_m=cfg["k_m"],
        k_p=cfg["k_p"],
        mix_coef=cfg["mix_coef"],
        seed=cfg["seed"],
        cadence=cfg["cadence"],
        holdout=cfg["holdout"],
    )


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    if not args.dataset:
        raise ConfigError("--dataset is required")
    if not args.run_dir:
        raise ConfigError("--run-dir is required")
    run_dir = Path(args.run_dir)
    lock = _acquire_lock(run_dir)
    try:
        echo_config(cfg, run_dir / "config.echo")
        dataset = load_dataset(args.dataset)
        ds_spec = load_manifest_spec(args.dataset)
        plan = _plan_from_config(cfg)

        stage = cfg["stage"]
        if stage == "1":
            codec_cfg = CodecConfig(
                latent_channels=cfg["latent_channels"],
                downsample_factor=cfg["downsample_factor"],
                base_width=cfg["base_width"],
                lam=cfg["lam"],
                use_hyperprior=cfg["use_hyperprior"],
                hyper_channels=cfg["hyper_channels"],
                hyper_width=cfg["hyper_width"],
            )
            final = run_stage1(plan, dataset, codec_cfg, run_dir)
        elif stage == "2":
            if not args.init_from:
                raise ConfigError("stage 2 requires a stage-1 checkpoint via --init-from")
            stage1_ckpt = Checkpoint.load(args.init_from)
            disc_cfg = DiscConfig(
                image_size=ds_spec.image_size,
                num_classes=ds_spec.num_classes,
                latent_channels=stage1_ckpt.meta["codec_config"]["latent_channels"],
                depth=cfg["disc_depth"],
                down_channels=_default_disc_channels(cfg["disc_depth"]),
            )
            disc_ckpt = Checkpoint.load(args.disc_from) if args.disc_from else None
            final = run_stage2(plan, stage1_ckpt, dataset, disc_cfg, run_dir, disc_ckpt=disc_ckpt)
        elif stage == "orp":
            if not args.init_from:
                raise ConfigError("realism stage requires a stage-2 checkpoint via --init-from")
            stage2_ckpt = Checkpoint.load(args.init_from)
            final = run_orp(plan, stage2_ckpt, dataset, run_dir, head_width=cfg["head_width"])
        else:  # disc_pretrain
            disc_cfg = DiscConfig(
                image_size=ds_spec.image_size,
                num_classes=ds_spec.num_classes,
                latent_channels=cfg["latent_channels"],
                depth=cfg["disc_depth"],
                down_channels=_default_disc_channels(cfg["disc_depth"]),
            )
            final = run_disc_pretrain(plan, dataset, disc_cfg, run_dir)

        records = MetricsLog.read(run_dir / "metrics.jsonl") if (run_dir / "metrics.jsonl").exists() else []
        training_curves(records, run_dir / "training_curves.png")
        (run_dir / "report.json").write_text(
            json.dumps({"final_checkpoint": str(final), "last_record": records[-1] if records else None}, indent=2, sort_keys=True)
        )
        print(f"final checkpoint: {final}")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_compress(args) -> int:
    image = _load_image(args.input)
    bundle = bundle_from_checkpoint(Checkpoint.load(args.checkpoint))
    stream = compress_image(bundle, image)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Path(args.output).write_bytes(stream.to_bytes())
    y = decode_latent(bundle, stream)
    print(f"bpp={bpp(stream):.6f}")
    print(f"latent_digest={tensor_digest(y)}")
    return 0


def cmd_decompress(args) -> int:
    alpha = float(args.alpha)
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError("alpha must lie in [0, 1]")
    raw = Path(args.stream).read_bytes() if Path(args.stream).exists() else None
    if raw is None:
        raise ConfigError(f"bitstream not found: {args.stream}")
    stream = Bitstream.from_bytes(raw)
    bundle = bundle_from_checkpoint(Checkpoint.load(args.checkpoint))
    y = decode_latent(bundle, stream)
    img = reconstruct(bundle, y, alpha=alpha, image_size=stream.image_size)
    _save_image(img, args.output)
    print(f"latent_digest={tensor_digest(y)}")
    return 0


def cmd_eval(args) -> int:
    flags = {"alpha": args.alpha, "patch": args.patch}
    file_vals = parse_config_file(args.config) if args.config else None
    cfg = resolve(EVAL_DEFAULTS, file_vals, flags)
    dataset = load_dataset(args.dataset)
    if not dataset:
        raise InsufficientSamplesError("empty dataset")
    bundle = bundle_from_checkpoint(Checkpoint.load(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.echo")

    rows, agg = eval_dataset(bundle, dataset, _feature_fn_for(bundle), patch=cfg["patch"], alpha=cfg["alpha"])
    write_csv(rows + [agg], out / "eval.csv", ["image_id", "bpp", "psnr_db", "perception"])
    rd_scatter(rows, out / "rd_scatter.png")
    for s in dataset[:2]:
        stream = compress_image(bundle, s.image)
        recon = decompress_image(bundle, stream, alpha=cfg["alpha"])
        save_spectrum_png(spectrum(s.image.mean(axis=2)), out / f"{s.id}_spectrum_real.png")
        save_spectrum_png(spectrum(recon.mean(axis=2)), out / f"{s.id}_spectrum_recon.png")
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    print(json.dumps(agg, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    flags = {"alphas": args.alphas, "patch": args.patch}
    file_vals = parse_config_file(args.config) if args.config else None
    cfg = resolve(SWEEP_DEFAULTS, file_vals, flags)
    alphas = [float(a) for a in str(cfg["alphas"]).split(",") if a.strip() != ""]
    for a in alphas:
        if not (0.0 <= a <= 1.0):
            raise ConfigError("alphas must lie in [0, 1]")
    dataset = load_dataset(args.dataset)
    if not dataset:
        raise InsufficientSamplesError("empty dataset")
    bundle = bundle_from_checkpoint(Checkpoint.load(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "config.echo")

    rows, _digests = sweep_alpha(bundle, dataset, alphas, _feature_fn_for(bundle), patch=cfg["patch"])
    write_csv(rows, out / "sweep.csv", ["image_id", "alpha", "bpp", "psnr_db", "perception_score"])
    dp_scatter(rows, out / "dp_scatter.png")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semcodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic labeled-shapes dataset")
    g.add_argument("out")
    g.add_argument("--n", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--shapes-min", dest="shapes_min", type=int)
    g.add_argument("--shapes-max", dest="shapes_max", type=int)
    g.add_argument("--force", action="store_true")
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run a training stage")
    t.add_argument("--dataset")
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--init-from", dest="init_from")
    t.add_argument("--disc-from", dest="disc_from")
    t.add_argument("--config")
    t.add_argument("--stage", dest="stage")
    t.add_argument("--strategy", dest="strategy", choices=["I", "II"])
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay-step", dest="lr_decay_step", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--k-m", dest="k_m", type=float)
    t.add_argument("--k-p", dest="k_p", type=float)
    t.add_argument("--mix-coef", dest="mix_coef", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--cadence", type=int)
    t.add_argument("--holdout", type=int)
    t.add_argument("--preset", choices=["desk", "paper"])
    t.add_argument("--latent-channels", dest="latent_channels", type=int)
    t.add_argument("--downsample-factor", dest="downsample_factor", type=int)
    t.add_argument("--base-width", dest="base_width", type=int)
    t.add_argument("--use-hyperprior", dest="use_hyperprior", type=lambda s: s.lower() in ("1", "true", "yes"))
    t.add_argument("--hyper-channels", dest="hyper_channels", type=int)
    t.add_argument("--hyper-width", dest="hyper_width", type=int)
    t.add_argument("--disc-depth", dest="disc_depth", type=int)
    t.add_argument("--head-width", dest="head_width", type=int)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compress", help="compress one image to a bitstream")
    c.add_argument("input")
    c.add_argument("checkpoint")
    c.add_argument("output")
    c.set_defaults(fn=cmd_compress)

    d = sub.add_parser("decompress", help="decode a bitstream to an image")
    d.add_argument("stream")
    d.add_argument("checkpoint")
    d.add_argument("output")
    d.add_argument("--alpha", type=float, default=1.0)
    d.set_defaults(fn=cmd_decompress)

    e = sub.add_parser("eval", help="rate/distortion/perception report over a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--alpha", type=float)
    e.add_argument("--patch", type=int)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="decode at several realism settings and tabulate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alphas")
    s.add_argument("--patch", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_sweep)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (IncompatibleModelError, CorruptStreamError, ContractViolation, InsufficientSamplesError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except SemcodecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
