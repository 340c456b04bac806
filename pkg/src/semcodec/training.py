"""Training schedule: rate-distortion stage, adversarial fine-tune, head fit.

Stage 1 jointly optimizes encoder, generator, and entropy model on the
rate-distortion objective. Stage 2 freezes encoder and entropy model,
clones the generator, and fine-tunes the clone adversarially against the
segmentation discriminator (strategy I keeps the distortion term, strategy
II is purely adversarial with beta = 1). The realism stage freezes
everything and fits only the residual head. Every random draw is a pure
function of (plan.seed, step), so runs are bit-reproducible and resumable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, bundle_from_checkpoint, load_module, module_arrays
from .codec import CodecConfig, Encoder, Generator, build_codec
from .data import split_holdout
from .discriminator import DiscConfig, SegmentationDiscriminator, pretrain_segmentation
from .entropy import EntropyModel, quantize
from .errors import ConfigError, DivergenceError
from .losses import (
    RandomConvFeatures,
    discriminator_loss_seg,
    distortion,
    generator_adv_seg,
    mix_consistency,
    mix_mask,
    pixel_weights,
)
from .realism import ResidualHead
from .util import derive_seed, rng_for, torch_gen_for

STAGES = ("1", "2", "orp", "disc_pretrain")
STRATEGIES = ("I", "II")


@dataclass
class TrainPlan:
    stage: str = "1"
    strategy: str = "I"  # stage 2 only
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay_step: int | None = None  # lr drops x0.1 from this step on
    lam: float = 1.0
    beta: float = 0.30
    k_m: float = 100.0
    k_p: float = 1.0
    mix_coef: float = 10.0
    seed: int = 0
    cadence: int = 500
    holdout: int = 16

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.steps < 0 or self.batch_size < 1 or self.cadence < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, cadence >= 1 required")

    def effective_weights(self):
        """Strategy II removes the distortion term and rebalances beta to 1."""
        if self.stage == "2" and self.strategy == "II":
            return 0.0, 0.0, 1.0
        return self.k_m, self.k_p, self.beta

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsLog:
    """Line-delimited metric records, flushed as they are written."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        clean = {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in record.items()}
        with self.path.open("a") as f:
            f.write(json.dumps(clean, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list:
        lines = Path(path).read_text().splitlines()
        return [json.loads(ln) for ln in lines if ln.strip()]


def _to_tensor(samples) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in samples]
    )


def _labels_tensor(samples) -> torch.Tensor:
    return torch.stack([torch.from_numpy(s.labels.astype(np.int64)) for s in samples])


def _batch(train, plan: TrainPlan, tag: str, step: int):
    rng = rng_for(plan.seed, "batch", tag, step)
    size = min(plan.batch_size, len(train))
    idx = rng.choice(len(train), size=size, replace=False)
    return [train[i] for i in idx]


def _lr_at(plan: TrainPlan, step: int) -> float:
    if plan.lr_decay_step is not None and step >= plan.lr_decay_step:
        return plan.lr * 0.1
    return plan.lr


def _check_finite(loss: torch.Tensor, step: int, stage: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step} of stage {stage}")


def _run_dirs(run_dir):
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    return run_dir, run_dir / "checkpoints", MetricsLog(run_dir / "metrics.jsonl")


def _write_plan(run_dir: Path, plan: TrainPlan, extra: dict | None = None) -> None:
    payload = {"plan": plan.to_dict()}
    if extra:
        payload.update(extra)
    (run_dir / "plan.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def optimizer_arrays(opt: torch.optim.Optimizer) -> dict:
    arrays = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            a = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
            arrays[f"p{idx:04d}.{key}"] = a
    return arrays


def restore_optimizer(opt: torch.optim.Optimizer, arrays: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, a in arrays.items():
        pid, key = name.split(".", 1)
        state.setdefault(int(pid[1:]), {})[key] = torch.from_numpy(np.ascontiguousarray(a))
    sd["state"] = state
    opt.load_state_dict(sd)


@torch.no_grad()
def probe_metrics(encoder, entropy_model, generator, probe_x: torch.Tensor) -> dict:
    """Round-mode reconstruction quality and rate estimate on a fixed batch."""
    v = encoder(probe_x)
    cond = entropy_model.condition(v, "round")
    y = quantize(v, "round")
    x_hat = generator(y).clamp(0.0, 1.0)
    num_pixels = probe_x.shape[0] * probe_x.shape[-2] * probe_x.shape[-1]
    bits = cond.bits(y).sum() + cond.z_bits
    mse_val = ((probe_x - x_hat) ** 2).mean().item()
    psnr_db = 100.0 if mse_val == 0 else min(10.0 * np.log10(1.0 / mse_val), 100.0)
    return {"bpp": float(bits.item() / num_pixels), "psnr": float(psnr_db)}


# ---------------------------------------------------------------------------
# Stage 1: joint rate-distortion training of encoder, generator, prior.
# ---------------------------------------------------------------------------


def run_stage1(
    plan: TrainPlan,
    dataset,
    codec_cfg: CodecConfig,
    run_dir,
    resume_from: Checkpoint | None = None,
) -> Path:
    plan.validate()
    if plan.stage != "1":
        raise ConfigError("run_stage1 requires plan.stage == '1'")
    codec_cfg.validate()
    run_dir, ckpt_dir, log = _run_dirs(run_dir)
    _write_plan(run_dir, plan, {"codec_config": codec_cfg.to_dict()})

    perceptual = RandomConvFeatures() if plan.k_p != 0 else None
    torch.manual_seed(derive_seed(plan.seed, "stage1_init"))
    encoder, generator, entropy_model = build_codec(codec_cfg)

    train, heldout = split_holdout(dataset, plan.holdout)
    probe_x = _to_tensor(heldout[: min(8, len(heldout))] or train[:8])

    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(generator.parameters()) + list(entropy_model.parameters()),
        lr=plan.lr,
        betas=(0.9, 0.999),
    )
    start_step = 0
    if resume_from is not None:
        load_module(encoder, resume_from.section("encoder"))
        load_module(entropy_model, resume_from.section("entropy"))
        load_module(generator, resume_from.section("generator_mse"))
        restore_optimizer(opt, resume_from.section("opt_stage1"))
        start_step = int(resume_from.meta["step"])

    def save(step: int, name: str) -> Path:
        ckpt = Checkpoint(
            meta={
                "format": "semcodec-checkpoint",
                "stage": "1",
                "step": step,
                "seed": plan.seed,
                "codec_config": codec_cfg.to_dict(),
                "plan": plan.to_dict(),
            }
        )
        ckpt.set_section("encoder", module_arrays(encoder))
        ckpt.set_section("entropy", module_arrays(entropy_model))
        ckpt.set_section("generator_mse", module_arrays(generator))
        ckpt.set_section("opt_stage1", optimizer_arrays(opt))
        path = ckpt_dir / name
        ckpt.save(path)
        return path

    window: list = []
    for step in range(start_step, plan.steps):
        batch = _batch(train, plan, "stage1", step)
        x = _to_tensor(batch)
        gen = torch_gen_for(plan.seed, "stage1_noise", step)

        v = encoder(x)
        cond = entropy_model.condition(v, "noise", gen)
        y_noisy = quantize(v, "noise", gen)
        y_dec = quantize(v, "round_ste")
        x_hat = generator(y_dec)

        num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
        bpp_noise = (cond.bits(y_noisy).sum() + cond.z_bits) / num_pixels
        dist = distortion(x, x_hat, plan.k_m, plan.k_p, perceptual)
        loss = plan.lam * bpp_noise + dist
        _check_finite(loss, step, "1")

        opt.param_groups[0]["lr"] = _lr_at(plan, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        window.append(float(loss.item()))

        if (step + 1) % plan.cadence == 0 or step + 1 == plan.steps:
            rec = {
                "step": step + 1,
                "loss": float(loss.item()),
                "loss_avg": float(np.mean(window)),
                "bpp_noise": float(bpp_noise.item()),
                "distortion": float(dist.item()),
            }
            rec.update(probe_metrics(encoder, entropy_model, generator, probe_x))
            log.append(rec)
            window.clear()
            save(step + 1, f"step{step + 1:07d}.ckpt")

    final = save(plan.steps, "final.ckpt")
    if plan.steps == 0:
        rec = {"step": 0, "loss": None, "loss_avg": None, "bpp_noise": None, "distortion": None}
        rec.update(probe_metrics(encoder, entropy_model, generator, probe_x))
        log.append(rec)
    return final


# ---------------------------------------------------------------------------
# Stage 2: adversarial fine-tune of the generator only.
# ---------------------------------------------------------------------------


def _disc_accuracy(logits_real, logits_fake, fake_class: int) -> float:
    with torch.no_grad():
        pred_real = logits_real.argmax(dim=1)
        pred_fake = logits_fake.argmax(dim=1)
        acc_real = (pred_real != fake_class).float().mean().item()
        acc_fake = (pred_fake == fake_class).float().mean().item()
    return 0.5 * (acc_real + acc_fake)


def run_stage2(
    plan: TrainPlan,
    stage1_ckpt: Checkpoint,
    dataset,
    disc_cfg: DiscConfig,
    run_dir,
    disc_ckpt: Checkpoint | None = None,
) -> Path:
    plan.validate()
    if plan.stage != "2":
        raise ConfigError("run_stage2 requires plan.stage == '2'")
    if not stage1_ckpt.has_section("generator_mse"):
        raise ConfigError("stage 2 requires a stage-1 checkpoint (run stage 1 first)")
    run_dir, ckpt_dir, log = _run_dirs(run_dir)
    codec_cfg = CodecConfig.from_dict(stage1_ckpt.meta["codec_config"])
    _write_plan(run_dir, plan, {"codec_config": codec_cfg.to_dict(), "disc_config": _disc_cfg_dict(disc_cfg)})

    k_m, k_p, beta = plan.effective_weights()
    perceptual = RandomConvFeatures() if k_p != 0 else None

    encoder = Encoder(codec_cfg)
    entropy_model = EntropyModel(
        latent_channels=codec_cfg.latent_channels,
        use_hyperprior=codec_cfg.use_hyperprior,
        hyper_channels=codec_cfg.hyper_channels,
        hyper_width=codec_cfg.hyper_width,
    )
    g1 = Generator(codec_cfg)
    load_module(encoder, stage1_ckpt.section("encoder"))
    load_module(entropy_model, stage1_ckpt.section("entropy"))
    load_module(g1, stage1_ckpt.section("generator_mse"))
    for m in (encoder, entropy_model, g1):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)

    g2 = Generator(codec_cfg)
    g2.load_state_dict(g1.state_dict())

    torch.manual_seed(derive_seed(plan.seed, "stage2_disc_init"))
    disc = SegmentationDiscriminator(disc_cfg)
    if disc_ckpt is not None:
        if not disc_ckpt.has_section("discriminator"):
            raise ConfigError("disc checkpoint lacks a discriminator section")
        load_module(disc, disc_ckpt.section("discriminator"))

    train, heldout = split_holdout(dataset, plan.holdout)
    probe_x = _to_tensor(heldout[: min(8, len(heldout))] or train[:8])
    weights_cache = {s.id: torch.from_numpy(pixel_weights(s.labels)) for s in dataset}

    opt_g = torch.optim.Adam(g2.parameters(), lr=plan.lr, betas=(0.9, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=plan.lr, betas=(0.9, 0.999))

    fake_class = disc_cfg.num_classes  # 0-based channel index of the fake class

    def save(step: int, name: str) -> Path:
        ckpt = Checkpoint(
            meta={
                "format": "semcodec-checkpoint",
                "stage": "2",
                "step": step,
                "seed": plan.seed,
                "codec_config": codec_cfg.to_dict(),
                "disc_config": _disc_cfg_dict(disc_cfg),
                "plan": plan.to_dict(),
            }
        )
        # Frozen components are re-serialized from the live modules so the
        # checkpoint digests witness that training really left them alone.
        ckpt.set_section("encoder", module_arrays(encoder))
        ckpt.set_section("entropy", module_arrays(entropy_model))
        ckpt.set_section("generator_mse", module_arrays(g1))
        ckpt.set_section("generator_gan", module_arrays(g2))
        ckpt.set_section("discriminator", module_arrays(disc))
        ckpt.set_section("opt_stage2_g", optimizer_arrays(opt_g))
        ckpt.set_section("opt_stage2_d", optimizer_arrays(opt_d))
        path = ckpt_dir / name
        ckpt.save(path)
        return path

    for step in range(plan.steps):
        batch = _batch(train, plan, "stage2", step)
        x = _to_tensor(batch)
        labels = _labels_tensor(batch)
        w = torch.stack([weights_cache[s.id] for s in batch])

        with torch.no_grad():
            v = encoder(x)
            cond = entropy_model.condition(v, "round")
            y = quantize(v, "round")
            num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
            bpp_round = float((cond.bits(y).sum() + cond.z_bits).item() / num_pixels)

        x_hat = g2(y)

        # Discriminator update.
        x_hat_d = x_hat.detach()
        logits_real = disc(x, y)
        logits_fake = disc(x_hat_d, y)
        d_loss = discriminator_loss_seg(logits_real, logits_fake, labels, w)
        if plan.mix_coef > 0:
            masks = torch.stack(
                [
                    torch.from_numpy(mix_mask(s.labels, derive_seed(plan.seed, "mix", step, i)))
                    for i, s in enumerate(batch)
                ]
            )
            d_loss = d_loss + plan.mix_coef * mix_consistency(
                lambda img: disc(img, y), x, x_hat_d, masks
            )
        _check_finite(d_loss, step, "2/disc")
        opt_d.param_groups[0]["lr"] = _lr_at(plan, step)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # Generator update.
        logits_fake_g = disc(x_hat, y)
        adv = generator_adv_seg(logits_fake_g, labels, w, beta)
        if k_m != 0 or k_p != 0:
            g_loss = distortion(x, x_hat, k_m, k_p, perceptual) + adv
        else:
            g_loss = adv
        _check_finite(g_loss, step, "2/gen")
        opt_g.param_groups[0]["lr"] = _lr_at(plan, step)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if (step + 1) % plan.cadence == 0 or step + 1 == plan.steps:
            rec = {
                "step": step + 1,
                "g_loss": float(g_loss.item()),
                "g_adv": float(adv.item()),
                "d_loss": float(d_loss.item()),
                "disc_acc": _disc_accuracy(logits_real, logits_fake, fake_class),
                "bpp_round_batch": bpp_round,
            }
            rec.update(probe_metrics(encoder, entropy_model, g2, probe_x))
            log.append(rec)
            save(step + 1, f"step{step + 1:07d}.ckpt")

    return save(plan.steps, "final.ckpt")


# ---------------------------------------------------------------------------
# Discriminator segmentation pretraining.
# ---------------------------------------------------------------------------


def _disc_cfg_dict(disc_cfg: DiscConfig) -> dict:
    d = asdict(disc_cfg)
    d["down_channels"] = list(disc_cfg.down_channels)
    return d


def run_disc_pretrain(plan: TrainPlan, dataset, disc_cfg: DiscConfig, run_dir) -> Path:
    plan.validate()
    if plan.stage != "disc_pretrain":
        raise ConfigError("run_disc_pretrain requires plan.stage == 'disc_pretrain'")
    run_dir, ckpt_dir, log = _run_dirs(run_dir)
    _write_plan(run_dir, plan, {"disc_config": _disc_cfg_dict(disc_cfg)})

    torch.manual_seed(derive_seed(plan.seed, "disc_init"))
    disc = SegmentationDiscriminator(disc_cfg)
    miou = pretrain_segmentation(
        disc,
        dataset,
        steps=plan.steps,
        lr=plan.lr,
        batch_size=plan.batch_size,
        seed=plan.seed,
        holdout=plan.holdout,
    )
    log.append({"step": plan.steps, "miou": float(miou)})

    ckpt = Checkpoint(
        meta={
            "format": "semcodec-checkpoint",
            "stage": "disc_pretrain",
            "step": plan.steps,
            "seed": plan.seed,
            "disc_config": _disc_cfg_dict(disc_cfg),
            "miou": float(miou),
            "plan": plan.to_dict(),
        }
    )
    ckpt.set_section("discriminator", module_arrays(disc))
    path = ckpt_dir / "final.ckpt"
    ckpt.save(path)
    return path


# ---------------------------------------------------------------------------
# Realism head fine-tuning on frozen codec.
# ---------------------------------------------------------------------------


def run_orp(plan: TrainPlan, stage2_ckpt: Checkpoint, dataset, run_dir, head_width: int = 12) -> Path:
    plan.validate()
    if plan.stage != "orp":
        raise ConfigError("run_orp requires plan.stage == 'orp'")
    if not stage2_ckpt.has_section("generator_gan"):
        raise ConfigError("realism stage requires a stage-2 checkpoint (run stage 2 first)")
    run_dir, ckpt_dir, log = _run_dirs(run_dir)
    bundle = bundle_from_checkpoint(stage2_ckpt)
    codec_cfg = bundle.codec_cfg
    _write_plan(run_dir, plan, {"codec_config": codec_cfg.to_dict(), "head_width": head_width})

    frozen_digests = {
        name: stage2_ckpt.section_digest(name)
        for name in ("encoder", "entropy", "generator_gan")
    }

    torch.manual_seed(derive_seed(plan.seed, "head_init"))
    head = ResidualHead(bundle.generator_gan.feature_channels, width=head_width)
    opt = torch.optim.Adam(head.parameters(), lr=plan.lr, betas=(0.9, 0.999))

    train, heldout = split_holdout(dataset, plan.holdout)
    for step in range(plan.steps):
        batch = _batch(train, plan, "orp", step)
        x = _to_tensor(batch)
        with torch.no_grad():
            v = bundle.encoder(x)
            y = quantize(v, "round")
            _g2_out, feats = bundle.generator_gan(y, return_features=True)
        mse_pred = head(feats)
        loss = ((x - mse_pred) ** 2).mean()
        _check_finite(loss, step, "orp")
        opt.param_groups[0]["lr"] = _lr_at(plan, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % plan.cadence == 0 or step + 1 == plan.steps:
            log.append({"step": step + 1, "head_mse": float(loss.item())})

    ckpt = Checkpoint(meta=dict(stage2_ckpt.meta))
    ckpt.arrays = dict(stage2_ckpt.arrays)
    ckpt.meta.update(
        {
            "stage": "orp",
            "step": plan.steps,
            "head_width": head_width,
            "orp_plan": plan.to_dict(),
            "frozen_digests": frozen_digests,
        }
    )
    # Re-serialize the frozen codec from the live modules (see run_stage2).
    ckpt.set_section("encoder", module_arrays(bundle.encoder))
    ckpt.set_section("entropy", module_arrays(bundle.entropy_model))
    ckpt.set_section("generator_gan", module_arrays(bundle.generator_gan))
    ckpt.set_section("residual_head", module_arrays(head))
    ckpt.set_section("opt_orp", optimizer_arrays(opt))
    path = ckpt_dir / "final.ckpt"
    ckpt.save(path)
    return path
