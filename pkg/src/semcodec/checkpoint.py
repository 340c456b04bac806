"""Versioned checkpoint container with deterministic serialization.

A checkpoint holds a JSON metadata block (configs, stage, step, seed) plus
named arrays grouped into sections ("encoder/...", "entropy/...", ...).
Serialization is fully deterministic: sorted keys, fixed encoding, no
timestamps, so identical training runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import CodecConfig, Encoder, Generator
from .discriminator import DiscConfig, SegmentationDiscriminator
from .entropy import EntropyModel
from .errors import ConfigError, CorruptStreamError
from .realism import ResidualHead

MAGIC = b"SCKP"
VERSION = 1

SECTIONS = (
    "encoder",
    "entropy",
    "generator_mse",
    "generator_gan",
    "discriminator",
    "residual_head",
)


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict = field(default_factory=dict)

    # -- container ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<H", VERSION)
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out += struct.pack("<I", len(meta))
        out += meta
        names = sorted(self.arrays)
        out += struct.pack("<I", len(names))
        for name in names:
            a = np.ascontiguousarray(self.arrays[name])
            nb = name.encode()
            dt = a.dtype.str.encode()
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<B", len(dt)) + dt
            out += struct.pack("<B", a.ndim)
            for d in a.shape:
                out += struct.pack("<I", d)
            raw = a.tobytes()
            out += struct.pack("<Q", len(raw))
            out += raw
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        if bytes(view[:4]) != MAGIC:
            raise CorruptStreamError("not a checkpoint file")
        (version,) = struct.unpack_from("<H", view, 4)
        if version != VERSION:
            raise CorruptStreamError(f"unsupported checkpoint version {version}")
        pos = 6
        (meta_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        meta = json.loads(bytes(view[pos : pos + meta_len]).decode())
        pos += meta_len
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode()
            pos += name_len
            (dt_len,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dtype = np.dtype(bytes(view[pos : pos + dt_len]).decode())
            pos += dt_len
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos) if ndim else ()
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", view, pos)
            pos += 8
            a = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
            arrays[name] = a
        return cls(meta=meta, arrays=arrays)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"checkpoint not found: {p}")
        return cls.from_bytes(p.read_bytes())

    # -- sections ----------------------------------------------------------

    def set_section(self, prefix: str, arrays: dict) -> None:
        self.arrays = {k: v for k, v in self.arrays.items() if not k.startswith(prefix + "/")}
        for name, a in arrays.items():
            self.arrays[f"{prefix}/{name}"] = a

    def section(self, prefix: str) -> dict:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}

    def has_section(self, prefix: str) -> bool:
        return any(k.startswith(prefix + "/") for k in self.arrays)

    def section_digest(self, prefix: str) -> str:
        h = hashlib.blake2b(digest_size=16)
        sec = self.section(prefix)
        for name in sorted(sec):
            a = np.ascontiguousarray(sec[name])
            h.update(name.encode())
            h.update(a.dtype.str.encode())
            h.update(repr(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


def module_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state, strict=True)


# ---------------------------------------------------------------------------
# Model bundle: the live modules a checkpoint describes.
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    codec_cfg: CodecConfig
    encoder: Encoder
    entropy_model: EntropyModel
    generator_mse: Generator
    generator_gan: Generator | None = None
    discriminator: SegmentationDiscriminator | None = None
    residual_head: ResidualHead | None = None
    meta: dict = field(default_factory=dict)

    @property
    def decode_generator(self) -> Generator:
        """The generator used at decode time: the GAN one when available."""
        return self.generator_gan if self.generator_gan is not None else self.generator_mse


def bundle_from_checkpoint(ckpt: Checkpoint) -> ModelBundle:
    """Instantiate all modules a checkpoint carries."""
    codec_cfg = CodecConfig.from_dict(ckpt.meta["codec_config"])
    encoder = Encoder(codec_cfg)
    generator_mse = Generator(codec_cfg)
    entropy_model = EntropyModel(
        latent_channels=codec_cfg.latent_channels,
        use_hyperprior=codec_cfg.use_hyperprior,
        hyper_channels=codec_cfg.hyper_channels,
        hyper_width=codec_cfg.hyper_width,
    )
    for name in ("encoder", "entropy", "generator_mse"):
        if not ckpt.has_section(name):
            raise ConfigError(f"checkpoint lacks required section {name!r}")
    load_module(encoder, ckpt.section("encoder"))
    load_module(entropy_model, ckpt.section("entropy"))
    load_module(generator_mse, ckpt.section("generator_mse"))

    generator_gan = None
    if ckpt.has_section("generator_gan"):
        generator_gan = Generator(codec_cfg)
        load_module(generator_gan, ckpt.section("generator_gan"))

    discriminator = None
    if ckpt.has_section("discriminator"):
        disc_cfg = DiscConfig(**{**ckpt.meta["disc_config"], "down_channels": tuple(ckpt.meta["disc_config"]["down_channels"])})
        discriminator = SegmentationDiscriminator(disc_cfg)
        load_module(discriminator, ckpt.section("discriminator"))

    residual_head = None
    if ckpt.has_section("residual_head"):
        width = int(ckpt.meta.get("head_width", 12))
        residual_head = ResidualHead(generator_mse.feature_channels, width=width)
        load_module(residual_head, ckpt.section("residual_head"))

    for module in filter(None, (encoder, entropy_model, generator_mse, generator_gan, discriminator, residual_head)):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    return ModelBundle(
        codec_cfg=codec_cfg,
        encoder=encoder,
        entropy_model=entropy_model,
        generator_mse=generator_mse,
        generator_gan=generator_gan,
        discriminator=discriminator,
        residual_head=residual_head,
        meta=dict(ckpt.meta),
    )
