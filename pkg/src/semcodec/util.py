"""Seeding and digest helpers used throughout the toolkit."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Derive a 63-bit seed from a base seed and arbitrary context parts.

    Stable across processes and independent of evaluation order, so parallel
    consumers (per-sample generation, per-step noise) stay reproducible.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)


def rng_for(*parts) -> np.random.Generator:
    """NumPy generator seeded from derived context parts."""
    return np.random.default_rng(derive_seed(*parts))


def torch_gen_for(*parts) -> torch.Generator:
    """Torch CPU generator seeded from derived context parts."""
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(*parts))
    return g


def array_digest(arrays: dict) -> str:
    """Hex digest over named arrays; canonical order, dtype and shape aware."""
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name]))
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_digest(module: torch.nn.Module) -> str:
    """Digest of a module's parameters and buffers, by canonical name."""
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    return array_digest(state)


def tensor_digest(t: torch.Tensor) -> str:
    return array_digest({"t": t.detach().cpu().numpy()})
