"""Lossless bitstream production: range coder plus the container format.

The coder is a carry-less byte-oriented range coder (32-bit state, 16-bit
CDF precision). Symbols are coded as offsets from a per-element integer
center under quantized Gaussian CDF tables binned by scale; offsets outside
a bin's window use an escape symbol followed by a sign bit and an
Exp-Golomb coded excess, so no integer value can fail to encode.

Container layout (little-endian):
  magic "EGIC" | version u8 | model digest u64 | width u16 | height u16 |
  latent h,w,C u16 x3 | hyper h,w,C u16 x3 (zeros if absent) |
  payload length u32 | payload | CRC32 u32 over everything before it.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
import torch

from .entropy import CDF_PRECISION, EntropyModel, coding_tables, symbol_grid
from .errors import ContractViolation, CorruptStreamError, IncompatibleModelError

MAGIC = b"EGIC"
VERSION = 1
_HEADER = struct.Struct("<4sBQHHHHHHHHI")

_TOP = 1 << 24
_BOT = 1 << 16
_MASK = (1 << 32) - 1

_BIT_TOTAL = 1 << CDF_PRECISION
_BIT_HALF = _BIT_TOTAL >> 1


class RangeEncoder:
    """Single-use encoder state machine; call finish() exactly once."""

    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += cum * r
        self.range = freq * r
        low, rng, out = self.low, self.range, self.out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def encode_bit(self, bit: int) -> None:
        self.encode(_BIT_HALF if bit else 0, _BIT_HALF, _BIT_TOTAL)

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    """Single-use decoder over a payload produced by RangeEncoder."""

    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        # Reads past the end return zeros; the flush already wrote all
        # bytes a valid stream needs.
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.pos += 1
        return 0

    def decode_cum(self, total: int) -> int:
        self._r = self.range // total
        cum = (self.code - self.low) // self._r
        if cum >= total:
            raise CorruptStreamError("range decoder state outside coded interval")
        return cum

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.low += cum * r
        self.range = freq * r
        low, rng, code = self.low, self.range, self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_bit(self) -> int:
        cum = self.decode_cum(_BIT_TOTAL)
        bit = 1 if cum >= _BIT_HALF else 0
        self.consume(_BIT_HALF if bit else 0, _BIT_HALF)
        return bit


def _encode_exp_golomb(enc: RangeEncoder, n: int) -> None:
    m = n + 1
    k = m.bit_length() - 1
    for _ in range(k):
        enc.encode_bit(0)
    for i in range(k, -1, -1):
        enc.encode_bit((m >> i) & 1)


def _decode_exp_golomb(dec: RangeDecoder) -> int:
    k = 0
    while dec.decode_bit() == 0:
        k += 1
        if k > 64:
            raise CorruptStreamError("runaway Exp-Golomb prefix")
    m = 1
    for _ in range(k):
        m = (m << 1) | dec.decode_bit()
    return m - 1


def _encode_plane(enc: RangeEncoder, values, centers, sbins, obins, tables) -> None:
    for v, c, sb, ob in zip(values.tolist(), centers.tolist(), sbins.tolist(), obins.tolist()):
        t = tables[sb][ob]
        cdf = t.cdf
        k = t.half_width
        off = v - c
        if -k <= off <= k:
            s = off + k
            enc.encode(cdf[s], cdf[s + 1] - cdf[s], cdf[-1])
        else:
            s = 2 * k + 1
            enc.encode(cdf[s], cdf[s + 1] - cdf[s], cdf[-1])
            enc.encode_bit(1 if off > 0 else 0)
            _encode_exp_golomb(enc, abs(off) - k - 1)


def _decode_plane(dec: RangeDecoder, centers, sbins, obins, tables) -> np.ndarray:
    out = np.empty(len(centers), dtype=np.int64)
    centers_l = centers.tolist()
    sbins_l = sbins.tolist()
    obins_l = obins.tolist()
    for i in range(len(centers_l)):
        t = tables[sbins_l[i]][obins_l[i]]
        cdf = t.cdf
        k = t.half_width
        cum = dec.decode_cum(cdf[-1])
        s = bisect_right(cdf, cum) - 1
        dec.consume(cdf[s], cdf[s + 1] - cdf[s])
        if s <= 2 * k:
            off = s - k
        else:
            sign = dec.decode_bit()
            excess = _decode_exp_golomb(dec)
            mag = k + 1 + excess
            off = mag if sign else -mag
        out[i] = centers_l[i] + off
    return out


@dataclass(frozen=True)
class Bitstream:
    """A decodable compressed representation of one image."""

    digest: int
    image_size: tuple  # (height, width)
    latent_shape: tuple  # (h, w, C)
    hyper_shape: tuple  # (h, w, C), all zeros when no hyper-latent
    payload: bytes

    def to_bytes(self) -> bytes:
        h, w = self.image_size
        lh, lw, lc = self.latent_shape
        zh, zw, zc = self.hyper_shape
        head = _HEADER.pack(
            MAGIC, VERSION, self.digest, w, h, lh, lw, lc, zh, zw, zc, len(self.payload)
        )
        body = head + self.payload
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < _HEADER.size + 4:
            raise CorruptStreamError("stream shorter than header")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptStreamError("CRC mismatch")
        magic, version, digest, w, h, lh, lw, lc, zh, zw, zc, plen = _HEADER.unpack(
            body[: _HEADER.size]
        )
        if magic != MAGIC:
            raise CorruptStreamError("bad magic")
        if version != VERSION:
            raise IncompatibleModelError(f"unsupported stream version {version}")
        payload = body[_HEADER.size :]
        if len(payload) != plen:
            raise CorruptStreamError("payload length mismatch")
        return cls(
            digest=digest,
            image_size=(h, w),
            latent_shape=(lh, lw, lc),
            hyper_shape=(zh, zw, zc),
            payload=payload,
        )

    @property
    def num_bytes(self) -> int:
        return _HEADER.size + len(self.payload) + 4


def bpp(stream: Bitstream) -> float:
    """Bits per source pixel of the serialized stream."""
    h, w = stream.image_size
    return 8.0 * stream.num_bytes / (h * w)


def _to_numpy_int(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if not np.all(a == np.round(a)):
        raise ContractViolation("latent must be integer-valued before coding")
    return a.astype(np.int64)


def encode_stream(
    y,
    model: EntropyModel,
    image_size: tuple,
    z=None,
) -> Bitstream:
    """Entropy-code an integer latent (and its hyper-latent) into a Bitstream.

    With a hyperprior, ``z`` is coded first under its factorized prior; the
    conditional means/scales for ``y`` are then rebuilt from the coded ``z``
    exactly as the decoder will rebuild them.
    """
    y_np = _to_numpy_int(y)
    if y_np.ndim != 4 or y_np.shape[0] != 1:
        raise ContractViolation("expected a single-sample (1, C, h, w) latent")
    _, c, lh, lw = y_np.shape
    tables = coding_tables()
    enc = RangeEncoder()

    if model.use_hyperprior:
        if z is None:
            raise ContractViolation("hyperprior model requires the hyper-latent")
        z_np = _to_numpy_int(z)
        _, zc, zh, zw = z_np.shape
        z_t = torch.from_numpy(z_np).to(torch.float32)
        zm, zs = model.z_prior.params_for(z_t)
        zv, zcen, zsb, zob = symbol_grid(z_np, zm.detach().numpy(), zs.detach().numpy())
        _encode_plane(enc, zv, zcen, zsb, zob, tables)
        with torch.no_grad():
            cond = model.condition_from_z(z_t, y_np.shape)
        hyper_shape = (zh, zw, zc)
    else:
        if z is not None:
            raise ContractViolation("factorized model takes no hyper-latent")
        with torch.no_grad():
            cond = model.condition(torch.from_numpy(y_np).to(torch.float32), "round")
        hyper_shape = (0, 0, 0)

    if y_np.size:
        yv, ycen, ysb, yob = symbol_grid(
            y_np, cond.means.detach().numpy(), cond.scales.detach().numpy()
        )
        _encode_plane(enc, yv, ycen, ysb, yob, tables)

    payload = enc.finish() if (y_np.size or (model.use_hyperprior and z_np.size)) else b""
    return Bitstream(
        digest=model.digest(),
        image_size=tuple(int(v) for v in image_size),
        latent_shape=(lh, lw, c),
        hyper_shape=hyper_shape,
        payload=payload,
    )


def decode_stream(stream: Bitstream, model: EntropyModel):
    """Exact inverse of encode_stream; returns (y, z) integer tensors."""
    if stream.digest != model.digest():
        raise IncompatibleModelError(
            "bitstream was produced under a different entropy model"
        )
    lh, lw, c = stream.latent_shape
    zh, zw, zc = stream.hyper_shape
    dec = RangeDecoder(stream.payload)
    tables = coding_tables()

    z_t = None
    if model.use_hyperprior:
        z_shape = (1, zc, zh, zw)
        z_probe = torch.zeros(z_shape, dtype=torch.float32)
        zm, zs = model.z_prior.params_for(z_probe)
        _, zcen, zsb, zob = symbol_grid(
            np.zeros(z_shape, dtype=np.int64), zm.detach().numpy(), zs.detach().numpy()
        )
        zvals = _decode_plane(dec, zcen, zsb, zob, tables)
        z_t = torch.from_numpy(zvals.reshape(z_shape)).to(torch.float32)
        with torch.no_grad():
            cond = model.condition_from_z(z_t, (1, c, lh, lw))
        means = cond.means.detach().numpy()
        scales = cond.scales.detach().numpy()
    else:
        y_probe = torch.zeros((1, c, lh, lw), dtype=torch.float32)
        with torch.no_grad():
            cond = model.condition(y_probe, "round")
        means = cond.means.detach().numpy()
        scales = cond.scales.detach().numpy()

    y_shape = (1, c, lh, lw)
    if c == 0 or lh == 0 or lw == 0:
        y_t = torch.zeros(y_shape, dtype=torch.float32)
    else:
        _, ycen, ysb, yob = symbol_grid(np.zeros(y_shape, dtype=np.int64), means, scales)
        yvals = _decode_plane(dec, ycen, ysb, yob, tables)
        y_t = torch.from_numpy(yvals.reshape(y_shape)).to(torch.float32)
    return y_t, z_t
