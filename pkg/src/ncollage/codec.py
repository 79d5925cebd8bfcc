"""Quantization, bit packing, the on-disk container and bits-per-pixel accounting.

Container layout (all little-endian)::

    magic        8s   b"NCOLLAGE"
    version      u16  1
    kind         u8   0 = collage, 1 = pifs
    flags        u8   bit0 augmented domains, bit1 rotation auxiliaries, bit2 shared aux
    width        u32  full image width
    height       u32  full image height
    channels     u8
    range_size   u16
    domain_size  u16
    stride       u16
    epsilon      u8   decimal digits (0 for pifs)
    grid_y       u16  blocks per column
    grid_x       u16  blocks per row
    K, N, V      u32  per block; N counts augmented copies for collage, base domains for pifs
    bits_a       u8   collage: width of premultiplied scales; pifs: address width
    bits_b       u8   collage: width of offsets; pifs: 16
    payload_bits u64
    aux_values   u32  number of float32 auxiliary values following the payload

The payload is a stream of integers packed LSB-first within bytes, padded to a
byte boundary. Collage blocks store ``K*(N+V)`` scales in two's complement then
``K`` offsets; PIFS blocks store ``K`` addresses then ``K`` half-float scales and
``K`` half-float offsets. Auxiliary cells follow as raw float32.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from . import raster
from .collage import CollageCode
from .encoders import factorize
from .errors import ArgumentError, FormatError
from .pifs import PifsCode
from .raster import PartitionScheme

MAGIC = b"NCOLLAGE"
VERSION = 1
HEADER = struct.Struct("<8sHBBIIBHHHBHHIIIBBQI")
KIND_COLLAGE, KIND_PIFS = 0, 1
FLAG_AUGMENTED, FLAG_ROTATIONS, FLAG_SHARED_AUX = 1, 2, 4
AUX_BITS = 32
HALF_BITS = 16


@dataclass(frozen=True)
class QuantizationSpec:
    epsilon: int = 3

    def __post_init__(self):
        if self.epsilon not in (2, 3, 4, 5):
            raise ArgumentError(f"epsilon must be one of 2..5, got {self.epsilon}")

    @property
    def scale(self) -> int:
        return 10 ** self.epsilon

    @property
    def max_bits(self) -> int:
        return math.ceil(math.log2(self.scale)) + 2


def quantize_values(v, epsilon: int) -> np.ndarray:
    """Round ``v * 10**epsilon`` half away from zero, clamped inside the open bound (-1, 1)."""
    s = 10 ** epsilon
    v = np.asarray(v, dtype=np.float64)
    q = np.sign(v) * np.floor(np.abs(v) * s + 0.5)
    return np.clip(q, -(s - 1), s - 1).astype(np.int64)


def dequantize_values(q, epsilon: int) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 10 ** epsilon


def bit_width(q) -> int:
    """Sign bit plus enough magnitude bits for the largest |q| actually used."""
    q = np.asarray(q, dtype=np.int64)
    m = int(np.max(np.abs(q))) if q.size else 0
    return m.bit_length() + 1


# --------------------------------------------------------------------------- quantized codes


@dataclass(frozen=True, eq=False)
class QuantizedCollage:
    scheme: PartitionScheme
    width: int
    height: int
    channels: int
    epsilon: int
    qa: np.ndarray  # (K, N+V) int64, premultiplied scales
    qb: np.ndarray  # (K,) int64
    aux: np.ndarray  # (V, r, r) float32
    augmented: bool = False
    aux_mode: str = "fixed"

    def dequantize(self) -> CollageCode:
        p = dequantize_values(self.qa, self.epsilon)
        # row sums of |q| are capped at 10**eps - 1, so |a| = sum|p| < 1 exactly
        gamma, a = factorize(p, 1.0)
        return CollageCode(
            self.scheme, self.width, self.height, self.channels, gamma, a,
            dequantize_values(self.qb, self.epsilon), aux=self.aux.astype(np.float64),
            augmented=self.augmented, aux_mode=self.aux_mode,
        )

    def __eq__(self, other):
        if not isinstance(other, QuantizedCollage):
            return NotImplemented
        return (
            (self.scheme, self.width, self.height, self.channels, self.epsilon, self.augmented, self.aux_mode)
            == (other.scheme, other.width, other.height, other.channels, other.epsilon, other.augmented, other.aux_mode)
            and np.array_equal(self.qa, other.qa)
            and np.array_equal(self.qb, other.qb)
            and self.aux.tobytes() == other.aux.tobytes()
        )


@dataclass(frozen=True, eq=False)
class QuantizedPifs:
    scheme: PartitionScheme
    width: int
    height: int
    channels: int
    domain_index: np.ndarray
    aug: np.ndarray
    a: np.ndarray  # float16
    b: np.ndarray  # float16
    augmented: bool = False

    @property
    def n_augmentations(self) -> int:
        return raster.N_AUGMENTATIONS if self.augmented else 1

    def dequantize(self) -> PifsCode:
        return PifsCode(
            self.scheme, self.width, self.height, self.channels, self.domain_index, self.aug,
            self.a.astype(np.float64), self.b.astype(np.float64), augmented=self.augmented,
        )

    def __eq__(self, other):
        if not isinstance(other, QuantizedPifs):
            return NotImplemented
        return (
            (self.scheme, self.width, self.height, self.channels, self.augmented)
            == (other.scheme, other.width, other.height, other.channels, other.augmented)
            and np.array_equal(self.domain_index, other.domain_index)
            and np.array_equal(self.aug, other.aug)
            and self.a.tobytes() == other.a.tobytes()
            and self.b.tobytes() == other.b.tobytes()
        )


def _cap_row_sums(q: np.ndarray, limit: int) -> np.ndarray:
    """Shrink rows whose sum of |q| exceeds ``limit`` (truncating toward zero)."""
    total = np.abs(q).sum(axis=1)
    over = total > limit
    if np.any(over):
        q = q.copy()
        q[over] = np.trunc(q[over] * limit / total[over, None]).astype(np.int64)
    return q


def quantize_code(code: Union[CollageCode, PifsCode], spec: QuantizationSpec = QuantizationSpec()):
    if isinstance(code, PifsCode):
        a16 = code.a.astype(np.float16)
        # keep |a| < 1 after rounding to half precision
        a16 = np.where(np.abs(a16) >= 1, np.sign(a16) * np.float16(1 - 2**-11), a16).astype(np.float16)
        return QuantizedPifs(
            code.scheme, code.width, code.height, code.channels, code.domain_index.copy(),
            code.aug.copy(), a16, code.b.astype(np.float16), augmented=code.augmented,
        )
    qa = quantize_values(code.premultiplied, spec.epsilon)
    qa = _cap_row_sums(qa, spec.scale - 1)
    qb = quantize_values(code.b, spec.epsilon)
    return QuantizedCollage(
        code.scheme, code.width, code.height, code.channels, spec.epsilon, qa, qb,
        code.aux.astype(np.float32), augmented=code.augmented, aux_mode=code.aux_mode,
    )


# --------------------------------------------------------------------------- bpp


@dataclass(frozen=True)
class BppBreakdown:
    bpp_a: float
    bpp_b: float
    bpp_u: float
    total: float
    terms: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"bpp_a": self.bpp_a, "bpp_b": self.bpp_b, "bpp_u": self.bpp_u, "total": self.total, **self.terms}


def bpp_total(K: int, N: int, V: int, bpp_a: float, bpp_b: float, bpp_u: float) -> BppBreakdown:
    """``K(N+V) bpp_a + K bpp_b + V bpp_u``."""
    total = K * (N + V) * bpp_a + K * bpp_b + V * bpp_u
    return BppBreakdown(bpp_a, bpp_b, bpp_u, total, {"K": K, "N": N, "V": V})


def bpp_collage(K: int, N: int, V: int, bits_a: int, bits_b: int, aux_pixels: int,
                image_pixels: int, amortize_over: int = 1) -> BppBreakdown:
    """Rate of a Collage code.

    ``aux_pixels`` is the size ``h*w*c`` of one auxiliary cell; auxiliary cells
    cost 32 bits per value, shared by ``amortize_over`` images.
    """
    if image_pixels <= 0 or amortize_over < 1:
        raise ArgumentError("image_pixels must be positive and amortize_over >= 1")
    return bpp_total(
        K, N, V, bits_a / image_pixels, bits_b / image_pixels,
        AUX_BITS * aux_pixels / (image_pixels * amortize_over),
    )


def address_bits(candidates: int) -> int:
    """``ceil(log2(candidates))``; a single candidate needs no address."""
    return (int(candidates) - 1).bit_length()


def bpp_pifs(K: int, N: int, image_pixels: int, augmentations: int = 1) -> BppBreakdown:
    """Half-float scale and offset plus a domain address per range."""
    if K < 1 or N < 1 or image_pixels <= 0:
        raise ArgumentError("K, N must be >= 1 and image_pixels positive")
    per_range = 2 * HALF_BITS + address_bits(N * augmentations)
    total = K * per_range / image_pixels
    return BppBreakdown(0.0, 0.0, 0.0, total, {"K": K, "N": N, "bits_per_range": per_range})


# --------------------------------------------------------------------------- bit packing


def pack_bits(fields: Sequence[tuple[np.ndarray, int]]) -> tuple[bytes, int]:
    """Pack ``(values, width)`` pairs LSB-first; returns ``(bytes, n_bits)``."""
    chunks = []
    for values, width in fields:
        v = np.asarray(values, dtype=np.int64).reshape(-1)
        if width == 0 or v.size == 0:
            continue
        mask = (1 << width) - 1
        u = v & mask
        chunks.append(((u[:, None] >> np.arange(width)) & 1).astype(np.uint8).reshape(-1))
    bits = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint8)
    return np.packbits(bits, bitorder="little").tobytes(), int(bits.size)


class BitReader:
    def __init__(self, data: bytes, n_bits: int):
        self.bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:n_bits]
        self.pos = 0

    def read(self, count: int, width: int, signed: bool) -> np.ndarray:
        if width == 0:
            return np.zeros(count, dtype=np.int64)
        end = self.pos + count * width
        if end > self.bits.size:
            raise FormatError("payload shorter than header arithmetic")
        chunk = self.bits[self.pos : end].reshape(count, width).astype(np.int64)
        self.pos = end
        v = (chunk << np.arange(width)).sum(axis=1)
        if signed:
            v = np.where(v >= 1 << (width - 1), v - (1 << width), v)
        return v


# --------------------------------------------------------------------------- container


@dataclass(frozen=True, eq=False)
class CodeContainer:
    kind: Literal["collage", "pifs"]
    width: int
    height: int
    grid: tuple[int, int]
    codes: list  # QuantizedCollage | QuantizedPifs, row-major over blocks
    version: int = VERSION

    @property
    def first(self):
        return self.codes[0]

    @property
    def scheme(self) -> PartitionScheme:
        return self.first.scheme

    @property
    def channels(self) -> int:
        return self.first.channels

    @property
    def epsilon(self) -> int:
        return self.first.epsilon if self.kind == "collage" else 0

    @property
    def K(self) -> int:
        c = self.first
        return c.scheme.ranges_per_plane(c.width, c.height) * c.channels

    @property
    def N(self) -> int:
        c = self.first
        if self.kind == "pifs":
            return c.scheme.domains_per_plane(c.width, c.height)
        return c.qa.shape[1] - self.V

    @property
    def V(self) -> int:
        if self.kind == "pifs":
            return 0
        c = self.first
        return 3 if c.aux_mode == "rotations" else c.aux.shape[0]

    @property
    def shared_aux(self) -> bool:
        if self.kind == "pifs" or len(self.codes) == 1:
            return True
        ref = self.first.aux.tobytes()
        return all(c.aux.tobytes() == ref for c in self.codes[1:])

    @property
    def bit_widths(self) -> tuple[int, int]:
        if self.kind == "pifs":
            return address_bits(self.N * self.first.n_augmentations), HALF_BITS
        qa = np.concatenate([c.qa.reshape(-1) for c in self.codes])
        qb = np.concatenate([c.qb.reshape(-1) for c in self.codes])
        return bit_width(qa), bit_width(qb)

    @property
    def aux_values(self) -> int:
        if self.kind == "pifs":
            return 0
        per = self.first.aux.size
        return per if self.shared_aux else per * len(self.codes)

    @property
    def payload_bits(self) -> int:
        ba, bb = self.bit_widths
        n = len(self.codes)
        if self.kind == "pifs":
            return n * self.K * (ba + 2 * HALF_BITS)
        return n * (self.K * (self.N + self.V) * ba + self.K * bb)

    @property
    def image_pixels(self) -> int:
        return self.width * self.height * self.channels

    def bpp(self) -> float:
        """Payload plus auxiliary bits per pixel value; header excluded."""
        return (self.payload_bits + AUX_BITS * self.aux_values) / self.image_pixels

    def breakdown(self) -> BppBreakdown:
        ba, bb = self.bit_widths
        block_pixels = self.image_pixels // len(self.codes)
        if self.kind == "pifs":
            return bpp_pifs(self.K, self.N, block_pixels, self.first.n_augmentations)
        r = self.scheme.range_size
        aux_px = r * r if self.first.aux_mode == "fixed" else 0
        m = len(self.codes) if self.shared_aux else 1
        return bpp_collage(self.K, self.N, self.V, ba, bb, aux_px, block_pixels, m)

    def dequantize(self) -> list:
        return [c.dequantize() for c in self.codes]

    def header(self) -> dict:
        ba, bb = self.bit_widths
        return {
            "kind": self.kind, "version": self.version, "width": self.width, "height": self.height,
            "channels": self.channels, "range_size": self.scheme.range_size,
            "domain_size": self.scheme.domain_size, "domain_stride": self.scheme.domain_stride,
            "epsilon": self.epsilon, "grid": list(self.grid), "K": self.K, "N": self.N, "V": self.V,
            "bits_a": ba, "bits_b": bb, "augmented": bool(self.first.augmented),
            "aux_mode": getattr(self.first, "aux_mode", "none"), "shared_aux": self.shared_aux,
            "payload_bits": self.payload_bits, "aux_values": self.aux_values, "bpp": self.bpp(),
        }

    # ------------------------------------------------------------------ bytes

    def to_bytes(self) -> bytes:
        ba, bb = self.bit_widths
        first = self.first
        flags = FLAG_AUGMENTED if first.augmented else 0
        if self.kind == "collage" and first.aux_mode == "rotations":
            flags |= FLAG_ROTATIONS
        if self.shared_aux:
            flags |= FLAG_SHARED_AUX
        s = self.scheme
        head = HEADER.pack(
            MAGIC, self.version, KIND_PIFS if self.kind == "pifs" else KIND_COLLAGE, flags,
            self.width, self.height, self.channels, s.range_size, s.domain_size, s.domain_stride,
            self.epsilon, self.grid[0], self.grid[1], self.K, self.N, self.V, ba, bb,
            self.payload_bits, self.aux_values,
        )
        fields = []
        for c in self.codes:
            if self.kind == "pifs":
                fields += [
                    (c.domain_index * c.n_augmentations + c.aug, ba),
                    (c.a.view(np.uint16), HALF_BITS),
                    (c.b.view(np.uint16), HALF_BITS),
                ]
            else:
                fields += [(c.qa, ba), (c.qb, bb)]
        payload, n_bits = pack_bits(fields)
        assert n_bits == self.payload_bits
        if self.kind == "pifs" or not self.aux_values:
            aux = b""
        elif self.shared_aux:
            aux = first.aux.astype("<f4").tobytes()
        else:
            aux = b"".join(c.aux.astype("<f4").tobytes() for c in self.codes)
        return head + payload + aux

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodeContainer":
        if len(data) < HEADER.size:
            raise FormatError("file shorter than container header")
        (magic, version, kind, flags, width, height, channels, rs, ds, st, eps, gy, gx,
         K, N, V, ba, bb, n_bits, n_aux) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        if kind not in (KIND_COLLAGE, KIND_PIFS) or gy < 1 or gx < 1 or channels not in (1, 3):
            raise FormatError("corrupt header fields")
        if width % gx or height % gy:
            raise FormatError("block grid does not divide image")
        try:
            scheme = PartitionScheme(rs, ds, st)
            scheme.validate(width // gx, height // gy)
        except ValueError as exc:
            raise FormatError(f"invalid partition in header: {exc}") from None
        bw, bh = width // gx, height // gy
        n_blocks = gy * gx
        augmented = bool(flags & FLAG_AUGMENTED)
        if K != scheme.ranges_per_plane(bw, bh) * channels:
            raise FormatError("range count inconsistent with geometry")
        pay_bytes = (n_bits + 7) // 8
        expect = HEADER.size + pay_bytes + 4 * n_aux
        if len(data) != expect:
            raise FormatError(f"container is {len(data)} bytes, header implies {expect}")
        reader = BitReader(data[HEADER.size : HEADER.size + pay_bytes], n_bits)
        codes = []
        if kind == KIND_PIFS:
            n_aug = raster.N_AUGMENTATIONS if augmented else 1
            if N != scheme.domains_per_plane(bw, bh) or ba != address_bits(N * n_aug) or bb != HALF_BITS:
                raise FormatError("PIFS header fields inconsistent")
            if n_bits != n_blocks * K * (ba + 2 * HALF_BITS) or n_aux:
                raise FormatError("PIFS payload length inconsistent with header")
            for _ in range(n_blocks):
                addr = reader.read(K, ba, signed=False)
                a = reader.read(K, HALF_BITS, signed=False).astype(np.uint16).view(np.float16)
                b = reader.read(K, HALF_BITS, signed=False).astype(np.uint16).view(np.float16)
                if np.any(addr >= N * n_aug):
                    raise FormatError("domain address out of range")
                codes.append(QuantizedPifs(scheme, bw, bh, channels, addr // n_aug, addr % n_aug, a, b, augmented))
            return cls("pifs", width, height, (gy, gx), codes, version)
        aux_mode = "rotations" if flags & FLAG_ROTATIONS else "fixed"
        if eps not in (2, 3, 4, 5) or not (1 <= ba <= 64 and 1 <= bb <= 64):
            raise FormatError("invalid quantization fields")
        n_dom = scheme.domains_per_plane(bw, bh) * (raster.N_AUGMENTATIONS if augmented else 1)
        if N != n_dom or (aux_mode == "rotations" and V != 3):
            raise FormatError("domain counts inconsistent with geometry")
        if n_bits != n_blocks * (K * (N + V) * ba + K * bb):
            raise FormatError("payload length inconsistent with header")
        r2 = rs * rs
        shared = bool(flags & FLAG_SHARED_AUX)
        want_aux = 0 if aux_mode == "rotations" else V * r2 * (1 if shared else n_blocks)
        if n_aux != want_aux:
            raise FormatError("auxiliary size inconsistent with header")
        aux_all = np.frombuffer(data, dtype="<f4", count=n_aux, offset=HEADER.size + pay_bytes).astype(np.float32)
        for i in range(n_blocks):
            qa = reader.read(K * (N + V), ba, signed=True).reshape(K, N + V)
            qb = reader.read(K, bb, signed=True)
            if aux_mode == "rotations":
                aux = np.zeros((0, rs, rs), dtype=np.float32)
            elif shared:
                aux = aux_all.reshape(V, rs, rs)
            else:
                aux = aux_all[i * V * r2 : (i + 1) * V * r2].reshape(V, rs, rs)
            lim = 10**eps - 1
            if np.any(np.abs(qa).sum(axis=1) > lim) or np.any(np.abs(qb) > lim):
                raise FormatError("quantized values exceed the declared precision")
            codes.append(QuantizedCollage(scheme, bw, bh, channels, eps, qa, qb, aux, augmented, aux_mode))
        return cls("collage", width, height, (gy, gx), codes, version)


def make_container(codes, spec: QuantizationSpec = QuantizationSpec(), *, width=None, height=None) -> CodeContainer:
    """Quantize one code, or a row-major list of equal-size block codes, into a container."""
    if not isinstance(codes, (list, tuple)):
        codes = [codes]
    if not codes:
        raise ArgumentError("no codes to store")
    q = [quantize_code(c, spec) for c in codes]
    bw, bh = q[0].width, q[0].height
    width = width or bw
    height = height or bh
    if width % bw or height % bh or (width // bw) * (height // bh) != len(q):
        raise ArgumentError("block codes do not tile the stated image size")
    kinds = {type(c) for c in q}
    if len(kinds) != 1 or any(c.width != bw or c.height != bh or c.scheme != q[0].scheme for c in q):
        raise ArgumentError("block codes must share kind, size and scheme")
    kind = "pifs" if isinstance(q[0], QuantizedPifs) else "collage"
    return CodeContainer(kind, width, height, (height // bh, width // bw), q)


def serialize(codes, spec: QuantizationSpec, path: str | os.PathLike, *, width=None, height=None) -> CodeContainer:
    container = make_container(codes, spec, width=width, height=height)
    with open(path, "wb") as fh:
        fh.write(container.to_bytes())
    return container


def deserialize(path: str | os.PathLike) -> CodeContainer:
    with open(path, "rb") as fh:
        return CodeContainer.from_bytes(fh.read())
