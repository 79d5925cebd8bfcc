"""Raster images, netpbm I/O, tiling partitions, pooling and domain augmentations.

Images are stored channel-planar as float64 arrays of shape ``(channels, height, width)``.
Range cells are numbered row-major inside each channel plane, planes in order, so
range ``k`` lives in channel ``k // (K / channels)``.

Augmentation ids: 0 identity, 1-3 clockwise rotations by 90/180/270 degrees,
4-7 the value-negated versions of ids 0-3.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParseError, PartitionError, ShapeError

N_AUGMENTATIONS = 8


@dataclass(frozen=True, eq=False)
class RasterImage:
    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if self.channels not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {self.channels}")
        if data.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"data has {data.size} values, expected {self.width}x{self.height}x{self.channels}"
            )
        object.__setattr__(self, "data", data.reshape(self.channels, self.height, self.width))

    @classmethod
    def from_array(cls, arr) -> "RasterImage":
        """Wrap an ``(H, W)`` or ``(C, H, W)`` array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ShapeError(f"expected 2-D or 3-D array, got shape {arr.shape}")
        return cls(arr.shape[2], arr.shape[1], arr.shape[0], arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def size(self) -> int:
        return self.data.size

    def vector(self) -> np.ndarray:
        """Flat row-major, channel-planar view of the pixels."""
        return self.data.reshape(-1)

    def copy(self) -> "RasterImage":
        return RasterImage(self.width, self.height, self.channels, self.data.copy())

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class PartitionScheme:
    range_size: int
    domain_size: int
    domain_stride: int

    def __post_init__(self):
        if self.range_size < 1 or self.domain_size < 1 or self.domain_stride < 1:
            raise PartitionError(f"cell sizes and stride must be positive: {self}")
        if self.domain_size < self.range_size:
            raise PartitionError("domain_size must be >= range_size")
        if self.domain_stride > self.domain_size:
            raise PartitionError("domain_stride must not exceed domain_size")

    @property
    def pool_factor(self) -> int:
        return self.domain_size // self.range_size

    def validate(self, width: int, height: int) -> None:
        r, d = self.range_size, self.domain_size
        if width % r or height % r:
            raise PartitionError(f"range_size {r} does not divide {width}x{height}")
        if d % r:
            raise PartitionError(f"pooling factor {d}/{r} is not integral")
        if d > width or d > height:
            raise PartitionError(f"domain_size {d} exceeds image {width}x{height}")

    def ranges_per_plane(self, width: int, height: int) -> int:
        return (width // self.range_size) * (height // self.range_size)

    def domain_grid(self, width: int, height: int) -> tuple[int, int]:
        d, s = self.domain_size, self.domain_stride
        return (height - d) // s + 1, (width - d) // s + 1

    def domains_per_plane(self, width: int, height: int) -> int:
        ny, nx = self.domain_grid(width, height)
        return ny * nx

    def scaled(self, s: int) -> "PartitionScheme":
        return PartitionScheme(self.range_size * s, self.domain_size * s, self.domain_stride * s)


class RangeCell(NamedTuple):
    index: int
    channel: int
    row: int
    col: int
    size: int


@dataclass(frozen=True, eq=False)
class DomainBank:
    """Pooled domain cells, ``cells`` has shape ``(channels, M, r, r)``.

    ``provenance[i] = (domain_index, augmentation_id)`` for cell ``i``.
    """

    cells: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return self.cells.shape[1]

    @property
    def augmented(self) -> bool:
        return bool(np.any(self.provenance[:, 1] != 0))


# --------------------------------------------------------------------------- netpbm


def _read_header(buf: bytes) -> tuple[list[bytes], int]:
    """Return the 4 header tokens and the payload offset."""
    tokens: list[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < 4:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise ParseError("truncated header")
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    if i >= n or not buf[i : i + 1].isspace():
        raise ParseError("missing whitespace after maxval")
    return tokens, i + 1


def load_image(path: str | os.PathLike, format: str | None = None) -> RasterImage:
    """Read a binary PGM (P5) or PPM (P6) file into [0, 1] values."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _read_header(buf)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported netpbm magic {magic!r}")
    if format is not None and {"PGM": b"P5", "PPM": b"P6"}.get(format.upper()) != magic:
        raise ParseError(f"file magic {magic!r} does not match requested format {format}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"non-integer header field: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise ParseError(f"bad header values {width}x{height} maxval={maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - offset < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - offset}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    # interleaved (H, W, C) on disk -> planar (C, H, W)
    data = raw.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / maxval
    return RasterImage(width, height, channels, data)


def to_bytes8(img: RasterImage) -> np.ndarray:
    """Clamp to [0, 1] and scale to 0..255, rounding half away from zero."""
    v = np.clip(img.data, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def save_image(img: RasterImage, path: str | os.PathLike, format: str | None = None) -> None:
    if format is None:
        format = "PGM" if img.channels == 1 else "PPM"
    format = format.upper()
    if (format == "PGM") != (img.channels == 1) or format not in ("PGM", "PPM"):
        raise ShapeError(f"cannot write {img.channels}-channel image as {format}")
    magic = b"P5" if format == "PGM" else b"P6"
    payload = to_bytes8(img).transpose(1, 2, 0).tobytes()
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header + payload)


# --------------------------------------------------------------------------- array kernels
# These operate on the trailing (C, H, W) axes and broadcast over any leading batch axes.


def range_blocks(arr: np.ndarray, r: int) -> np.ndarray:
    """``(..., C, H, W)`` -> ``(..., C, Kp, r, r)`` in row-major cell order."""
    *lead, c, h, w = arr.shape
    x = arr.reshape(*lead, c, h // r, r, w // r, r)
    x = np.moveaxis(x, -3, -2)  # (..., C, H/r, W/r, r, r)
    return x.reshape(*lead, c, (h // r) * (w // r), r, r)


def assemble_ranges(blocks: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`range_blocks`."""
    *lead, c, kp, r, _ = blocks.shape
    x = blocks.reshape(*lead, c, height // r, width // r, r, r)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, c, height, width)


def pool(cells: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool the last two axes by an integer factor.

    Block members are accumulated in row-major order, so the result matches a
    plain sequential loop bit for bit.
    """
    if factor == 1:
        return cells
    acc = np.zeros(cells.shape[:-2] + (cells.shape[-2] // factor, cells.shape[-1] // factor))
    for u in range(factor):
        for v in range(factor):
            acc = acc + cells[..., u::factor, v::factor]
    return acc / (factor * factor)


def pooled_domains(arr: np.ndarray, scheme: PartitionScheme) -> np.ndarray:
    """``(..., C, H, W)`` -> pooled domain cells ``(..., C, N, r, r)``."""
    d, s = scheme.domain_size, scheme.domain_stride
    win = sliding_window_view(arr, (d, d), axis=(-2, -1))[..., ::s, ::s, :, :]
    *lead, ny, nx, _, _ = win.shape
    win = win.reshape(*lead, ny * nx, d, d)
    return pool(win, scheme.pool_factor)


def augment_cells(cells: np.ndarray) -> np.ndarray:
    """``(..., M, r, r)`` -> ``(..., 8M, r, r)``; cell ``8*i + aug`` is augmentation ``aug`` of cell ``i``."""
    rots = [np.rot90(cells, k=-q, axes=(-2, -1)) for q in range(4)]
    out = np.stack(rots + [-c for c in rots], axis=-3)
    *lead, m, a, r, _ = out.shape
    return out.reshape(*lead, m * a, r, r)


def apply_augmentation(cell: np.ndarray, aug: int) -> np.ndarray:
    out = np.rot90(cell, k=-(aug % 4), axes=(-2, -1))
    return -out if aug >= 4 else out


# --------------------------------------------------------------------------- public ops


def partition_ranges(img: RasterImage, scheme: PartitionScheme) -> list[RangeCell]:
    r = scheme.range_size
    if img.width % r or img.height % r:
        raise PartitionError(f"range_size {r} does not divide {img.width}x{img.height}")
    cells = []
    k = 0
    for c in range(img.channels):
        for i in range(0, img.height, r):
            for j in range(0, img.width, r):
                cells.append(RangeCell(k, c, i, j, r))
                k += 1
    return cells


def extract_domains(img: RasterImage, scheme: PartitionScheme) -> DomainBank:
    scheme.validate(img.width, img.height)
    cells = pooled_domains(img.data, scheme)
    n = cells.shape[1]
    prov = np.stack([np.arange(n), np.zeros(n, dtype=int)], axis=1)
    return DomainBank(cells, prov)


def augment_domains(bank: DomainBank) -> DomainBank:
    cells = augment_cells(bank.cells)
    prov = np.array(
        [(n, a) for n in bank.provenance[:, 0] for a in range(N_AUGMENTATIONS)], dtype=int
    ).reshape(-1, 2)
    return DomainBank(cells, prov)


def place_range(canvas: RasterImage, k: int, values) -> None:
    """Overwrite the pixels of range cell ``k`` in place."""
    # scheme is implied by the cell size of ``values``
    values = np.asarray(values, dtype=np.float64)
    r = int(round(np.sqrt(values.size)))
    if r * r != values.size:
        raise ShapeError(f"range cell values must be square, got {values.size}")
    if canvas.width % r or canvas.height % r:
        raise PartitionError(f"range_size {r} does not divide {canvas.width}x{canvas.height}")
    per_row = canvas.width // r
    kp = per_row * (canvas.height // r)
    if not 0 <= k < kp * canvas.channels:
        raise IndexError(f"range index {k} out of bounds for K={kp * canvas.channels}")
    c, rem = divmod(k, kp)
    i, j = divmod(rem, per_row)
    canvas.data[c, i * r : (i + 1) * r, j * r : (j + 1) * r] = values.reshape(r, r)


def read_range(img: RasterImage, k: int, r: int) -> np.ndarray:
    return range_blocks(img.data, r).reshape(-1, r, r)[k].copy()
