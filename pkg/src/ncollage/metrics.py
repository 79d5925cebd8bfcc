"""Block-DCT baseline, PSNR, and the rate-distortion benchmark harness."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import codec, raster
from .collage import SolveConfig
from .encoders import EncoderConfig, decode_blockwise, encode_blockwise, encode_collage
from .errors import ArgumentError, PartitionError, ShapeError
from .pifs import decode_pifs, encode_pifs
from .raster import PartitionScheme, RasterImage

PSNR_CAP = 100.0
DCT_COEFF_BITS = 32
CSV_COLUMNS = ["image", "method", "bpp", "psnr_db", "encode_s", "decode_s", "error"]
METHODS = ("pifs", "pifs_aug", "collage", "dct")


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``u`` is frequency ``u``."""
    i = np.arange(n)
    m = np.cos(np.pi * (2 * i[None, :] + 1) * i[:, None] / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2(patch, direction: str = "forward") -> np.ndarray:
    p = np.asarray(patch, dtype=np.float64)
    n = p.shape[-1]
    if p.shape[-2:] != (n, n):
        raise ShapeError(f"dct2 needs square patches, got {p.shape}")
    m = dct_matrix(n)
    if direction == "forward":
        return m @ p @ m.T
    if direction == "inverse":
        return m.T @ p @ m
    raise ArgumentError(f"unknown direction {direction!r}")


def block_dct_encode(x: RasterImage, patch_size: int) -> np.ndarray:
    """DC coefficient of every patch, shape ``(C, H/p, W/p)``."""
    p = patch_size
    if x.width % p or x.height % p:
        raise PartitionError(f"patch size {p} does not divide {x.width}x{x.height}")
    blocks = raster.range_blocks(x.data, p)
    dc = dct2(blocks)[..., 0, 0]
    return dc.reshape(x.channels, x.height // p, x.width // p)


def block_dct_decode(coeffs, dims: tuple[int, int, int], patch_size: int) -> RasterImage:
    """Inverse DCT of DC-only patches. ``dims`` is ``(channels, height, width)``."""
    c, h, w = dims
    p = patch_size
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(c, -1)
    spec = np.zeros(coeffs.shape + (p, p))
    spec[..., 0, 0] = coeffs
    return RasterImage.from_array(raster.assemble_ranges(dct2(spec, "inverse"), h, w))


def block_dct_bpp(dims: tuple[int, int, int], patch_size: int) -> float:
    c, h, w = dims
    n_patches = c * (h // patch_size) * (w // patch_size)
    return DCT_COEFF_BITS * n_patches / (c * h * w)


def mse(x: RasterImage, y: RasterImage) -> float:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x.data - y.data) ** 2))


def psnr(x: RasterImage, y: RasterImage, peak: float = 1.0) -> float:
    err = mse(x, y)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


# --------------------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchConfig:
    range_size: int = 8
    domain_size: int = 16
    domain_stride: int = 16
    block_size: Optional[int] = 16
    aux_count: int = 3
    epsilon: int = 3
    gd_steps: int = 200
    dct_patch: int = 16
    repeats: int = 3
    threads: int = 1
    seed: int = 0
    max_iters: int = 200

    @property
    def scheme(self) -> PartitionScheme:
        return PartitionScheme(self.range_size, self.domain_size, self.domain_stride)

    def digest(self) -> str:
        d = asdict(self)
        # execution knobs that do not change results
        d.pop("threads")
        d.pop("repeats")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class BenchRow:
    image: str
    method: str
    bpp: float = math.nan
    psnr_db: float = math.nan
    encode_s: float = math.nan
    decode_s: float = math.nan
    error: str = ""

    def key(self) -> tuple:
        return (self.image, self.method)

    def result_fields(self) -> tuple:
        return (self.image, self.method, self.bpp, self.psnr_db, self.error)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.image, r.method, _fmt(r.bpp), _fmt(r.psnr_db), _fmt(r.encode_s), _fmt(r.decode_s), r.error])

    def to_json(self) -> dict:
        return {
            "metadata": self.metadata,
            "rows": [{**asdict(r), "config_hash": self.metadata.get("config_hash")} for r in self.rows],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, default=_json_default)


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _timed(fn: Callable, repeats: int):
    times, out = [], None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def run_method(method: str, x: RasterImage, cfg: BenchConfig) -> tuple[float, RasterImage, float, float]:
    """Encode, quantize and decode ``x``; returns ``(bpp, decoded, encode_s, decode_s)``."""
    spec = codec.QuantizationSpec(cfg.epsilon)
    solve = SolveConfig(max_iters=cfg.max_iters)
    if method == "dct":
        coeffs, enc = _timed(lambda: block_dct_encode(x, cfg.dct_patch), cfg.repeats)
        coeffs = coeffs.astype(np.float32).astype(np.float64)
        y, dec = _timed(lambda: block_dct_decode(coeffs, x.shape, cfg.dct_patch), cfg.repeats)
        return block_dct_bpp(x.shape, cfg.dct_patch), y, enc, dec
    if method in ("pifs", "pifs_aug"):
        ecfg = EncoderConfig(use_augmentations=method == "pifs_aug", threads=cfg.threads)
        code, enc = _timed(lambda: encode_pifs(x, cfg.scheme, ecfg), cfg.repeats)
        container = codec.make_container(code, spec)
        stored = container.dequantize()[0]
        y, dec = _timed(lambda: decode_pifs(stored, solve), cfg.repeats)
        return container.bpp(), y, enc, dec
    if method == "collage":
        ecfg = EncoderConfig(aux_count=cfg.aux_count, gd_steps=cfg.gd_steps, seed=cfg.seed, threads=cfg.threads)
        if cfg.block_size:
            codes, enc = _timed(
                lambda: encode_blockwise(x, cfg.block_size, cfg.scheme, ecfg, "collage"), cfg.repeats
            )
        else:
            codes, enc = _timed(lambda: [encode_collage(x, cfg.scheme, ecfg)], cfg.repeats)
        container = codec.make_container(codes, spec, width=x.width, height=x.height)
        stored = container.dequantize()
        y, dec = _timed(lambda: decode_blockwise(stored, x.width, x.height, solve), cfg.repeats)
        return container.bpp(), y, enc, dec
    raise ArgumentError(f"unknown method {method!r}")


def bench(images, methods: Sequence[str] = METHODS, config: BenchConfig = BenchConfig()) -> BenchReport:
    """Run every method on every ``(name, image)`` pair; failures become error rows."""
    images = list(images.items()) if isinstance(images, dict) else list(images)
    if not images:
        raise ArgumentError("bench needs at least one image")
    if not methods:
        raise ArgumentError("bench needs at least one method")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ArgumentError(f"unknown methods {unknown}")
    rows = []
    dims = {}
    for name, x in images:
        dims[name] = [x.width, x.height, x.channels]
        for method in methods:
            row = BenchRow(name, method)
            try:
                bpp, y, enc, dec = run_method(method, x, config)
                row.bpp, row.psnr_db, row.encode_s, row.decode_s = bpp, psnr(x, y), enc, dec
            except Exception as exc:  # recorded, run continues
                row.error = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    rows.sort(key=BenchRow.key)
    meta = {"config_hash": config.digest(), "config": asdict(config), "dimensions": dims,
            "timing": "median wall-clock of repeats, monotonic clock, excludes file I/O"}
    return BenchReport(rows, meta)
