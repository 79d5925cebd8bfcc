"""Classic PIFS fractal compression: exhaustive least-squares domain matching."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import collage, raster
from .collage import DecodeResult, SolveConfig
from .errors import ShapeError
from .raster import PartitionScheme, RasterImage

# variances below this (per pixel) are treated as a constant domain
VAR_EPS = 1e-20
# candidates within this fraction of the range energy of the best residual count as ties
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class PifsCode:
    scheme: PartitionScheme
    width: int
    height: int
    channels: int
    domain_index: np.ndarray  # (K,) base domain index within the range's channel plane
    aug: np.ndarray  # (K,) augmentation id 0..7
    a: np.ndarray
    b: np.ndarray
    augmented: bool = False

    def __post_init__(self):
        self.scheme.validate(self.width, self.height)
        K = self.K
        for name, dtype in (("domain_index", np.int64), ("aug", np.int64), ("a", np.float64), ("b", np.float64)):
            val = np.asarray(getattr(self, name), dtype=dtype).reshape(-1)
            if val.shape != (K,):
                raise ShapeError(f"{name} must have {K} entries, got {val.size}")
            object.__setattr__(self, name, val)

    @property
    def K(self) -> int:
        return self.scheme.ranges_per_plane(self.width, self.height) * self.channels

    @property
    def n_domains(self) -> int:
        return self.scheme.domains_per_plane(self.width, self.height)

    @property
    def n_augmentations(self) -> int:
        return raster.N_AUGMENTATIONS if self.augmented else 1

    @property
    def address(self) -> np.ndarray:
        return self.domain_index * self.n_augmentations + self.aug

    def __eq__(self, other):
        if not isinstance(other, PifsCode):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and (self.width, self.height, self.channels, self.augmented)
            == (other.width, other.height, other.channels, other.augmented)
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("domain_index", "aug", "a", "b"))
        )

    def to_collage(self) -> collage.CollageCode:
        """Equivalent Collage code with one-hot mixing weights."""
        n = self.n_domains * self.n_augmentations
        gamma = np.zeros((self.K, n))
        a = np.zeros((self.K, n))
        rows = np.arange(self.K)
        gamma[rows, self.address] = 1.0
        a[rows, self.address] = self.a
        return collage.CollageCode(
            self.scheme, self.width, self.height, self.channels, gamma, a, self.b, augmented=self.augmented
        )


def ls_affine_match(d, r, a_max: float = 0.999) -> tuple[float, float, float]:
    """Least-squares fit ``r ~ a*d + b`` with ``|a| <= a_max``; returns ``(a, b, residual)``.

    Sums are correctly rounded (``math.fsum``) so the result does not depend on
    summation order.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if d.shape != r.shape or d.size == 0:
        raise ShapeError(f"domain and range must have equal non-zero length, got {d.size} and {r.size}")
    n = d.size
    md = math.fsum(d) / n
    mr = math.fsum(r) / n
    dc = d - md
    var = math.fsum(dc * dc)
    if var <= VAR_EPS * n:
        a = 0.0
    else:
        a = min(max(math.fsum(dc * (r - mr)) / var, -a_max), a_max)
    b = mr - a * md
    e = a * d + b - r
    return a, b, math.fsum(e * e)


def _candidate_bank(x: np.ndarray, scheme: PartitionScheme, augment: bool) -> np.ndarray:
    cells = raster.pooled_domains(x, scheme)
    if augment:
        cells = raster.augment_cells(cells)
    c, m, r, _ = cells.shape
    return cells.reshape(c, m, r * r)


def _match_chunk(ranges: np.ndarray, bank: np.ndarray, a_max: float) -> np.ndarray:
    """Best candidate index per range row. ``ranges`` is ``(P, n)``, ``bank`` is ``(M, n)``."""
    n = bank.shape[1]
    dc = bank - bank.mean(axis=1, keepdims=True)
    rc = ranges - ranges.mean(axis=1, keepdims=True)
    sdd = np.einsum("mj,mj->m", dc, dc, optimize=False)
    srr = np.einsum("pj,pj->p", rc, rc, optimize=False)
    sdr = np.einsum("pj,mj->pm", rc, dc, optimize=False)
    live = sdd > VAR_EPS * n
    a = np.where(live, sdr / np.where(live, sdd, 1.0), 0.0)
    a = np.clip(a, -a_max, a_max)
    res = np.maximum(srr[:, None] - 2.0 * a * sdr + a * a * sdd, 0.0)
    best = res.min(axis=1, keepdims=True)
    # lowest index among candidates tied with the minimum
    return np.argmax(res <= best + TIE_RTOL * srr[:, None], axis=1)


def encode_pifs(x: RasterImage, scheme: PartitionScheme, cfg=None, *, threads: int | None = None) -> PifsCode:
    """Exhaustive search over every pooled (and optionally augmented) domain for each range."""
    from .encoders import EncoderConfig

    cfg = cfg or EncoderConfig()
    scheme.validate(x.width, x.height)
    threads = threads or cfg.threads or 1
    r = scheme.range_size
    bank = _candidate_bank(x.data, scheme, cfg.use_augmentations)
    ranges = raster.range_blocks(x.data, r)
    C, kp = ranges.shape[:2]
    ranges = ranges.reshape(C, kp, r * r)

    jobs = []
    step = max(1, -(-kp // (threads * 4)))
    for c in range(C):
        for start in range(0, kp, step):
            jobs.append((c, start, min(kp, start + step)))
    choice = np.empty((C, kp), dtype=np.int64)

    def run(job):
        c, lo, hi = job
        choice[c, lo:hi] = _match_chunk(ranges[c, lo:hi], bank[c], cfg.a_max)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    n_aug = raster.N_AUGMENTATIONS if cfg.use_augmentations else 1
    K = C * kp
    a = np.empty(K)
    b = np.empty(K)
    flat = choice.reshape(-1)
    for k in range(K):
        c, p = divmod(k, kp)
        a[k], b[k], _ = ls_affine_match(bank[c, flat[k]], ranges[c, p], cfg.a_max)
    return PifsCode(
        scheme, x.width, x.height, x.channels,
        flat // n_aug, flat % n_aug, a, b, augmented=cfg.use_augmentations,
    )


def pifs_residual(x: RasterImage, code: PifsCode) -> float:
    """Total squared matching error of ``code`` against the ranges of ``x``."""
    return float(np.sum((x.data - apply_pifs(code, x.data)) ** 2))


def apply_pifs(code: PifsCode, arr: np.ndarray) -> np.ndarray:
    r = code.scheme.range_size
    bank = _candidate_bank(arr, code.scheme, code.augmented)
    kp = code.K // code.channels
    chan = np.arange(code.K) // kp
    cells = bank[..., chan, code.address, :]
    out = code.a[:, None] * cells + code.b[:, None]
    out = out.reshape(*arr.shape[:-3], code.channels, kp, r, r)
    return raster.assemble_ranges(out, code.height, code.width)


def decode_pifs_with_info(code: PifsCode, cfg: SolveConfig = SolveConfig()) -> DecodeResult:
    if cfg.mode == "closed_form":
        return collage.decode_with_info(code.to_collage(), cfg)
    L = float(np.max(np.abs(code.a), initial=0.0))
    if L >= 1.0 and not cfg.force:
        from .errors import ContractivityError

        raise ContractivityError(f"PIFS code has |a| = {L:.6g} >= 1")
    z = collage._initial(None, cfg.init, (code.channels, code.height, code.width))
    thresh = collage._stop_threshold(cfg.tolerance, L)
    step, it = np.inf, 0
    while it < cfg.max_iters:
        nxt = apply_pifs(code, z)
        step = float(np.max(np.abs(nxt - z)))
        z = nxt
        it += 1
        if step < thresh or not np.isfinite(step):
            break
    return DecodeResult(RasterImage.from_array(z), it, step, step < thresh)


def decode_pifs(code: PifsCode, cfg: SolveConfig = SolveConfig()) -> RasterImage:
    return decode_pifs_with_info(code, cfg).image
