"""The Collage operator, its contractivity certificate and fixed-point decoding.

A code maps range cell ``k`` to::

    sum_n gamma[k, n] * a[k, n] * D_n(z)  +  sum_v gamma[k, N+v] * a[k, N+v] * U_v  +  b[k]

where ``D_n(z)`` are the pooled (optionally augmented) domain cells of ``z`` taken from
the same channel plane as the range, and ``U_v`` are auxiliary cells. Auxiliary cells
are either fixed patches (``aux_mode="fixed"``) or the 90/180/270 degree clockwise
rotations of the pooled first domain (``aux_mode="rotations"``), which depend on ``z``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal, Union

import numpy as np

from . import raster
from .errors import (
    ArgumentError,
    ContractivityError,
    InvariantError,
    ShapeError,
    SizeError,
)
from .raster import PartitionScheme, RasterImage

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CollageCode:
    scheme: PartitionScheme
    width: int
    height: int
    channels: int
    gamma: np.ndarray  # (K, N + V)
    a: np.ndarray  # (K, N + V)
    b: np.ndarray  # (K,)
    aux: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))  # (V, r, r) when fixed
    augmented: bool = False
    aux_mode: Literal["fixed", "rotations"] = "fixed"

    def __post_init__(self):
        self.scheme.validate(self.width, self.height)
        r = self.scheme.range_size
        gamma = np.asarray(self.gamma, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        aux = np.asarray(self.aux, dtype=np.float64)
        if self.aux_mode == "fixed":
            aux = aux.reshape(-1, r, r) if aux.size else np.zeros((0, r, r))
        elif self.aux_mode == "rotations":
            if self.augmented:
                raise ArgumentError("rotation auxiliaries cannot be combined with augmented domains")
            aux = np.zeros((0, r, r))
        else:
            raise ArgumentError(f"unknown aux_mode {self.aux_mode!r}")
        for name, val in (("gamma", gamma), ("a", a), ("b", b), ("aux", aux)):
            object.__setattr__(self, name, val)
        expect = (self.K, self.N + self.V)
        if gamma.shape != expect or a.shape != expect:
            raise ShapeError(f"gamma/a must have shape {expect}, got {gamma.shape} / {a.shape}")
        if b.shape != (self.K,):
            raise ShapeError(f"b must have {self.K} entries, got {b.shape}")

    @property
    def K(self) -> int:
        return self.scheme.ranges_per_plane(self.width, self.height) * self.channels

    @property
    def N(self) -> int:
        n = self.scheme.domains_per_plane(self.width, self.height)
        return n * raster.N_AUGMENTATIONS if self.augmented else n

    @property
    def V(self) -> int:
        return 3 if self.aux_mode == "rotations" else self.aux.shape[0]

    @property
    def premultiplied(self) -> np.ndarray:
        """Stored coefficients gamma * a."""
        return self.gamma * self.a

    def check(self) -> None:
        """Raise :class:`InvariantError` unless gamma rows lie on the simplex and ``|a| < 1``."""
        if np.any(self.gamma < -SIMPLEX_TOL) or np.any(
            np.abs(self.gamma.sum(axis=1) - 1.0) > SIMPLEX_TOL
        ):
            raise InvariantError("mixing weights must be non-negative and sum to 1 per range")
        if np.any(np.abs(self.a) >= 1.0):
            raise InvariantError("contraction scales must satisfy |a| < 1")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.aux))):
            raise InvariantError("non-finite offsets or auxiliary cells")

    def with_(self, **changes) -> "CollageCode":
        return replace(self, **changes)

    def rescaled(self, s: int) -> "CollageCode":
        """The same coefficients acting on cells ``s`` times larger in each direction."""
        aux = np.kron(self.aux, np.ones((s, s))) if self.aux.size else self.aux
        return replace(
            self,
            scheme=self.scheme.scaled(s),
            width=self.width * s,
            height=self.height * s,
            aux=aux,
        )


@dataclass(frozen=True)
class SolveConfig:
    mode: Literal["iterate", "closed_form"] = "iterate"
    tolerance: float = 1e-8
    max_iters: int = 200
    init: Union[str, float, RasterImage] = "zeros"
    force: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ArgumentError("tolerance must be positive")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be >= 1")
        if self.mode not in ("iterate", "closed_form"):
            raise ArgumentError(f"unknown solve mode {self.mode!r}")


@dataclass(frozen=True)
class LipschitzReport:
    L: float
    contractive: bool


@dataclass(frozen=True, eq=False)
class DecodeResult:
    image: RasterImage
    iterations: int
    step: float
    converged: bool


# --------------------------------------------------------------------------- operator


def domain_cells(code: CollageCode, arr: np.ndarray) -> np.ndarray:
    """Pooled (and augmented) domains of ``arr``: ``(..., C, N, r, r)``."""
    cells = raster.pooled_domains(arr, code.scheme)
    if code.augmented:
        cells = raster.augment_cells(cells)
    return cells


def rotation_cells(first_domain: np.ndarray) -> np.ndarray:
    """``(..., r, r)`` -> ``(..., 3, r, r)`` clockwise rotations by 90, 180, 270 degrees."""
    return np.stack([np.rot90(first_domain, k=-q, axes=(-2, -1)) for q in (1, 2, 3)], axis=-3)


def _plane_weights(code: CollageCode, w: np.ndarray) -> np.ndarray:
    return w.reshape(code.channels, code.K // code.channels, w.shape[-1])


def apply_linear(code: CollageCode, arr: np.ndarray) -> np.ndarray:
    """The z-dependent part of the operator on ``(..., C, H, W)``."""
    p = code.premultiplied
    doms = domain_cells(code, arr)
    out = np.einsum("cpn,...cnij->...cpij", _plane_weights(code, p[:, : code.N]), doms)
    if code.aux_mode == "rotations":
        rots = rotation_cells(doms[..., 0, :, :])
        out = out + np.einsum("cpv,...cvij->...cpij", _plane_weights(code, p[:, code.N :]), rots)
    return raster.assemble_ranges(out, code.height, code.width)


def constant_term(code: CollageCode) -> np.ndarray:
    """The z-independent part: offsets plus fixed auxiliary cells, shape ``(C, H, W)``."""
    r = code.scheme.range_size
    kp = code.K // code.channels
    out = np.broadcast_to(code.b.reshape(code.channels, kp, 1, 1), (code.channels, kp, r, r))
    if code.aux_mode == "fixed" and code.V:
        w = _plane_weights(code, code.premultiplied[:, code.N :])
        out = out + np.einsum("cpv,vij->cpij", w, code.aux)
    return raster.assemble_ranges(np.array(out), code.height, code.width)


def _check_shape(code: CollageCode, arr: np.ndarray) -> None:
    if arr.shape[-3:] != (code.channels, code.height, code.width):
        raise ShapeError(
            f"image shape {arr.shape[-3:]} does not match code "
            f"({code.channels}, {code.height}, {code.width})"
        )


def apply_collage(z: RasterImage, code: CollageCode) -> RasterImage:
    _check_shape(code, z.data)
    out = apply_linear(code, z.data) + constant_term(code)
    return RasterImage.from_array(out)


def lipschitz_bound(code: CollageCode) -> LipschitzReport:
    """Row-sum bound on the infinity-norm Lipschitz constant of the operator.

    Fixed auxiliary cells contribute nothing; rotation auxiliaries are isometric
    images of a pooled domain and count like domains.
    """
    w = np.abs(code.premultiplied)
    n_live = code.N + (code.V if code.aux_mode == "rotations" else 0)
    L = float(w[:, :n_live].sum(axis=1).max()) if code.K else 0.0
    return LipschitzReport(L, L < 1.0)


# --------------------------------------------------------------------------- solvers


def _initial(code: CollageCode, init, shape) -> np.ndarray:
    if isinstance(init, RasterImage):
        if init.data.shape != shape:
            raise ShapeError(f"init image shape {init.data.shape} != {shape}")
        return init.data.copy()
    if isinstance(init, str):
        if init != "zeros":
            raise ArgumentError(f"unknown init {init!r}")
        return np.zeros(shape)
    return np.full(shape, float(init))


def _ensure_contractive(code: CollageCode, cfg: SolveConfig) -> float:
    L = lipschitz_bound(code).L
    if L >= 1.0:
        if not cfg.force:
            raise ContractivityError(f"code is not certified contractive (L = {L:.6g})")
        warnings.warn(f"decoding a non-contractive code (L = {L:.6g}); iterations capped", stacklevel=3)
    return L


def _stop_threshold(tol: float, L: float) -> float:
    # step < tol, tightened so that the a-posteriori error L/(1-L)*step stays below tol
    if L <= 0.5 or L >= 1.0:
        return tol
    return tol * (1.0 - L) / L


def _iterate(code: CollageCode, z: np.ndarray, cfg: SolveConfig, L: float):
    const = constant_term(code)
    thresh = _stop_threshold(cfg.tolerance, L)
    step = np.inf
    it = 0
    while it < cfg.max_iters:
        nxt = apply_linear(code, z) + const
        step = float(np.max(np.abs(nxt - z))) if nxt.size else 0.0
        z = nxt
        it += 1
        if step < thresh:
            break
        if not np.isfinite(step):
            break
    return z, it, step, step < thresh


def dense_matrix(code: CollageCode, chunk: int = 512) -> np.ndarray:
    """Materialize the m x m linear part A (so that F(z) = A z + c)."""
    m = code.channels * code.height * code.width
    if m > DENSE_LIMIT:
        raise SizeError(f"dense solve limited to {DENSE_LIMIT} pixels, image has {m}")
    A = np.empty((m, m))
    shape = (code.channels, code.height, code.width)
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        basis = np.zeros((stop - start, m))
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        A[:, start:stop] = apply_linear(code, basis.reshape(-1, *shape)).reshape(stop - start, m).T
    return A


def _closed_form(code: CollageCode) -> np.ndarray:
    A = dense_matrix(code)
    c = constant_term(code).reshape(-1)
    z = np.linalg.solve(np.eye(A.shape[0]) - A, c)
    return z.reshape(code.channels, code.height, code.width)


def decode_with_info(code: CollageCode, cfg: SolveConfig = SolveConfig()) -> DecodeResult:
    L = _ensure_contractive(code, cfg)
    shape = (code.channels, code.height, code.width)
    if cfg.mode == "closed_form":
        z = _closed_form(code)
        return DecodeResult(RasterImage.from_array(z), 0, 0.0, True)
    z, it, step, ok = _iterate(code, _initial(code, cfg.init, shape), cfg, L)
    if not ok:
        log.warning("decode stopped after %d iterations with step %.3g", it, step)
    return DecodeResult(RasterImage.from_array(z), it, step, ok)


def decode(code: CollageCode, cfg: SolveConfig = SolveConfig()) -> RasterImage:
    return decode_with_info(code, cfg).image


def ct_bound(x: RasterImage, code: CollageCode) -> tuple[float, float]:
    """Collage-theorem bound on the infinity-norm distance from ``x`` to the attractor."""
    L = lipschitz_bound(code).L
    if L >= 1.0:
        raise ContractivityError(f"collage bound needs L < 1, got {L:.6g}")
    err = float(np.max(np.abs(x.data - apply_collage(x, code).data)))
    return err / (1.0 - L), err


# --------------------------------------------------------------------------- magnification


def _polyphase_split(arr: np.ndarray, s: int) -> np.ndarray:
    """``(C, sH, sW)`` -> ``(s, s, C, H, W)`` with ``[p, q] = arr[:, p::s, q::s]``."""
    c, hs, ws = arr.shape
    x = arr.reshape(c, hs // s, s, ws // s, s)
    return x.transpose(2, 4, 0, 1, 3)


def _polyphase_merge(sub: np.ndarray) -> np.ndarray:
    s, _, c, h, w = sub.shape
    return sub.transpose(2, 3, 0, 4, 1).reshape(c, h * s, w * s)


def decode_magnified_with_info(
    code: CollageCode,
    s: int,
    cfg: SolveConfig = SolveConfig(),
    method: Literal["polyphase", "cells"] = "polyphase",
) -> DecodeResult:
    """Decode at ``s`` times the encoded resolution.

    ``polyphase`` runs the operator independently on the ``s*s`` interleaved
    sub-images of the magnified grid. ``cells`` instead scales every cell size by
    ``s`` and decodes the rescaled operator, which synthesizes detail below the
    encoded resolution.
    """
    if not isinstance(s, (int, np.integer)) or s < 1:
        raise ArgumentError(f"scale must be an integer >= 1, got {s!r}")
    if s == 1:
        return decode_with_info(code, cfg)
    if method == "cells":
        big = code.rescaled(s)
        if cfg.mode == "closed_form":
            cfg = replace(cfg, mode="iterate")
        if isinstance(cfg.init, RasterImage):
            cfg = replace(cfg, init=RasterImage.from_array(_polyphase_merge(
                np.broadcast_to(cfg.init.data, (s, s) + cfg.init.data.shape))))
        return decode_with_info(big, cfg)
    if method != "polyphase":
        raise ArgumentError(f"unknown magnification method {method!r}")
    L = _ensure_contractive(code, cfg)
    shape = (s, s, code.channels, code.height, code.width)
    if cfg.mode == "closed_form":
        z = _closed_form(code)
        sub = np.broadcast_to(z, shape).copy()
        return DecodeResult(RasterImage.from_array(_polyphase_merge(sub)), 0, 0.0, True)
    init = cfg.init
    if isinstance(init, RasterImage):
        if init.data.shape == shape[2:]:
            z0 = np.broadcast_to(init.data, shape).copy()
        else:
            z0 = _polyphase_split(init.data, s).copy()
    else:
        z0 = _initial(code, init, shape)
    z, it, step, ok = _iterate(code, z0, cfg, L)
    return DecodeResult(RasterImage.from_array(_polyphase_merge(z)), it, step, ok)


def decode_magnified(code: CollageCode, s: int, cfg: SolveConfig = SolveConfig(), method="polyphase") -> RasterImage:
    return decode_magnified_with_info(code, s, cfg, method).image
