"""Inverse problem: image -> Collage code.

Encoding minimizes the collage-theorem surrogate ``||x - F(x; w)||^2``, which is
quadratic in the premultiplied coefficients of each range. A ridge least-squares
solve gives a starting point; gradient descent over softmax logits (mixing weights),
tanh pre-activations (scales), raw offsets and learned auxiliary cells refines it.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np

from . import collage, raster
from .collage import CollageCode, SolveConfig
from .errors import ArgumentError, NumericalError, PartitionError, ShapeError
from .pifs import PifsCode, decode_pifs, encode_pifs
from .raster import PartitionScheme, RasterImage

log = logging.getLogger(__name__)

SINGULAR_FALLBACK = 1e-8
MAX_HALVINGS = 20


@dataclass(frozen=True)
class EncoderConfig:
    use_augmentations: bool = False
    a_max: float = 0.999
    gd_a_max: float = 0.9
    ridge_lambda: float = 1e-4
    reg_lambda: float = 1e-4
    gd_steps: int = 200
    gd_rate: float = 0.05
    aux_count: int = 0
    seed: int = 0
    threads: int = 1
    train_aux: bool = True

    def __post_init__(self):
        if not (0 < self.a_max < 1 and 0 < self.gd_a_max < 1):
            raise ArgumentError("a_max must lie in (0, 1)")
        if not self.gd_rate > 0:
            raise ArgumentError("gd_rate must be positive")
        if self.ridge_lambda < 0 or self.reg_lambda < 0:
            raise ArgumentError("regularization weights must be >= 0")
        if self.gd_steps < 0 or self.aux_count < 0 or self.threads < 1:
            raise ArgumentError("gd_steps, aux_count must be >= 0 and threads >= 1")


def init_aux(x: RasterImage, scheme: PartitionScheme, count: int, seed: int) -> np.ndarray:
    """Mean range cell of ``x`` plus seeded uniform noise in [-0.05, 0.05]."""
    r = scheme.range_size
    mean = raster.range_blocks(x.data, r).reshape(-1, r, r).mean(axis=0)
    rng = np.random.default_rng(seed)
    return mean[None] + rng.uniform(-0.05, 0.05, size=(count, r, r))


def surrogate_loss(x: RasterImage, code: CollageCode) -> float:
    return float(np.sum((x.data - collage.apply_collage(x, code).data) ** 2))


# --------------------------------------------------------------------------- least squares


@dataclass(frozen=True, eq=False)
class _Design:
    ranges: np.ndarray  # (C, Kp, n)
    cells: np.ndarray  # (C, M, n): domains then auxiliaries
    n_domains: int
    aux_mode: str
    aux: np.ndarray  # (V, r, r) fixed auxiliaries, empty for rotations
    augmented: bool


def _design(x, scheme, augmented, aux_mode, aux) -> _Design:
    scheme.validate(x.width, x.height)
    r = scheme.range_size
    n = r * r
    doms = raster.pooled_domains(x.data, scheme)
    if augmented:
        doms = raster.augment_cells(doms)
    C, N = doms.shape[:2]
    if aux_mode == "rotations":
        extra = collage.rotation_cells(doms[:, 0]).reshape(C, 3, n)
        aux = np.zeros((0, r, r))
    else:
        aux = np.zeros((0, r, r)) if aux is None else np.asarray(aux, dtype=np.float64).reshape(-1, r, r)
        extra = np.broadcast_to(aux.reshape(1, -1, n), (C, aux.shape[0], n))
    cells = np.concatenate([doms.reshape(C, N, n), extra], axis=1)
    ranges = raster.range_blocks(x.data, r).reshape(C, -1, n)
    return _Design(ranges, cells, N, aux_mode, aux, augmented)


def ridge_coefficients(ranges: np.ndarray, cells: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray, bool]:
    """Solve ``min_c,b sum(c @ cells + b - range)^2 + lam*|c|^2`` for every range row.

    ``ranges`` is ``(P, n)``, ``cells`` is ``(M, n)``. Returns ``(coef (P, M), b (P,), fell_back)``.
    The offset is unpenalized. With ``lam == 0`` and a rank-deficient system the
    solve is retried at ``lam = 1e-8``.
    """
    xc = cells - cells.mean(axis=1, keepdims=True)
    rc = ranges - ranges.mean(axis=1, keepdims=True)
    gram = xc @ xc.T
    m = gram.shape[0]
    fell_back = False
    if lam == 0 and m and np.linalg.matrix_rank(gram) < m:
        lam, fell_back = SINGULAR_FALLBACK, True
    if m:
        coef = np.linalg.solve(gram + lam * np.eye(m), xc @ rc.T).T
    else:
        coef = np.zeros((ranges.shape[0], 0))
    b = ranges.mean(axis=1) - coef @ cells.mean(axis=1)
    return coef, b, fell_back


def factorize(coef: np.ndarray, a_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Split unconstrained coefficients into simplex weights and bounded scales.

    ``gamma = |c| / sum|c|`` and ``a = sign(c) * min(sum|c|, a_max)`` so that
    ``gamma * a == c`` whenever ``sum|c| <= a_max``. All-zero rows get uniform
    weights and zero scales.
    """
    mag = np.abs(coef)
    total = mag.sum(axis=1, keepdims=True)
    m = coef.shape[1]
    zero = total[:, 0] == 0
    gamma = np.where(zero[:, None], 1.0 / max(m, 1), mag / np.where(total == 0, 1.0, total))
    a = np.sign(coef) * np.minimum(total, a_max)
    a[zero] = 0.0
    return gamma, a


def _refit_offsets(design: _Design, gamma, a) -> np.ndarray:
    C, kp, _ = design.ranges.shape
    p = (gamma * a).reshape(C, kp, -1)
    pred = np.einsum("cpm,cmj->cpj", p, design.cells)
    return (design.ranges - pred).mean(axis=2).reshape(-1)


def _code_from(design: _Design, x, scheme, gamma, a, b) -> CollageCode:
    return CollageCode(
        scheme, x.width, x.height, x.channels, gamma, a, b,
        aux=design.aux, augmented=design.augmented, aux_mode=design.aux_mode,
    )


def encode_collage_ls(
    x: RasterImage,
    scheme: PartitionScheme,
    cfg: EncoderConfig = EncoderConfig(),
    *,
    aux: Optional[np.ndarray] = None,
    aux_mode: Literal["fixed", "rotations"] = "fixed",
    a_max: Optional[float] = None,
) -> CollageCode:
    """Closed-form ridge fit per range, projected onto the constrained code form.

    Offsets are refit after projection, so the code is surrogate-optimal for the
    projected premultiplied coefficients.
    """
    a_max = cfg.a_max if a_max is None else a_max
    if aux is None and aux_mode == "fixed" and cfg.aux_count:
        aux = init_aux(x, scheme, cfg.aux_count, cfg.seed)
    design = _design(x, scheme, cfg.use_augmentations, aux_mode, aux)
    C = design.ranges.shape[0]
    coefs = []
    for c in range(C):
        coef, _, fell_back = ridge_coefficients(design.ranges[c], design.cells[c], cfg.ridge_lambda)
        if fell_back:
            log.warning("singular normal equations in channel %d; used ridge %.0e", c, SINGULAR_FALLBACK)
        coefs.append(coef)
    gamma, a = factorize(np.concatenate(coefs, axis=0), a_max)
    b = _refit_offsets(design, gamma, a)
    return _code_from(design, x, scheme, gamma, a, b)


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto ``{c : sum|c| <= radius}``."""
    mag = np.abs(v)
    over = mag.sum(axis=1) > radius
    if not np.any(over):
        return v
    out = v.copy()
    u = np.sort(mag[over], axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - radius
    idx = np.arange(1, v.shape[1] + 1)
    rho = np.count_nonzero(u - css / idx > 0, axis=1)
    theta = css[np.arange(u.shape[0]), rho - 1] / rho
    out[over] = np.sign(v[over]) * np.maximum(mag[over] - theta[:, None], 0.0)
    return out


def constrained_coefficients(ranges, cells, lam, radius, init=None, max_iters=1000, tol=1e-10) -> np.ndarray:
    """Accelerated projected gradient for the ridge fit restricted to ``sum|c| <= radius``.

    Every ``c`` in that ball factorizes exactly into simplex weights and scales
    bounded by ``radius``, so this is the constrained optimum of the surrogate.
    """
    xc = cells - cells.mean(axis=1, keepdims=True)
    rc = ranges - ranges.mean(axis=1, keepdims=True)
    m = xc.shape[0]
    if m == 0:
        return np.zeros((ranges.shape[0], 0))
    gram = xc @ xc.T + lam * np.eye(m)
    rhs = rc @ xc.T
    lip = float(np.linalg.eigvalsh(gram)[-1])
    if lip <= 0:
        return np.zeros((ranges.shape[0], m))
    c = project_l1_ball(np.zeros_like(rhs) if init is None else np.array(init, dtype=np.float64), radius)
    y, t = c, 1.0
    for _ in range(max_iters):
        nxt = project_l1_ball(y - (y @ gram - rhs) / lip, radius)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + ((t - 1.0) / t_next) * (nxt - c)
        done = np.max(np.abs(nxt - c), initial=0.0) < tol
        c, t = nxt, t_next
        if done:
            break
    return c


def encode_collage_constrained(
    x: RasterImage,
    scheme: PartitionScheme,
    cfg: EncoderConfig = EncoderConfig(),
    *,
    init: Optional[CollageCode] = None,
    aux: Optional[np.ndarray] = None,
    aux_mode: Literal["fixed", "rotations"] = "fixed",
    a_max: Optional[float] = None,
) -> CollageCode:
    """Surrogate-optimal code under the coefficient constraints, warm-started from ``init``."""
    a_max = cfg.gd_a_max if a_max is None else a_max
    if init is not None:
        aux, aux_mode = init.aux, init.aux_mode
    elif aux is None and aux_mode == "fixed" and cfg.aux_count:
        aux = init_aux(x, scheme, cfg.aux_count, cfg.seed)
    design = _design(x, scheme, cfg.use_augmentations, aux_mode, aux)
    C, kp, _ = design.ranges.shape
    start = None if init is None else init.premultiplied.reshape(C, kp, -1)
    coefs = [
        constrained_coefficients(
            design.ranges[c], design.cells[c], cfg.ridge_lambda, a_max,
            None if start is None else start[c],
        )
        for c in range(C)
    ]
    gamma, a = factorize(np.concatenate(coefs, axis=0), a_max)
    b = _refit_offsets(design, gamma, a)
    code = _code_from(design, x, scheme, gamma, a, b)
    if init is not None and surrogate_loss(x, init) < surrogate_loss(x, code):
        return init
    return code


# --------------------------------------------------------------------------- gradient refinement


@dataclass
class CollageParams:
    logits: np.ndarray  # (K, M)
    alpha: np.ndarray  # (K, M)
    b: np.ndarray  # (K,)
    aux: np.ndarray  # (V, r, r) trainable fixed auxiliaries, or (0, r, r)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.logits.ravel(), self.alpha.ravel(), self.b.ravel(), self.aux.ravel()])

    def unflat(self, theta: np.ndarray) -> "CollageParams":
        out, i = [], 0
        for arr in (self.logits, self.alpha, self.b, self.aux):
            out.append(theta[i : i + arr.size].reshape(arr.shape))
            i += arr.size
        return CollageParams(*out)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SurrogateObjective:
    """``||x - F(x; w)||^2 + reg * (|gamma*a|^2 + |b|^2)`` under the softmax/tanh parameterization."""

    def __init__(self, x: RasterImage, scheme: PartitionScheme, *, augmented=False,
                 aux_mode="fixed", aux=None, reg_lambda=1e-4, a_max=0.9, train_aux=True):
        self.x, self.scheme = x, scheme
        self.design = _design(x, scheme, augmented, aux_mode, aux)
        self.reg, self.a_max = reg_lambda, a_max
        self.train_aux = train_aux and aux_mode == "fixed" and self.design.aux.shape[0] > 0

    @property
    def n_live(self) -> int:
        # cells that depend on x (domains, plus rotation auxiliaries)
        d = self.design
        return d.cells.shape[1] if d.aux_mode == "rotations" else d.n_domains

    def params_from_code(self, code: CollageCode) -> CollageParams:
        logits = np.log(np.maximum(code.gamma, 1e-12))
        alpha = np.arctanh(np.clip(code.a / self.a_max, -1 + 1e-9, 1 - 1e-9))
        aux = code.aux.copy() if self.train_aux else np.zeros((0,) + code.aux.shape[1:])
        return CollageParams(logits, alpha, code.b.copy(), aux)

    def code(self, params: CollageParams) -> CollageCode:
        gamma = _softmax(params.logits)
        a = self.a_max * np.tanh(params.alpha)
        aux = params.aux if self.train_aux else self.design.aux
        return CollageCode(
            self.scheme, self.x.width, self.x.height, self.x.channels, gamma, a, params.b,
            aux=aux, augmented=self.design.augmented, aux_mode=self.design.aux_mode,
        )

    def _cells(self, params: CollageParams) -> np.ndarray:
        d = self.design
        if not self.train_aux:
            return d.cells
        C, _, n = d.cells.shape
        extra = np.broadcast_to(params.aux.reshape(1, -1, n), (C, params.aux.shape[0], n))
        return np.concatenate([d.cells[:, : d.n_domains], extra], axis=1)

    def value_and_grad(self, params: CollageParams) -> tuple[float, CollageParams]:
        d = self.design
        C, kp, n = d.ranges.shape
        gamma = _softmax(params.logits)
        th = np.tanh(params.alpha)
        a = self.a_max * th
        p = gamma * a
        cells = self._cells(params)
        pc = p.reshape(C, kp, -1)
        e = np.einsum("cpm,cmj->cpj", pc, cells) + params.b.reshape(C, kp, 1) - d.ranges
        loss = float(np.sum(e * e) + self.reg * (np.sum(p * p) + np.sum(params.b ** 2)))

        g_p = 2.0 * np.einsum("cpj,cmj->cpm", e, cells).reshape(p.shape) + 2.0 * self.reg * p
        g_b = 2.0 * e.sum(axis=2).reshape(-1) + 2.0 * self.reg * params.b
        g_alpha = g_p * gamma * self.a_max * (1.0 - th * th)
        ga = g_p * a
        g_logits = gamma * (ga - np.sum(ga * gamma, axis=1, keepdims=True))
        if self.train_aux:
            nd = d.n_domains
            g_aux = 2.0 * np.einsum("cpv,cpj->vj", pc[:, :, nd:], e).reshape(params.aux.shape)
        else:
            g_aux = np.zeros_like(params.aux)
        return loss, CollageParams(g_logits, g_alpha, g_b, g_aux)

    def value(self, params: CollageParams) -> float:
        return self.value_and_grad(params)[0]


def _descend(obj: SurrogateObjective, params: CollageParams, steps: int, rate: float) -> CollageParams:
    theta = params.flat()
    loss, grad = obj.value_and_grad(params)
    if not np.isfinite(loss):
        raise NumericalError("non-finite surrogate loss at initialization")
    g = grad.flat()
    for _ in range(steps):
        for _ in range(MAX_HALVINGS + 1):
            cand = theta - rate * g
            cand_params = params.unflat(cand)
            new_loss, new_grad = obj.value_and_grad(cand_params)
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            rate *= 0.5
        else:
            return params.unflat(theta)
        theta, loss, g = cand, new_loss, new_grad.flat()
    return params.unflat(theta)


def encode_collage_gd(
    x: RasterImage,
    scheme: PartitionScheme,
    cfg: EncoderConfig,
    init: CollageCode,
    *,
    train_aux: Optional[bool] = None,
) -> CollageCode:
    """Refine ``init`` by full-batch gradient descent with a monotone step safeguard."""
    if cfg.gd_steps == 0:
        return init
    obj = SurrogateObjective(
        x, scheme, augmented=init.augmented, aux_mode=init.aux_mode, aux=init.aux,
        reg_lambda=cfg.reg_lambda, a_max=cfg.gd_a_max,
        train_aux=cfg.train_aux if train_aux is None else train_aux,
    )
    params = obj.params_from_code(init)
    out = obj.code(_descend(obj, params, cfg.gd_steps, cfg.gd_rate))
    init_loss, out_loss = surrogate_loss(x, init), surrogate_loss(x, out)
    if not np.isfinite(out_loss):
        raise NumericalError("non-finite surrogate loss after gradient descent")
    return out if out_loss <= init_loss else init


def encode_collage(
    x: RasterImage,
    scheme: PartitionScheme,
    cfg: EncoderConfig = EncoderConfig(),
    *,
    aux: Optional[np.ndarray] = None,
    train_aux: Optional[bool] = None,
) -> CollageCode:
    """Ridge initialization, constrained least-squares projection, then gradient refinement."""
    init = encode_collage_ls(x, scheme, cfg, aux=aux, a_max=cfg.gd_a_max)
    init = encode_collage_constrained(x, scheme, cfg, init=init)
    return encode_collage_gd(x, scheme, cfg, init, train_aux=train_aux)


def fractalize_encode(x: RasterImage, cfg: EncoderConfig = EncoderConfig(), range_size: Optional[int] = None) -> CollageCode:
    """Single whole-image domain whose rotations serve as auxiliary domains."""
    if x.width != x.height:
        raise ArgumentError(f"fractalizer needs a square image, got {x.width}x{x.height}")
    side = x.width
    r = range_size or max(1, side // 4)
    if side % r:
        raise PartitionError(f"range size {r} does not divide {side}")
    scheme = PartitionScheme(r, side, side)
    cfg = replace(cfg, use_augmentations=False)
    init = encode_collage_ls(x, scheme, cfg, aux_mode="rotations", a_max=cfg.gd_a_max)
    init = encode_collage_constrained(x, scheme, cfg, init=init)
    return encode_collage_gd(x, scheme, cfg, init, train_aux=False)


# --------------------------------------------------------------------------- blocks


def split_blocks(x: RasterImage, block_size: int) -> list[RasterImage]:
    if x.width % block_size or x.height % block_size:
        raise PartitionError(f"block size {block_size} does not divide {x.width}x{x.height}")
    blocks = raster.range_blocks(x.data, block_size)  # (C, B, bs, bs)
    return [RasterImage.from_array(blocks[:, i]) for i in range(blocks.shape[1])]


def merge_blocks(blocks: list[RasterImage], width: int, height: int) -> RasterImage:
    arr = np.stack([b.data for b in blocks], axis=1)
    return RasterImage.from_array(raster.assemble_ranges(arr, height, width))


def encode_blockwise(
    x: RasterImage,
    block_size: int,
    scheme: PartitionScheme,
    cfg: EncoderConfig = EncoderConfig(),
    method: Literal["pifs", "collage"] = "collage",
    *,
    threads: Optional[int] = None,
) -> list:
    """Encode independent ``block_size`` tiles in row-major order.

    Collage blocks share one set of auxiliary cells initialized from the whole image
    and held fixed, so each block's code equals encoding that block alone with the
    same auxiliaries.
    """
    blocks = split_blocks(x, block_size)
    threads = threads or cfg.threads
    if method == "pifs":
        inner = replace(cfg, threads=1)
        work = lambda blk: encode_pifs(blk, scheme, inner)
    elif method == "collage":
        aux = init_aux(x, scheme, cfg.aux_count, cfg.seed) if cfg.aux_count else None
        work = lambda blk: encode_collage(blk, scheme, cfg, aux=aux, train_aux=False)
    else:
        raise ArgumentError(f"unknown method {method!r}")
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(work, blocks))
    return [work(blk) for blk in blocks]


def decode_blockwise(codes: list, width: int, height: int, cfg: SolveConfig = SolveConfig(), *, scale: int = 1) -> RasterImage:
    out = []
    for code in codes:
        if isinstance(code, PifsCode):
            if scale == 1:
                out.append(decode_pifs(code, cfg))
            else:
                out.append(collage.decode_magnified(code.to_collage(), scale, cfg))
        else:
            out.append(collage.decode_magnified(code, scale, cfg))
    return merge_blocks(out, width * scale, height * scale)
