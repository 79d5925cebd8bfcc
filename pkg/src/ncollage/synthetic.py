"""Random codes and self-similar test images."""
from __future__ import annotations

import numpy as np

from . import raster
from .collage import CollageCode, SolveConfig
from .pifs import PifsCode, decode_pifs
from .raster import PartitionScheme, RasterImage


def random_collage_code(
    rng: np.random.Generator,
    width: int,
    height: int,
    scheme: PartitionScheme,
    *,
    channels: int = 1,
    n_aux: int = 0,
    L: float = 0.95,
    augmented: bool = False,
    aux_mode: str = "fixed",
) -> CollageCode:
    """Random code whose Lipschitz certificate is at most ``L``."""
    K = scheme.ranges_per_plane(width, height) * channels
    N = scheme.domains_per_plane(width, height) * (raster.N_AUGMENTATIONS if augmented else 1)
    V = 3 if aux_mode == "rotations" else n_aux
    M = N + V
    gamma = rng.dirichlet(np.full(M, 0.5), size=K)
    a = rng.uniform(-1, 1, size=(K, M))
    live = M if aux_mode == "rotations" else N
    rowsum = (gamma[:, :live] * np.abs(a[:, :live])).sum(axis=1, keepdims=True)
    target = rng.uniform(0, L, size=(K, 1))
    a[:, :live] *= np.where(rowsum > 0, target / np.maximum(rowsum, 1e-300), 0)
    a = np.clip(a, -L, L)
    b = rng.uniform(-0.5, 1.0, size=K)
    r = scheme.range_size
    aux = rng.uniform(0, 1, size=(n_aux, r, r)) if aux_mode == "fixed" else np.zeros((0, r, r))
    return CollageCode(scheme, width, height, channels, gamma, a, b, aux=aux, augmented=augmented, aux_mode=aux_mode)


def random_pifs_code(
    rng: np.random.Generator,
    width: int,
    height: int,
    scheme: PartitionScheme,
    *,
    channels: int = 1,
    augmented: bool = False,
    a_range: tuple[float, float] = (0.3, 0.8),
) -> PifsCode:
    K = scheme.ranges_per_plane(width, height) * channels
    N = scheme.domains_per_plane(width, height)
    a = rng.uniform(*a_range, size=K) * rng.choice([-1, 1], size=K)
    b = np.where(a < 0, 0.5, 0.1) + rng.uniform(0, 0.4, size=K)
    aug = rng.integers(0, raster.N_AUGMENTATIONS, size=K) if augmented else np.zeros(K, dtype=int)
    return PifsCode(scheme, width, height, channels, rng.integers(0, N, size=K), aug, a, b, augmented=augmented)


def pifs_attractor(code: PifsCode) -> RasterImage:
    return decode_pifs(code, SolveConfig(tolerance=1e-12, max_iters=5000))


def selfsimilar_image(size: int = 128, seed: int = 7) -> RasterImage:
    """A grayscale attractor of a random PIFS code, so it is exactly self-similar."""
    rng = np.random.default_rng(seed)
    scheme = PartitionScheme(size // 16, size // 8, size // 8)
    code = random_pifs_code(rng, size, size, scheme, augmented=True, a_range=(0.4, 0.75))
    img = pifs_attractor(code)
    lo, hi = img.data.min(), img.data.max()
    return RasterImage.from_array((img.data - lo) / max(hi - lo, 1e-12))
