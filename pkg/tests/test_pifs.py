import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ncollage import pifs
from ncollage.collage import SolveConfig, decode
from ncollage.encoders import EncoderConfig
from ncollage.errors import PartitionError, ShapeError
from ncollage.pifs import decode_pifs, encode_pifs, ls_affine_match, pifs_residual
from ncollage.raster import PartitionScheme, RasterImage
from ncollage.synthetic import random_pifs_code


def test_ls_examples():
    assert ls_affine_match([0, 2, 4, 6], [1, 2, 3, 4]) == (0.5, 1.0, 0.0)
    a, b, res = ls_affine_match([0.1, 0.5, 0.9], [0.7, 0.7, 0.7])
    assert a == 0.0 and b == pytest.approx(0.7) and res == pytest.approx(0, abs=1e-30)
    assert ls_affine_match([0.3, 0.3], [0, 1]) == (0.0, 0.5, 0.5)
    with pytest.raises(ShapeError):
        ls_affine_match([1, 2], [1, 2, 3])


def test_ls_clamps_scale():
    a, b, _ = ls_affine_match([0, 1], [0, 3], a_max=0.9)
    assert a == 0.9 and b == pytest.approx(1.05)


@given(
    arrays(np.float64, 4, elements=st.floats(-1, 1, allow_nan=False)),
    arrays(np.float64, 4, elements=st.floats(-1, 1, allow_nan=False)),
)
def test_ls_beats_grid_search(d, r):
    a_star, _, res_star = ls_affine_match(d, r, 0.999)
    grid_a = np.arange(-0.999, 0.999 + 1e-9, 1e-3)
    # b is optimal in closed form for every a, so the grid over b reduces to its best point
    best_b = np.clip(np.round((r.mean() - grid_a * d.mean()) / 1e-3) * 1e-3, -2, 2)
    cand = np.stack([grid_a, best_b], axis=1)
    for db in (-1e-3, 0.0, 1e-3):
        pred = cand[:, :1] * d[None] + (cand[:, 1:] + db)
        assert np.min(np.sum((pred - r[None]) ** 2, axis=1)) >= res_star - 1e-9


def test_constant_image_matches_exactly():
    x = RasterImage.from_array(np.full((8, 8), 0.3))
    code = encode_pifs(x, PartitionScheme(2, 4, 2))
    assert np.all(code.a == 0) and np.allclose(code.b, 0.3)
    assert pifs_residual(x, code) == pytest.approx(0, abs=1e-25)


@pytest.mark.parametrize("augmented", [False, True])
@pytest.mark.parametrize("channels", [1, 3])
def test_search_matches_oracle(augmented, channels):
    rng = np.random.default_rng(channels + 10 * augmented)
    x = RasterImage.from_array(rng.uniform(0, 1, (channels, 8, 12)))
    scheme = PartitionScheme(2, 4, 2)
    code = encode_pifs(x, scheme, EncoderConfig(use_augmentations=augmented), threads=3)
    ref = oracles.pifs_search(x.data, 2, 4, 2, augmented)
    assert list(zip(code.domain_index.tolist(), code.aug.tolist(), code.a.tolist(), code.b.tolist())) == ref


def test_ties_pick_lowest_candidate():
    # the image is four copies of one tile: every domain is an equally good match
    tile = np.random.default_rng(0).uniform(size=(4, 4))
    x = RasterImage.from_array(np.tile(tile, (2, 2)))
    code = encode_pifs(x, PartitionScheme(2, 4, 4), EncoderConfig(use_augmentations=True))
    assert np.all(code.domain_index == 0)


@given(st.integers(0, 2**32 - 1))
def test_augmentation_never_hurts(seed):
    rng = np.random.default_rng(seed)
    x = RasterImage.from_array(rng.uniform(0, 1, (8, 8)))
    scheme = PartitionScheme(2, 4, 2)
    plain = encode_pifs(x, scheme, EncoderConfig())
    aug = encode_pifs(x, scheme, EncoderConfig(use_augmentations=True))
    assert pifs_residual(x, aug) <= pifs_residual(x, plain) + 1e-12


def test_thread_count_does_not_change_result():
    rng = np.random.default_rng(1)
    x = RasterImage.from_array(rng.uniform(0, 1, (3, 16, 16)))
    cfg = EncoderConfig(use_augmentations=True)
    codes = [encode_pifs(x, PartitionScheme(4, 8, 2), cfg, threads=t) for t in (1, 2, 5, 8)]
    assert all(c == codes[0] for c in codes)


def test_decode_matches_collage_equivalent():
    rng = np.random.default_rng(2)
    code = random_pifs_code(rng, 8, 8, PartitionScheme(2, 4, 2), channels=3, augmented=True)
    a = decode_pifs(code, SolveConfig(tolerance=1e-12, max_iters=2000))
    b = decode(code.to_collage(), SolveConfig(mode="closed_form"))
    c = decode_pifs(code, SolveConfig(mode="closed_form"))
    assert np.max(np.abs(a.data - b.data)) < 1e-10
    assert np.max(np.abs(c.data - b.data)) < 1e-12


def test_apply_matches_collage_equivalent():
    rng = np.random.default_rng(3)
    code = random_pifs_code(rng, 8, 8, PartitionScheme(2, 4, 2), augmented=True)
    z = rng.uniform(size=(1, 8, 8))
    from ncollage.collage import apply_collage

    assert np.allclose(pifs.apply_pifs(code, z), apply_collage(RasterImage.from_array(z), code.to_collage()).data)


def test_attractor_is_recovered():
    from ncollage.synthetic import pifs_attractor

    rng = np.random.default_rng(4)
    code = random_pifs_code(rng, 16, 16, PartitionScheme(4, 8, 4), augmented=True)
    x = pifs_attractor(code)
    found = encode_pifs(x, code.scheme, EncoderConfig(use_augmentations=True))
    assert pifs_residual(x, found) < 1e-18


def test_partition_errors_propagate():
    with pytest.raises(PartitionError):
        encode_pifs(RasterImage.from_array(np.zeros((6, 6))), PartitionScheme(4, 8, 4))


def test_code_fields_validated():
    with pytest.raises(ShapeError):
        pifs.PifsCode(PartitionScheme(2, 4, 2), 4, 4, 1, [0, 0], [0] * 4, [0] * 4, [0] * 4)
