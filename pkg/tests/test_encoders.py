import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ncollage import encoders
from ncollage.collage import SolveConfig, ct_bound, decode, lipschitz_bound
from ncollage.encoders import (
    EncoderConfig,
    encode_blockwise,
    encode_collage,
    encode_collage_gd,
    encode_collage_ls,
    fractalize_encode,
    surrogate_loss,
)
from ncollage.errors import ArgumentError, PartitionError
from ncollage.metrics import psnr
from ncollage.pifs import ls_affine_match
from ncollage.raster import PartitionScheme, RasterImage
from ncollage.synthetic import selfsimilar_image

FAST = EncoderConfig(gd_steps=20)


def noise(seed, shape=(8, 8)):
    return RasterImage.from_array(np.random.default_rng(seed).uniform(0, 1, shape))


def test_config_validation():
    for bad in (dict(a_max=1.0), dict(gd_rate=0), dict(ridge_lambda=-1), dict(threads=0)):
        with pytest.raises(ArgumentError):
            EncoderConfig(**bad)


def test_single_domain_reduces_to_affine_match():
    x = noise(0, (4, 4))
    scheme = PartitionScheme(2, 4, 4)
    code = encode_collage_ls(x, scheme, EncoderConfig(ridge_lambda=0.0))
    d = encoders._design(x, scheme, False, "fixed", None)
    for k in range(4):
        a, b, _ = ls_affine_match(d.cells[0, 0], d.ranges[0, k])
        assert code.gamma[k, 0] == 1.0
        assert code.a[k, 0] == pytest.approx(a, abs=1e-12)
        assert code.b[k] == pytest.approx(b, abs=1e-12)


def test_constant_image_gives_offsets_only():
    x = RasterImage.from_array(np.full((8, 8), 0.4))
    code = encode_collage_ls(x, PartitionScheme(2, 4, 2))
    assert np.all(code.a == 0) and np.allclose(code.b, 0.4)
    assert surrogate_loss(x, code) < 1e-25


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1e-3, 1.0]))
def test_ridge_matches_normal_equations(seed, lam):
    rng = np.random.default_rng(seed)
    cells = rng.uniform(size=(3, 16))
    ranges = rng.uniform(size=(5, 16))
    coef, b, fell_back = encoders.ridge_coefficients(ranges, cells, lam)
    ref_c, ref_b = oracles.ridge_normal_equations(ranges, cells, lam)
    assert not fell_back
    assert np.allclose(coef, ref_c, atol=1e-8) and np.allclose(b, ref_b, atol=1e-8)


def test_larger_ridge_shrinks_coefficients():
    rng = np.random.default_rng(1)
    base = rng.uniform(size=16)
    cells = np.stack([base, base + 0.01 * rng.normal(size=16)])
    ranges = rng.uniform(size=(1, 16))
    c0, _, _ = encoders.ridge_coefficients(ranges, cells, 0.0)
    c1, _, _ = encoders.ridge_coefficients(ranges, cells, 1.0)
    assert np.linalg.norm(c1) < np.linalg.norm(c0)


def test_singular_system_falls_back():
    cells = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
    coef, _, fell_back = encoders.ridge_coefficients(np.array([[1.0, 2.0, 3.0]]), cells, 0.0)
    assert fell_back and np.all(np.isfinite(coef))


@given(st.integers(0, 2**32 - 1))
def test_factorize_is_exact_inside_bound(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(4, 5))
    c = c / np.abs(c).sum(axis=1, keepdims=True) * rng.uniform(0, 0.9, (4, 1))
    c[0] = 0
    gamma, a = encoders.factorize(c, 0.95)
    assert np.allclose(gamma * a, c, atol=1e-15)
    assert np.allclose(gamma.sum(axis=1), 1) and np.all(gamma >= 0) and np.all(np.abs(a) <= 0.95)
    assert np.all(gamma[0] == 0.2) and np.all(a[0] == 0)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 2.0))
def test_l1_projection(seed, radius):
    v = np.random.default_rng(seed).normal(size=(3, 6))
    p = encoders.project_l1_ball(v, radius)
    assert np.all(np.abs(p).sum(axis=1) <= radius + 1e-12)
    inside = np.abs(v).sum(axis=1) <= radius
    assert np.array_equal(p[inside], v[inside])
    # optimality: the projection is no farther than random feasible points
    rng = np.random.default_rng(seed + 1)
    for _ in range(20):
        q = rng.normal(size=(3, 6))
        q = q / np.abs(q).sum(axis=1, keepdims=True) * radius * rng.uniform(0, 1, (3, 1))
        assert np.all(np.linalg.norm(v - p, axis=1) <= np.linalg.norm(v - q, axis=1) + 1e-12)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.integers(0, 2))
def test_every_encoder_emits_valid_codes(seed, augmented, n_aux):
    x = noise(seed)
    scheme = PartitionScheme(2, 4, 2)
    cfg = EncoderConfig(use_augmentations=augmented, aux_count=n_aux, gd_steps=10, seed=seed)
    for code in (encode_collage_ls(x, scheme, cfg), encode_collage(x, scheme, cfg)):
        code.check()
        assert lipschitz_bound(code).contractive
        bound, _ = ct_bound(x, code)
        z = decode(code, SolveConfig(mode="closed_form"))
        assert np.max(np.abs(x.data - z.data)) <= bound + 1e-9


def test_gd_steps_zero_is_identity():
    x = noise(2)
    scheme = PartitionScheme(2, 4, 4)
    init = encode_collage_ls(x, scheme, a_max=0.9)
    assert encode_collage_gd(x, scheme, EncoderConfig(gd_steps=0), init) is init


def test_gd_never_increases_loss():
    x = noise(3)
    scheme = PartitionScheme(2, 4, 2)
    rng = np.random.default_rng(3)
    K, M = 16, 9
    from ncollage.collage import CollageCode

    init = CollageCode(scheme, 8, 8, 1, rng.dirichlet(np.ones(M), K), rng.uniform(-0.8, 0.8, (K, M)),
                       rng.uniform(size=K))
    out = encode_collage_gd(x, scheme, EncoderConfig(gd_steps=200), init)
    out.check()
    assert surrogate_loss(x, out) <= surrogate_loss(x, init)
    assert surrogate_loss(x, out) < 0.5 * surrogate_loss(x, init)


def test_gradient_with_rotation_aux():
    x = noise(4, (4, 4))
    obj = encoders.SurrogateObjective(x, PartitionScheme(1, 4, 4), aux_mode="rotations")
    rng = np.random.default_rng(4)
    code = encode_collage_ls(x, PartitionScheme(1, 4, 4), aux_mode="rotations", a_max=0.9)
    params = obj.params_from_code(code)
    theta = params.flat() + rng.normal(0, 0.1, params.flat().size)
    params = params.unflat(theta)
    g = obj.value_and_grad(params)[1].flat()
    h = 1e-5
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (obj.value(params.unflat(tp)) - obj.value(params.unflat(tm))) / (2 * h)
        assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd))


def test_collage_pipeline_improves_on_ls():
    x = selfsimilar_image(32, seed=1)
    scheme = PartitionScheme(4, 8, 8)
    ls = encode_collage_ls(x, scheme, a_max=0.9)
    full = encode_collage(x, scheme, EncoderConfig(gd_steps=50))
    assert surrogate_loss(x, full) <= surrogate_loss(x, ls)


def test_encoder_is_deterministic():
    x = noise(5)
    scheme = PartitionScheme(2, 4, 2)
    cfg = EncoderConfig(aux_count=2, gd_steps=20, seed=9)
    a, b = encode_collage(x, scheme, cfg), encode_collage(x, scheme, cfg)
    for f in ("gamma", "a", "b", "aux"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_fractalize_beats_offset_only_baseline():
    x = selfsimilar_image(16, seed=3)
    code = fractalize_encode(x, EncoderConfig(gd_steps=100))
    assert code.N == 1 and code.V == 3 and code.aux_mode == "rotations"
    code.check()
    baseline = code.with_(a=np.zeros_like(code.a), b=encoders._design(x, code.scheme, False, "rotations", None).ranges.mean(axis=2).reshape(-1))
    assert surrogate_loss(x, code) <= surrogate_loss(x, baseline)
    assert psnr(x, decode(code)) >= psnr(x, decode(baseline)) - 1e-9


def test_fractalize_constant_image():
    x = RasterImage.from_array(np.full((8, 8), 0.25))
    code = fractalize_encode(x, EncoderConfig(gd_steps=10))
    assert np.max(np.abs(decode(code).data - 0.25)) < 1e-6


def test_fractalize_needs_square():
    with pytest.raises(ArgumentError):
        fractalize_encode(noise(0, (8, 4)))


def test_blockwise_single_block_equals_direct():
    x = noise(6)
    scheme = PartitionScheme(2, 4, 2)
    [one] = encode_blockwise(x, 8, scheme, FAST, "collage")
    direct = encode_collage(x, scheme, FAST, train_aux=False)
    assert np.array_equal(one.a, direct.a) and np.array_equal(one.b, direct.b)


@pytest.mark.parametrize("method", ["pifs", "collage"])
def test_blockwise_identical_blocks_and_threads(method):
    tile = noise(7).data[0]
    x = RasterImage.from_array(np.tile(tile, (2, 2)))
    scheme = PartitionScheme(2, 4, 2)
    cfg = EncoderConfig(gd_steps=10, aux_count=1)
    serial = encode_blockwise(x, 8, scheme, cfg, method, threads=1)
    parallel = encode_blockwise(x, 8, scheme, cfg, method, threads=4)
    for c in serial[1:] + parallel:
        for f in ("a", "b"):
            assert np.array_equal(getattr(c, f), getattr(serial[0], f))
    y = encoders.decode_blockwise(serial, 16, 16)
    assert y.shape == (1, 16, 16)


def test_blockwise_requires_divisible_size():
    with pytest.raises(PartitionError):
        encode_blockwise(noise(0, (12, 12)), 8, PartitionScheme(2, 4, 2))
