import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icogauge.checks import COMBOS, constraint_image
from icogauge.errors import ContractViolation, ShapeError
from icogauge.fields import REGULAR, TRIVIAL, FieldType, IcoSignal, random_signal, signal_from_pixels, signal_to_pixels
from icogauge.geometry import NUM_CORNERS, num_pixels
from icogauge.ops import (
    HEX_TAPS,
    act,
    expand_kernel,
    gconv,
    gpad,
    hexconv2d,
    orientation_pool,
    pool_hex,
    rotate_hexkernel,
    zero_pad,
)

RING = np.arange(1, 7)


def test_rotate_hexkernel_examples():
    w = np.array([1, 2, 3, 4, 5, 6, 7.0])
    assert np.array_equal(rotate_hexkernel(w, 0), w)
    assert np.array_equal(rotate_hexkernel(w, 6), w)
    assert np.array_equal(rotate_hexkernel(w, 1), [6, 1, 2, 3, 4, 5, 7])


@given(st.integers(-20, 20), st.integers(-20, 20))
def test_rotate_hexkernel_composes(a, b):
    w = np.arange(14.0).reshape(2, 7)
    assert np.array_equal(rotate_hexkernel(rotate_hexkernel(w, a), b), rotate_hexkernel(w, a + b))


# --------------------------------------------------------------------------
# gpad


def _border_cells(a):
    rec = a.padding
    return rec[:, 0], rec[:, 1], rec[:, 2]


def test_gpad_constant_scalar(geo):
    g, a, _ = geo(2)
    c = 2.75
    pix = np.full((g.num_pixels, 1), c)
    padded = gpad(signal_from_pixels(g, a, FieldType.scalar(1), pix), a)
    ch, i, j = _border_cells(a)
    vals = padded.charts[0, 0][ch, i, j]
    src_pix = a.pixel_map[a.padding[:, 3], a.padding[:, 4], a.padding[:, 5]]
    assert np.all(vals[src_pix >= NUM_CORNERS] == c)
    assert padded.pad_state == "valid"


def test_gpad_regular_shift_plus_one(geo):
    g, a, _ = geo(2)
    ft = FieldType.regular(1)
    pix = np.zeros((g.num_pixels, 6))
    pix[NUM_CORNERS:] = np.arange(10, 16)  # channels a..f as 10..15
    padded = gpad(signal_from_pixels(g, a, ft, pix), a).charts[0]
    recs = [r for r in a.padding if r[6] == 1 and a.pixel_map[r[3], r[4], r[5]] >= NUM_CORNERS]
    assert recs
    for c, i, j, *_ in recs:
        assert list(padded[:, c, i, j]) == [15, 10, 11, 12, 13, 14]
    recs = [r for r in a.padding if r[6] == -1 and a.pixel_map[r[3], r[4], r[5]] >= NUM_CORNERS]
    assert recs
    for c, i, j, *_ in recs:
        assert list(padded[:, c, i, j]) == [11, 12, 13, 14, 15, 10]


def test_gpad_zero_and_deterministic(geo):
    g, a, _ = geo(2)
    z = signal_from_pixels(g, a, FieldType.regular(2), np.zeros((g.num_pixels, 12)))
    assert not np.any(gpad(z, a).data)
    x = random_signal(g, a, FieldType.regular(2), 2, 0)
    assert np.array_equal(gpad(x, a).data, gpad(x, a).data)
    # interiors pass through untouched
    p = gpad(x, a)
    assert np.array_equal(signal_to_pixels(a, p), signal_to_pixels(a, x))


def test_gpad_matches_records(geo, rng):
    g, a, _ = geo(3)
    ft = FieldType(((TRIVIAL, 1), (REGULAR, 1)))
    x = random_signal(g, a, ft, 1, 3)
    p = gpad(x, a).charts[0]
    src = x.charts[0]
    for c, i, j, sc, si, sj, k in a.padding:
        assert np.array_equal(p[:, c, i, j], src[ft.channel_perm(k), sc, si, sj])


def test_gpad_zeroes_corners(geo):
    g, a, _ = geo(2)
    x = random_signal(g, a, FieldType.scalar(1), 1, 0)
    x.data[...] += 1.0  # dirty everything, including corner cells
    p = gpad(x, a).charts[0, 0]
    for c, cells in enumerate(a.corner_positions):
        for i, j in cells:
            assert p[c, i, j] == 0


def test_gpad_resolution_mismatch(geo):
    g, a, _ = geo(2)
    with pytest.raises(ShapeError):
        gpad(random_signal(g, a, FieldType.scalar(1), 1, 0), geo(3)[1])


# --------------------------------------------------------------------------
# kernel expansion


def _ref_expand(w, rin, rout):
    """Expanded kernel written directly from the orbit rule."""
    c_out, cin_tot, _ = w.shape
    out = np.zeros((c_out * rout, cin_tot, 3, 3))
    for o in range(c_out):
        for u in range(rout):
            for ci in range(cin_tot // rin):
                for v in range(rin):
                    base = w[o, ci * rin + (v - u) % rin]
                    rot = rotate_hexkernel(base, u)
                    for d, (di, dj) in enumerate(HEX_TAPS):
                        out[o * rout + u, ci * rin + v, di + 1, dj + 1] = rot[d]
    return out


def test_expand_s2r_shape_and_copies(rng):
    w = rng.normal(size=(1, 1, 7))
    k = expand_kernel(w, TRIVIAL, REGULAR)
    assert k.shape == (6, 1, 3, 3)
    assert np.array_equal(k, _ref_expand(w, 1, 6))
    assert len({tuple(k[u, 0].ravel()) for u in range(6)}) == 6


def test_expand_r2r_shape_and_orbits(rng):
    w = rng.normal(size=(1, 6, 7))
    k = expand_kernel(w, REGULAR, REGULAR)
    assert k.shape == (6, 6, 3, 3)
    assert np.array_equal(k, _ref_expand(w, 6, 6))
    # all 42 free weights appear, each in 6 filters
    vals, counts = np.unique(k[:, :, [0, 0, 1, 1, 1, 2, 2], [0, 1, 0, 1, 2, 1, 2]], return_counts=True)
    assert len(vals) == 42 and np.all(counts == 6)


def test_expand_s2s_isotropic(rng):
    w = rng.normal(size=(2, 3, 7))
    k = expand_kernel(w, TRIVIAL, TRIVIAL)
    assert k.shape == (2, 3, 3, 3)
    ring = k[..., [1, 0, 0, 1, 2, 2], [2, 1, 0, 0, 1, 2]]
    assert np.allclose(ring, ring[..., :1])
    assert np.allclose(ring[..., 0], w[..., :6].mean(axis=-1))
    assert np.array_equal(k[..., 1, 1], w[..., 6])
    for s in range(6):
        assert np.array_equal(constraint_image(k, s, FieldType.scalar(3), FieldType.scalar(2)), k)


@pytest.mark.parametrize("combo", list(COMBOS))
def test_expand_masked_cells_zero(combo, rng):
    fi, fo = COMBOS[combo]
    k = expand_kernel(rng.normal(size=(fo.num_fields, fi.total_channels, 7)), fi.homogeneous, fo.homogeneous)
    assert not np.any(k[..., 0, 2]) and not np.any(k[..., 2, 0])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(COMBOS)), st.integers(0, 2**31), st.integers(0, 5))
def test_kernel_constraint_bitwise(combo, seed, k):
    fi, fo = COMBOS[combo]
    w = np.random.default_rng(seed).normal(size=(fo.num_fields, fi.total_channels, 7))
    kern = expand_kernel(w, fi.homogeneous, fo.homogeneous)
    assert np.array_equal(constraint_image(kern, k, fi, fo), kern)


def test_constraint_rejects_unconstrained_kernel(rng):
    fi, fo = COMBOS["r2r"]
    kern = rng.normal(size=(18, 12, 3, 3))
    assert not np.array_equal(constraint_image(kern, 1, fi, fo), kern)


def test_expand_wrong_shape():
    with pytest.raises(ShapeError):
        expand_kernel(np.zeros((1, 6, 6)), REGULAR, REGULAR)
    with pytest.raises(ShapeError):
        expand_kernel(np.zeros((1, 5, 7)), REGULAR, REGULAR)


# --------------------------------------------------------------------------
# convolution


def _delta_kernel(c):
    k = np.zeros((c, c, 3, 3))
    for i in range(c):
        k[i, i, 1, 1] = 1.0
    return k


def test_hexconv_zero_kernel(geo):
    g, a, _ = geo(2)
    x = gpad(random_signal(g, a, FieldType.scalar(2), 2, 0), a)
    out = hexconv2d(x, np.zeros((3, 2, 3, 3)))
    assert not np.any(out.data) and out.pad_state == "stale"


def test_hexconv_delta_kernel(geo):
    g, a, _ = geo(2)
    x = random_signal(g, a, FieldType.scalar(2), 2, 0)
    out = hexconv2d(gpad(x, a), _delta_kernel(2))
    assert np.array_equal(signal_to_pixels(a, out), signal_to_pixels(a, x))


def test_hexconv_requires_padding(geo):
    g, a, _ = geo(1)
    x = random_signal(g, a, FieldType.scalar(1), 1, 0)
    with pytest.raises(ContractViolation):
        hexconv2d(x, _delta_kernel(1))
    with pytest.raises(ContractViolation):
        pool_hex(x)


def test_hexconv_rejects_unmasked_kernel(geo, rng):
    g, a, _ = geo(2)
    x = gpad(random_signal(g, a, FieldType.scalar(1), 1, 0), a)
    k = rng.normal(size=(1, 1, 3, 3))
    with pytest.raises(ValueError, match="masked"):
        hexconv2d(x, k)


def test_constant_input_gives_weight_sum(geo, rng):
    g, a, _ = geo(2)
    from icogauge.oracle import build_stencil, oracle_gconv

    ft = FieldType.scalar(1)
    w = rng.normal(size=(1, 1, 7))
    pix = np.ones((1, g.num_pixels, 1))
    pix[:, :NUM_CORNERS] = 0
    fast = signal_to_pixels(a, gconv(signal_from_pixels(g, a, ft, pix), w, ft, ft, atlas=a))[0, :, 0]
    ref = oracle_gconv(g, build_stencil(g, a), pix, w, ft, ft)[0, :, 0]
    assert np.allclose(fast[NUM_CORNERS:], ref[NUM_CORNERS:], atol=1e-12)
    # pixels away from the corners see seven unit inputs
    far = [p for p in range(NUM_CORNERS, g.num_pixels) if np.all(g.neighbors[p] >= NUM_CORNERS)]
    assert np.allclose(fast[far], w[0, 0, 6] + 6 * w[0, 0, :6].mean())


def test_gconv_output_shape(geo, rng):
    g, a, _ = geo(2)
    fi, fo = FieldType.regular(2), FieldType.regular(3)
    x = random_signal(g, a, fi, 4, 0)
    w = rng.normal(size=(3, 12, 7))
    assert gconv(x, w, fi, fo, atlas=a).data.shape == (4, 18, 30, 10)
    out = gconv(x, w, fi, fo, 2, atlas=a)
    assert out.resolution == 1 and out.data.shape == (4, 18, 5 * 4, 6)
    with pytest.raises(ShapeError):
        gconv(x, w[:, :6], fi, fo, atlas=a)
    with pytest.raises(ShapeError):
        gconv(x, rng.normal(size=(3, 2, 7)), FieldType.scalar(2), fo, atlas=a)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_stride2_samples_coarse_grid_pixels(geo, r):
    g, a, _ = geo(r)
    gc, ac, _ = geo(r - 1)
    ids = np.arange(g.num_pixels, dtype=np.float64)[:, None]
    sig = gpad(signal_from_pixels(g, a, FieldType.scalar(1), ids), a)
    out = hexconv2d(sig, _delta_kernel(1), stride=2)
    assert out.resolution == r - 1
    got = signal_to_pixels(ac, out)[0, :, 0]
    assert np.array_equal(got[NUM_CORNERS:], np.arange(NUM_CORNERS, gc.num_pixels))
    assert np.allclose(g.positions[: gc.num_pixels], gc.positions)


def test_scalar_gconv_is_masked_correlation(geo, rng):
    """With trivial reps, gconv is a plain 3x3 correlation on the padded charts."""
    g, a, _ = geo(2)
    ft = FieldType.scalar(2)
    x = random_signal(g, a, ft, 1, 0)
    w = rng.normal(size=(2, 2, 7))
    padded = gpad(x, a).charts[0]
    k = expand_kernel(w, TRIVIAL, TRIVIAL)
    out = gconv(x, w, ft, ft, atlas=a).charts[0]
    n = a.n
    for c in range(5):
        for i in range(1, n + 1):
            for j in range(1, 2 * n + 1):
                if a.pixel_map[c, i, j] < NUM_CORNERS:
                    continue
                patch = padded[:, c, i - 1 : i + 2, j - 1 : j + 2]
                want = np.einsum("oiab,iab->o", k, patch)
                assert np.allclose(out[:, c, i, j], want, atol=1e-12)


@pytest.mark.parametrize("combo", list(COMBOS))
@pytest.mark.parametrize("stride", [1, 2])
def test_gconv_equivariance_64bit(geo, combo, stride, rng):
    r = 2
    g, a, grp = geo(r)
    ao, grpo = geo(r - stride + 1)[1], geo(r - stride + 1)[2]
    fi, fo = COMBOS[combo]
    x = random_signal(g, a, fi, 1, 0)
    w = rng.normal(size=(fo.num_fields, fi.total_channels, 7))
    y = gconv(x, w, fi, fo, stride, atlas=a)
    for i in range(60):
        lhs = signal_to_pixels(ao, act(grpo[i], y, ao))
        rhs = signal_to_pixels(ao, gconv(act(grp[i], x, a), w, fi, fo, stride, atlas=a))
        assert np.abs(lhs - rhs)[:, NUM_CORNERS:].max() <= 1e-12


def test_no_pad_breaks_equivariance(geo, rng):
    """Zero padding in place of gauge padding is not equivariant; guards the test above against vacuity."""
    from icogauge.ops import conv_forward, hex_taps

    g, a, grp = geo(2)
    fi, fo = COMBOS["r2r"]
    x = random_signal(g, a, fi, 1, 0)
    w = rng.normal(size=(3, 12, 7))
    taps = hex_taps(expand_kernel(w, REGULAR, REGULAR))

    def nopad(s):
        return IcoSignal(conv_forward(zero_pad(s, a).data, taps, 2, 1)[0], 2, fo)

    worst = max(np.abs(signal_to_pixels(a, act(el, nopad(x), a)) - signal_to_pixels(a, nopad(act(el, x, a)))).max()
                for el in grp)
    assert worst > 1e-2


# --------------------------------------------------------------------------
# group action


def test_act_identity(geo):
    g, a, grp = geo(2)
    x = random_signal(g, a, FieldType.regular(2), 2, 0)
    assert np.array_equal(act(grp[0], x, a).data, x.data)


def test_act_homomorphism_random_pairs(geo):
    g, a, grp = geo(2)
    ft = FieldType(((TRIVIAL, 1), (REGULAR, 2)))
    x = random_signal(g, a, ft, 1, 0)
    pairs = np.random.default_rng(0).integers(0, 60, size=(100, 2))
    for i, j in pairs:
        lhs = act(grp[i], act(grp[j], x, a), a)
        rhs = act(grp[grp.compose(i, j)], x, a)
        assert np.array_equal(lhs.data, rhs.data)


def test_act_scalar_is_permutation(geo):
    g, a, grp = geo(2)
    x = random_signal(g, a, FieldType.scalar(1), 1, 0)
    pix = signal_to_pixels(a, x)[0, :, 0]
    for el in grp:
        moved = signal_to_pixels(a, act(el, x, a))[0, :, 0]
        assert np.array_equal(moved[el.pixel_perm], pix)


def test_act_resolution_mismatch(geo):
    g, a, grp = geo(2)
    with pytest.raises(ShapeError):
        act(geo(1)[2][3], random_signal(g, a, FieldType.scalar(1), 1, 0), a)


# --------------------------------------------------------------------------
# pooling


def test_orientation_pool_examples(geo):
    g, a, grp = geo(1)
    pix = np.zeros((1, g.num_pixels, 6))
    pix[:, NUM_CORNERS:] = [1, 5, 2, 0, 3, 4]
    out = orientation_pool(signal_from_pixels(g, a, FieldType.regular(1), pix))
    assert out.field_type == FieldType.scalar(1)
    assert np.all(signal_to_pixels(a, out)[0, NUM_CORNERS:, 0] == 5)
    pix[:, NUM_CORNERS:] = 2.5
    out = orientation_pool(signal_from_pixels(g, a, FieldType.regular(1), pix))
    assert np.all(signal_to_pixels(a, out)[0, NUM_CORNERS:, 0] == 2.5)


def test_orientation_pool_rejects_scalars(geo):
    g, a, _ = geo(1)
    with pytest.raises(TypeError):
        orientation_pool(random_signal(g, a, FieldType.scalar(6), 1, 0))


def test_orientation_pool_equivariance_exact(geo):
    g, a, grp = geo(2)
    x = random_signal(g, a, FieldType.regular(3), 2, 0)
    y = orientation_pool(x)
    for el in grp:
        assert np.array_equal(act(el, y, a).data, orientation_pool(act(el, x, a)).data)


def test_pool_hex_constant(geo):
    g, a, _ = geo(2)
    ac = geo(1)[1]
    pix = np.full((1, g.num_pixels, 6), 1.5)
    out = pool_hex(gpad(signal_from_pixels(g, a, FieldType.regular(1), pix), a))
    assert out.resolution == 1
    assert np.all(signal_to_pixels(ac, out)[0, NUM_CORNERS:] == 1.5)


def test_pool_hex_spike(geo):
    g, a, _ = geo(2)
    ac = geo(1)[1]
    p = 20  # a coarse pixel, hence an anchor
    assert p < num_pixels(1)
    pix = np.zeros((1, g.num_pixels, 1))
    pix[0, p] = 3.0
    out = signal_to_pixels(ac, pool_hex(gpad(signal_from_pixels(g, a, FieldType.scalar(1), pix), a)))[0, :, 0]
    assert out[p] == 3.0


def test_pool_hex_equivariance_exact(geo):
    g, a, grp = geo(2)
    ac, grpc = geo(1)[1], geo(1)[2]
    x = random_signal(g, a, FieldType.regular(2), 2, 0)
    y = pool_hex(gpad(x, a))
    for i, el in enumerate(grp):
        lhs = signal_to_pixels(ac, act(grpc[i], y, ac))
        rhs = signal_to_pixels(ac, pool_hex(gpad(act(el, x, a), a)))
        assert np.array_equal(lhs[:, NUM_CORNERS:], rhs[:, NUM_CORNERS:])
