import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_spp
from regiongeo.boxes import Box
from regiongeo.receptive import CoordMap
from regiongeo.spp import (EmptyRegionError, RangeMax, batch_pool, pyramid_cells, region_cell_counts,
                           spatial_pool, spatial_pool_backward, spatial_pyramid_pool,
                           spatial_pyramid_pool_backward)

IDENT = CoordMap.identity()


def grid(H, W, D=1):
    return np.arange(1, H * W * D + 1, dtype=np.float64).reshape(H, W, D)


def test_pool_examples():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    assert spatial_pool(f, Box(0.5, 0.5, 2.5, 2.5), IDENT).tolist() == [4.0]
    assert spatial_pool(f, Box(0.5, 0.5, 1.5, 1.5), IDENT).tolist() == [1.0]
    assert spatial_pool(grid(3, 3), Box(1, 1, 5, 5), CoordMap.isotropic(4, 1)).tolist() == [5.0]


def test_pyramid_examples():
    f = grid(4, 4)
    out = spatial_pyramid_pool(f, Box(0.5, 0.5, 4.5, 4.5), IDENT, grid=2)
    assert out[:, :, 0].ravel().tolist() == [6, 8, 14, 16]
    assert np.array_equal(spatial_pyramid_pool(f, Box(1, 1, 3, 4), IDENT, 1)[0, 0],
                          spatial_pool(f, Box(1, 1, 3, 4), IDENT))
    const = np.full((6, 6, 3), 2.5)
    assert np.all(spatial_pyramid_pool(const, Box(0.5, 0.5, 6.5, 6.5), IDENT, 3) == 2.5)


def test_bin_boundary_belongs_to_both_bins():
    # region rows [1, 3] with grid=2 splits at 2; the cell centred on 2 feeds both bins
    f = np.zeros((3, 3, 1))
    f[1, 0, 0] = 7.0
    out = spatial_pyramid_pool(f, Box(1, 1, 3, 3), IDENT, grid=2)
    assert out[0, 0, 0] == 7.0 and out[1, 0, 0] == 7.0


def test_empty_bins_snap_to_nearest_cell():
    f = grid(5, 5)
    # tiny region between cell centres: nearest centre to (2.4, 3.6) is (2, 4)
    out = spatial_pool(f, Box(2.3, 3.55, 2.5, 3.65), IDENT)
    assert out.tolist() == [f[1, 3, 0]]
    # far outside the field snaps to the corner cell
    assert spatial_pool(f, Box(40, 40, 41, 41), IDENT).tolist() == [25.0]


def test_strict_mode_raises_only_for_wholly_empty_regions():
    f = grid(5, 5)
    with pytest.raises(EmptyRegionError):
        spatial_pool(f, Box(2.3, 3.55, 2.5, 3.65), IDENT, strict=True)
    # region holds one cell; grid=3 leaves some bins empty but strict mode still pools
    out = spatial_pyramid_pool(f, Box(1.8, 1.8, 2.2, 2.2), IDENT, grid=3, strict=True)
    assert np.all(out == f[1, 1, 0])


def test_batch_error_names_region_index():
    f = grid(5, 5)
    with pytest.raises(EmptyRegionError, match="index 1"):
        batch_pool(f, [Box(1, 1, 3, 3), Box(2.3, 3.55, 2.5, 3.65)], IDENT, strict=True)
    with pytest.raises(ValueError):
        batch_pool(f, [], IDENT)
    with pytest.raises(ValueError):
        spatial_pyramid_pool(f, Box(1, 1, 3, 3), IDENT, grid=0)


def random_case(rng):
    H, W, D = rng.integers(1, 17), rng.integers(1, 17), rng.integers(1, 9)
    field = rng.normal(size=(H, W, D))
    a_r, a_c = rng.choice([1, 2, 3, 4, 8, 16], 2)
    b_r, b_c = rng.choice([-1.5, 0, 1, 2.5, 3], 2) + rng.choice([0, rng.uniform(-1, 1)], 2)
    cmap = CoordMap(float(a_r), float(b_r), float(a_c), float(b_c))
    span_r, span_c = a_r * H + 4, a_c * W + 4
    if rng.random() < 0.3:
        # grid-aligned corners hit cell centres and bin boundaries exactly
        r = np.sort(rng.integers(-4, 2 * span_r, 2)) / 2
        c = np.sort(rng.integers(-4, 2 * span_c, 2)) / 2
        r[1] += 1 + rng.integers(0, 3) * a_r
        c[1] += 1 + rng.integers(0, 3) * a_c
    else:
        r = np.sort(rng.uniform(-3, span_r, 2))
        c = np.sort(rng.uniform(-3, span_c, 2))
        r[1] += 1e-3
        c[1] += 1e-3
    region = Box(r[0], c[0], r[1], c[1])
    return field, cmap, region, int(rng.integers(1, 5))


def test_matches_naive_loop(rng):
    for _ in range(300):
        field, cmap, region, grid = random_case(rng)
        ref = naive_spp(field, region.to_array(), cmap.alpha_row, cmap.beta_row,
                        cmap.alpha_col, cmap.beta_col, grid)
        assert np.array_equal(spatial_pyramid_pool(field, region, cmap, grid), ref)
        assert np.array_equal(spatial_pool(field, region, cmap),
                              naive_spp(field, region.to_array(), cmap.alpha_row, cmap.beta_row,
                                        cmap.alpha_col, cmap.beta_col, 1)[0, 0])


def test_outputs_are_input_values(rng):
    for _ in range(100):
        field, cmap, region, grid = random_case(rng)
        out = spatial_pyramid_pool(field, region, cmap, grid)
        for d in range(field.shape[2]):
            assert np.isin(out[:, :, d], field[:, :, d]).all()


def test_batch_equals_loop(rng):
    field = rng.normal(size=(13, 11, 5))
    cmap = CoordMap.isotropic(4, 2.5)
    lo = rng.uniform(-5, 50, (100, 2))
    regions = np.hstack([lo, lo + rng.uniform(0.1, 30, (100, 2))])
    for grid in (1, 2, 4):
        got = batch_pool(field, regions, cmap, grid)
        loop = np.stack([spatial_pyramid_pool(field, Box.from_array(r), cmap, grid) for r in regions])
        assert np.array_equal(got, loop)
        # partitioning the batch does not change anything
        table = RangeMax(field)
        halves = np.concatenate([batch_pool(field, regions[:37], cmap, grid, table=table),
                                 batch_pool(field, regions[37:], cmap, grid, table=table)])
        assert np.array_equal(got, halves)
    single = batch_pool(field, [Box(1, 1, 20, 20)], cmap, 2)
    assert np.array_equal(single[0], spatial_pyramid_pool(field, Box(1, 1, 20, 20), cmap, 2))
    dup = batch_pool(field, [Box(1, 1, 20, 20)] * 2, cmap, 2)
    assert np.array_equal(dup[0], dup[1])


def test_range_max_against_slices(rng):
    f = rng.normal(size=(9, 14, 3))
    t = RangeMax(f)
    for _ in range(300):
        r0, r1 = sorted(rng.choice(10, 2, replace=False))
        c0, c1 = sorted(rng.choice(15, 2, replace=False))
        assert np.array_equal(t.query(r0, r1, c0, c1), f[r0:r1, c0:c1].max(axis=(0, 1)))


@given(st.floats(-3, 20), st.floats(-3, 20), st.floats(0.01, 15), st.floats(0.01, 15),
       st.floats(0, 4), st.floats(0, 4), st.floats(0, 4), st.floats(0, 4))
def test_enlarging_never_decreases(r, c, h, w, e1, e2, e3, e4):
    field = np.random.default_rng(7).normal(size=(8, 8, 4))
    cmap = CoordMap.isotropic(2, 1.5)
    inner = Box(r, c, r + h, c + w)
    outer = Box(r - e1, c - e2, r + h + e3, c + w + e4)
    if region_cell_counts(cmap, [inner], 8, 8)[0] == 0:
        return  # snapped values are not covered by the monotonicity property
    assert np.all(spatial_pool(field, outer, cmap) >= spatial_pool(field, inner, cmap))


def test_region_cell_counts(rng):
    cmap = CoordMap(2, 1.5, 3, 0.5)
    for _ in range(100):
        lo = rng.uniform(-4, 30, 2)
        box = Box(lo[0], lo[1], lo[0] + rng.uniform(0.1, 20), lo[1] + rng.uniform(0.1, 20))
        r0, r1, c0, c1 = (a[0, 0, 0] for a in pyramid_cells((10, 9), [box], cmap, 1))
        count = region_cell_counts(cmap, [box], 10, 9)[0]
        if count:
            assert count == (r1 - r0) * (c1 - c0)


def test_backward_examples():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    region = Box(0.5, 0.5, 2.5, 2.5)
    g = spatial_pool_backward(f, region, IDENT, [1.0])
    assert g[:, :, 0].tolist() == [[0, 0], [0, 1]]
    assert not spatial_pool_backward(f, region, IDENT, [0.0]).any()


def test_backward_ties_go_to_first_row_major():
    f = np.ones((3, 3, 1))
    g = spatial_pool_backward(f, Box(0.5, 0.5, 3.5, 3.5), IDENT, [2.0])
    expected = np.zeros((3, 3, 1))
    expected[0, 0, 0] = 2.0
    assert np.array_equal(g, expected)


def test_backward_single_cell_perturbation(rng):
    f = rng.normal(size=(6, 6, 2))
    region = Box(1, 1, 6, 6)
    base = spatial_pool(f, region, IDENT)
    g = spatial_pool_backward(f, region, IDENT, [1.0, 1.0])
    eps = 1e-7
    for i in range(6):
        for j in range(6):
            p = f.copy()
            p[i, j] += eps
            diff = spatial_pool(p, region, IDENT) - base
            assert np.allclose(diff, g[i, j] * eps, atol=1e-12)


def _margin(field, region, cmap, grid):
    """Smallest gap between the largest and second-largest value of any bin."""
    r0, r1, c0, c1 = (a[0] for a in pyramid_cells(field.shape, region, cmap, grid))
    gap = np.inf
    for u in range(grid):
        for v in range(grid):
            w = np.sort(field[r0[u, v]:r1[u, v], c0[u, v]:c1[u, v]].reshape(-1, field.shape[2]), axis=0)
            if len(w) > 1:
                gap = min(gap, float(np.min(w[-1] - w[-2])))
    return gap


def test_pyramid_backward_finite_differences(rng):
    done = 0
    while done < 60:
        field, cmap, region, grid = random_case(rng)
        eps = 1e-6
        if _margin(field, region, cmap, grid) < 10 * eps:
            continue
        up = rng.normal(size=(grid, grid, field.shape[2]))
        grad = spatial_pyramid_pool_backward(field, region, cmap, grid, up)
        v = rng.normal(size=field.shape)
        f = lambda x: float(np.sum(up * spatial_pyramid_pool(x, region, cmap, grid)))
        fd = (f(field + eps * v) - f(field - eps * v)) / (2 * eps)
        an = float(np.sum(grad * v))
        assert abs(fd - an) <= 1e-4 * max(1.0, abs(an))
        done += 1
