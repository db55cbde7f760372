import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_grid
from plausible_shapes.observe import (
    DepthImage,
    ObsConfig,
    count_outliers,
    make_observation,
    obs_plausible,
    read_pgm,
    render_depth,
    sentinel_depth,
    unreliable_mask,
    write_pgm,
)
from plausible_shapes.voxelcore import VoxelGrid, shift_grid

R = 16


def grid_of(indices):
    return VoxelGrid.from_indices(indices, R, 0.01)


def slab(z0=6, lo=4, hi=12, depth=3):
    """Flat-faced block whose front face sits at k = z0."""
    idx = [(i, j, k) for i in range(lo, hi) for j in range(lo, hi) for k in range(z0, z0 + depth)]
    return grid_of(idx)


# -- rendering -----------------------------------------------------------------

def test_render_single_voxel():
    img = render_depth(grid_of([(3, 5, 7)]))
    s = sentinel_depth(grid_of([]))
    assert s == pytest.approx(1.6)
    assert img.values[3, 5] == pytest.approx(0.07)
    others = np.ones((R, R), bool)
    others[3, 5] = False
    assert np.all(img.values[others] == s)


def test_render_empty_all_sentinel():
    img = render_depth(VoxelGrid.empty(R))
    assert np.all(img.values == img.sentinel)
    assert not img.hit.any()


def test_render_nearest_wins():
    assert render_depth(grid_of([(3, 5, 7), (3, 5, 2)])).values[3, 5] == pytest.approx(0.02)


# -- observations --------------------------------------------------------------

def column_walk(g, vis):
    """Per-column oracle for the known-occupied / known-free voxels."""
    occ = np.zeros((R, R, R), np.uint8)
    free = np.zeros((R, R, R), np.uint8)
    for u in range(R):
        for v in range(R):
            if not vis[u, v]:
                continue
            for k in range(R):
                if g.values[u, v, k]:
                    occ[u, v, k] = 1
                    break
                free[u, v, k] = 1
    return occ, free


def test_single_interior_voxel_observation():
    g = grid_of([(7, 8, 9)])
    x = make_observation(g)
    assert x.known_occupied.occupied_indices().tolist() == [[7, 8, 9]]
    free = x.known_free.values
    assert free[7, 8, :9].all() and not free[7, 8, 9:].any()
    assert free.sum() == (R * R - 1) * R + 9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), first=st.integers(-3, 15), width=st.integers(1, 16))
def test_observation_matches_column_walk(seed, first, width):
    g = random_grid(np.random.default_rng(seed), R=R, p=0.05)
    x = make_observation(g, (first, width))
    occ, free = column_walk(g, x.visibility)
    assert np.array_equal(x.known_occupied.values, occ)
    assert np.array_equal(x.known_free.values, free)
    assert not np.any(x.known_occupied.values & x.known_free.values)


def test_slit_missing_object_sees_nothing():
    x = make_observation(slab(lo=8, hi=12), (0, 4))
    assert x.known_occupied.count() == 0
    assert x.visibility[:4].all() and not x.visibility[4:].any()


def test_full_width_slit_equals_no_slit():
    g = slab()
    assert make_observation(g, (0, R)) == make_observation(g)


# -- unreliable mask -------------------------------------------------------------

def test_constant_image_reliable():
    img = DepthImage(np.full((R, R), 0.3), 1.6)
    assert not unreliable_mask(img, 0.04).any()


def test_single_foreground_pixel_mask():
    v = np.full((R, R), 1.6)
    v[5, 5] = 0.05
    mask = unreliable_mask(DepthImage(v, 1.6), 0.04)
    # Jump pixels: the pixel and its 4-neighbours; dilation adds their 8-rings,
    # i.e. the 5x5 diamond-plus-ring = 5x5 block minus its 4 corners.
    expected = np.zeros((R, R), bool)
    expected[3:8, 3:8] = True
    for a, b in [(3, 3), (3, 7), (7, 3), (7, 7)]:
        expected[a, b] = False
    assert np.array_equal(mask, expected)


def test_smooth_ramp_reliable():
    v = 0.1 + 0.03 * np.arange(R)[:, None] * np.ones((1, R))
    assert not unreliable_mask(DepthImage(v, 1.6), 0.04).any()


def test_mask_at_border_uses_in_bounds_neighbours():
    v = np.full((R, R), 1.6)
    v[0, 0] = 0.05
    mask = unreliable_mask(DepthImage(v, 1.6), 0.04)
    assert mask[:3, :3].sum() == 9 - 1 and mask.sum() == 8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), thr=st.floats(0.005, 0.2))
def test_dilation_only_grows_mask(seed, thr):
    v = np.random.default_rng(seed).uniform(0, 0.2, (R, R))
    img = DepthImage(v, 1.6)
    d = v
    jump = np.zeros((R, R), bool)
    jump[:-1] |= np.abs(np.diff(d, axis=0)) > thr
    jump[1:] |= np.abs(np.diff(d, axis=0)) > thr
    jump[:, :-1] |= np.abs(np.diff(d, axis=1)) > thr
    jump[:, 1:] |= np.abs(np.diff(d, axis=1)) > thr
    mask = unreliable_mask(img, thr)
    assert np.all(mask[jump])
    assert np.all(~mask <= ~jump)


def test_mask_threshold_must_be_positive():
    with pytest.raises(ValueError):
        unreliable_mask(DepthImage(np.zeros((2, 2)), 1.0), 0)


# -- observation model -------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), use_slit=st.booleans())
def test_self_consistency(seed, use_slit):
    g = random_grid(np.random.default_rng(seed), R=R, p=0.1)
    x = make_observation(g, (4, 6) if use_slit else None)
    assert obs_plausible(x, g)


def test_camera_axis_shift_rejected_at_5cm():
    g = slab()
    x = make_observation(g)
    far = shift_grid(g, (0, 0, 5))
    assert far.count() == g.count()
    assert not obs_plausible(x, far, ObsConfig(delta=0.04))
    # Every interior (unmasked) face pixel differs by 0.05: 8x8 face minus the 2-pixel silhouette band.
    assert count_outliers(x, far) == 4 * 4


def test_camera_axis_shift_accepted_at_1cm():
    g = slab()
    assert obs_plausible(make_observation(g), shift_grid(g, (0, 0, 1)), ObsConfig(delta=0.04))


def test_hit_versus_empty_counts_as_mismatch():
    g = slab(lo=2, hi=14)
    x = make_observation(g)
    # A candidate with a hole through its middle predicts background where x
    # saw a face; only the hole's 3x3 core lies outside the dilated edge band.
    holed = g.values.copy()
    holed[5:12, 5:12, :] = 0
    assert count_outliers(x, VoxelGrid(holed)) == 9


def test_slit_occluded_pixels_ignored():
    g = slab(lo=2, hi=14)
    x = make_observation(g, (0, 6))
    other = g.values.copy()
    other[8:14, 4:12, :] = 0
    assert obs_plausible(x, VoxelGrid(other))
    assert not obs_plausible(make_observation(g), VoxelGrid(other))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.integers(1, 6), d1=st.floats(0.005, 0.08), extra=st.floats(0.0, 0.1))
def test_monotone_in_delta_and_budget(seed, shift, d1, extra):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, R=R, p=0.15, interior=2)
    x = make_observation(g)
    y = shift_grid(g, (0, 0, shift))
    n1 = count_outliers(x, y, ObsConfig(d1, mask_gradient_threshold=0.04))
    n2 = count_outliers(x, y, ObsConfig(d1 + extra, mask_gradient_threshold=0.04))
    assert n2 <= n1
    for b in range(3):
        if obs_plausible(x, y, ObsConfig(d1, b)):
            assert obs_plausible(x, y, ObsConfig(d1, b + 1))


def test_lattice_mismatch_rejected():
    g = slab()
    with pytest.raises(ValueError):
        count_outliers(make_observation(g), VoxelGrid(g.values, 0.02))


def test_obs_config_validation():
    with pytest.raises(ValueError):
        ObsConfig(delta=0)
    with pytest.raises(ValueError):
        ObsConfig(outlier_budget=-1)


def test_pgm_round_trip():
    img = render_depth(slab())
    data = write_pgm(img)
    assert data.startswith(b"P5\n16 16\n65535\n")
    mm = read_pgm(data)
    assert np.array_equal(mm, np.rint(img.values * 1000).astype(np.int64))
