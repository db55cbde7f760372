import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_chamfer, random_grid
from plausible_shapes.errors import EmptyShape, MalformedHeader, NonCubicDims, TruncatedData
from plausible_shapes.voxelcore import (
    OrientedBox,
    RigidTransform,
    VoxelGrid,
    aabb,
    chamfer,
    chamfer_matrix,
    read_binvox,
    shift_grid,
    to_point_cloud,
    transform_box,
    transform_grid,
    write_binvox,
    write_ply,
)


def grid_of(indices, R=16, vs=0.01):
    return VoxelGrid.from_indices(indices, R, vs)


# -- grids and point clouds ------------------------------------------------

def test_single_voxel_center():
    pts = to_point_cloud(grid_of([(0, 0, 0)]))
    np.testing.assert_allclose(pts, [[0.005, 0.005, 0.005]])


def test_empty_grid_empty_cloud():
    assert to_point_cloud(VoxelGrid.empty(8)).shape == (0, 3)


def test_threshold_semantics():
    v = np.zeros((4, 4, 4))
    v[0, 0, 0], v[1, 0, 0] = 0.4, 0.6
    pts = to_point_cloud(VoxelGrid(v))
    assert len(pts) == 1
    np.testing.assert_allclose(pts[0], [0.015, 0.005, 0.005])


def test_cloud_is_lexicographic():
    g = grid_of([(3, 0, 0), (0, 2, 1), (0, 2, 0)], R=4)
    idx = np.rint(to_point_cloud(g) / 0.01 - 0.5).astype(int)
    assert idx.tolist() == [[0, 2, 0], [0, 2, 1], [3, 0, 0]]


def test_grid_rejects_bad_values():
    with pytest.raises(ValueError):
        VoxelGrid(np.full((4, 4, 4), 1.5))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((4, 4, 4)), voxel_size=0)


def test_grid_is_read_only():
    g = grid_of([(1, 1, 1)], R=4)
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1


def test_binarize_tie_counts_as_occupied():
    g = VoxelGrid(np.full((4, 4, 4), 0.5))
    assert g.binarize().count() == 64


# -- chamfer -----------------------------------------------------------------

def test_chamfer_identity():
    g = grid_of([(1, 2, 3), (4, 4, 4)])
    assert chamfer(g, g) == 0.0


def test_chamfer_one_voxel_apart():
    assert chamfer(grid_of([(0, 0, 0)]), grid_of([(0, 0, 1)])) == pytest.approx(0.01, abs=1e-12)


def test_chamfer_asymmetric_counts():
    # one side: (0 + 0.02)/2 = 0.01; other side 0; half of the sum.
    d = chamfer(grid_of([(0, 0, 0), (0, 0, 2)]), grid_of([(0, 0, 0)]))
    assert d == pytest.approx(0.005, abs=1e-12)


def test_chamfer_empty_raises():
    with pytest.raises(EmptyShape):
        chamfer(VoxelGrid.empty(4), grid_of([(0, 0, 0)], R=4))


def test_chamfer_matrix_penalty():
    a, e = grid_of([(0, 0, 0)], R=4), VoxelGrid.empty(4)
    D = chamfer_matrix([a, e], [a], empty_penalty=7.0)
    assert D.tolist() == [[0.0], [7.0]]
    with pytest.raises(EmptyShape):
        chamfer_matrix([e], [a])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = random_grid(rng), random_grid(rng)
    assert chamfer(a, b) == pytest.approx(brute_chamfer(to_point_cloud(a), to_point_cloud(b)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_chamfer_symmetric_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = random_grid(rng, p=0.1), random_grid(rng, p=0.1)
    d = chamfer(a, b)
    assert d == chamfer(b, a)
    assert d >= 0
    assert (d == 0) == (a == b)


# -- transforms ------------------------------------------------------------------

def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(2 * np.eye(3), np.zeros(3))


def test_compose_and_inverse():
    rng = np.random.default_rng(0)
    T = RigidTransform.about_axis(rng.normal(size=3), 0.7, center=(0.1, 0.2, 0.3))
    U = RigidTransform.from_translation((0.01, -0.02, 0.05))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose((T @ U).apply(p), T.apply(U.apply(p)), atol=1e-12)
    np.testing.assert_allclose(T.inverse().apply(T.apply(p)), p, atol=1e-12)
    assert T.rotation_angle() == pytest.approx(0.7)


def test_transform_grid_identity():
    g = random_grid(np.random.default_rng(1), R=16)
    assert transform_grid(g, RigidTransform.identity()) == g


def test_transform_grid_one_voxel_translation():
    rng = np.random.default_rng(2)
    g = random_grid(rng, R=16, interior=3)
    moved = transform_grid(g, RigidTransform.from_translation((0.01, 0, 0)))
    expected = np.roll(g.values, 1, axis=0)
    assert np.array_equal(moved.values, expected)


def test_transform_grid_quarter_turn_single_voxel():
    # Index oracle: about the z axis through the grid center (8, 8) in voxel
    # units, (i, j) -> (c - (j + 0.5 - c) - 0.5, i + 0.5 - c + c - 0.5).
    R, c = 16, 8.0
    i, j, k = 10, 5, 7
    g = grid_of([(i, j, k)], R)
    T = RigidTransform.about_axis((0, 0, 1), math.pi / 2, center=(0.08, 0.08, 0.0))
    out, dropped = transform_grid(g, T, return_dropped=True)
    ni = int(round(c - (j + 0.5 - c) - 0.5))
    nj = int(round(c + (i + 0.5 - c) - 0.5))
    assert (ni, nj) == (10, 10)
    assert out.occupied_indices().tolist() == [[ni, nj, k]]
    assert dropped == 0


def test_transform_grid_drops_outside():
    g = grid_of([(0, 0, 0), (5, 5, 5)], R=8)
    out, dropped = transform_grid(g, RigidTransform.from_translation((-0.01, 0, 0)), return_dropped=True)
    assert dropped == 1
    assert out.occupied_indices().tolist() == [[4, 5, 5]]


def test_transform_grid_requires_binary():
    with pytest.raises(ValueError):
        transform_grid(VoxelGrid(np.full((4, 4, 4), 0.7)), RigidTransform.identity())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), angle=st.floats(-1.0, 1.0))
def test_round_trip_loses_only_rounded_voxels(seed, angle):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, R=16, interior=4, p=0.3)
    T = RigidTransform.about_axis((0, 1, 0), angle, center=(0.08, 0.08, 0.08))
    back = transform_grid(transform_grid(g, T), T.inverse())
    assert back.count() <= g.count()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.tuples(st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2)))
def test_lattice_translation_exact_and_box_commutes(seed, t):
    g = random_grid(np.random.default_rng(seed), R=16, interior=3, p=0.3)
    T = RigidTransform.from_translation(0.01 * np.array(t))
    moved = transform_grid(g, T)
    assert moved == shift_grid(g, t)
    assert transform_grid(moved, T.inverse()) == g
    np.testing.assert_allclose(aabb(moved).corners, transform_box(aabb(g), T).corners, atol=1e-12)


# -- boxes -------------------------------------------------------------------------

def test_aabb_full_grid():
    g = VoxelGrid(np.ones((16, 16, 16)))
    c = aabb(g).corners
    assert c.shape == (8, 3)
    for b in range(8):
        np.testing.assert_allclose(c[b], [0.16 * ((b >> ax) & 1) for ax in range(3)])


def test_aabb_single_voxel():
    c = aabb(grid_of([(0, 0, 0)])).corners
    np.testing.assert_allclose(c.min(axis=0), 0)
    np.testing.assert_allclose(c.max(axis=0), 0.01)


def test_aabb_two_voxels():
    c = aabb(grid_of([(0, 0, 0), (3, 0, 0)])).corners
    np.testing.assert_allclose(c.min(axis=0), [0, 0, 0])
    np.testing.assert_allclose(c.max(axis=0), [0.04, 0.01, 0.01])
    np.testing.assert_allclose(c[1], [0.04, 0, 0])
    np.testing.assert_allclose(c[6], [0, 0.01, 0.01])


def test_aabb_empty_raises():
    with pytest.raises(EmptyShape):
        aabb(VoxelGrid.empty(4))


def test_transform_box_translation_and_identity():
    b = OrientedBox.from_extents((0, 0, 0), (1, 2, 3))
    assert transform_box(b, RigidTransform.identity()) == b
    t = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(transform_box(b, RigidTransform.from_translation(t)).corners, b.corners + t)


def test_transform_box_quarter_turn_permutes_corners():
    # Unit box centred at the origin; a +90 deg turn about z maps (x, y) -> (-y, x).
    b = OrientedBox.from_extents((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    T = RigidTransform.about_axis((0, 0, 1), math.pi / 2)
    out = transform_box(b, T).corners
    oracle = np.stack([[-y, x, z] for x, y, z in b.corners])
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    assert sorted(map(tuple, np.round(out, 9))) == sorted(map(tuple, np.round(b.corners, 9)))
    # Corner 0 (-,-,-) lands where corner 1 (+,-,-) was.
    np.testing.assert_allclose(out[0], b.corners[1], atol=1e-12)


def test_box_vector_round_trip_and_edges():
    b = OrientedBox.from_extents((0, 0, 0), (0.04, 0.06, 0.08))
    assert OrientedBox.from_vector(b.as_vector()) == b
    np.testing.assert_allclose(b.edge_lengths(), [[0.04] * 4, [0.06] * 4, [0.08] * 4])


# -- binvox --------------------------------------------------------------------------

def test_binvox_round_trip_random():
    g = random_grid(np.random.default_rng(3), R=16, p=0.4)
    g = VoxelGrid(g.values, 0.02, (0.1, -0.2, 0.3))
    assert read_binvox(write_binvox(g)) == g


def test_binvox_all_zero_runs():
    data = write_binvox(VoxelGrid.empty(32))
    payload = data[data.index(b"data\n") + 5:]
    values, counts = payload[0::2], payload[1::2]
    # 32768 = 128 * 255 + 128
    assert len(counts) == 129
    assert set(values) == {0}
    assert list(counts[:128]) == [255] * 128 and counts[128] == 128


def test_binvox_byte_order_y_fastest():
    g = grid_of([(0, 1, 0)], R=2)
    payload = write_binvox(g).split(b"data\n", 1)[1]
    # Flat binvox index x*4 + z*2 + y = 1.
    assert payload == bytes([0, 1, 1, 1, 0, 6])
    g2 = grid_of([(0, 0, 1)], R=2)
    assert write_binvox(g2).split(b"data\n", 1)[1] == bytes([0, 2, 1, 1, 0, 5])


def test_binvox_header_fields():
    g = VoxelGrid.empty(4, 0.5, (1.0, 2.0, 3.0))
    head = write_binvox(g).split(b"data\n")[0].decode()
    assert "dim 4 4 4" in head and "translate 1.0 2.0 3.0" in head and "scale 2.0" in head


def test_binvox_errors():
    good = write_binvox(grid_of([(1, 1, 1)], R=4))
    with pytest.raises(NonCubicDims):
        read_binvox(good.replace(b"dim 4 4 4", b"dim 16 16 8"))
    with pytest.raises(MalformedHeader):
        read_binvox(b"#binvox 2\n" + good.split(b"\n", 1)[1])
    with pytest.raises(MalformedHeader):
        read_binvox(good.replace(b"scale", b"scal"))
    with pytest.raises(TruncatedData):
        read_binvox(good[:-2])
    with pytest.raises(TruncatedData):
        read_binvox(good[:-1])
    with pytest.raises(MalformedHeader):
        read_binvox(good + bytes([0, 1]))


def test_binvox_rejects_probabilities():
    with pytest.raises(ValueError):
        write_binvox(VoxelGrid(np.full((4, 4, 4), 0.3)))


def test_ply_export():
    text = write_ply(to_point_cloud(grid_of([(0, 0, 0), (1, 0, 0)], R=4)))
    lines = text.splitlines()
    assert lines[2] == "element vertex 2"
    assert lines[lines.index("end_header") + 1:] == ["0.005000 0.005000 0.005000", "0.015000 0.005000 0.005000"]
