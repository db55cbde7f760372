import numpy as np
import pytest

from plausible_shapes.errors import EmptyShape
from plausible_shapes.registration import IcpConfig
from plausible_shapes.observe import make_observation, obs_plausible
from plausible_shapes.plausibles import (
    PlausibleMember,
    build_plausible_sets,
    compute_plausibles,
    deduplicate,
    load_plausible_sets,
    save_plausible_sets,
    set_sizes,
    sweep_candidates,
)
from plausible_shapes.shapedata import ShapeDataset
from plausible_shapes.voxelcore import RigidTransform, VoxelGrid, shift_grid


@pytest.fixture(scope="module")
def small_boxes(box_data):
    te = box_data["test"]
    return ShapeDataset(te.entries[::4], "test", te.specs)


@pytest.fixture(scope="module")
def small_sets(small_boxes):
    return build_plausible_sets(small_boxes, sweep=(-2, 0, 2))


def test_self_match(small_boxes, small_sets):
    for e in small_boxes:
        members = small_sets[e.id]
        assert any(m.source_id == e.id and m.shape == e.shape for m in members)


def test_members_explain_the_view(small_boxes, small_sets):
    for e in small_boxes:
        for m in small_sets[e.id]:
            assert obs_plausible(e.observation, m.shape)


def test_members_follow_candidate_order(small_boxes, small_sets):
    order = {c.source_id: n for n, c in enumerate(sweep_candidates(small_boxes, (-2, 0, 2)))}
    for members in small_sets.values():
        idx = [order[m.source_id] for m in members]
        assert idx == sorted(idx)


def test_sweep_candidates_shift_and_label(small_boxes):
    cands = sweep_candidates(small_boxes, (-2, 0, 2))
    assert len(cands) <= 3 * len(small_boxes)
    e = small_boxes[0]
    shifted = [c for c in cands if c.source_id == f"{e.id}@+2"]
    assert shifted
    np.testing.assert_allclose(shifted[0].base.translation, [0.02, 0, 0])
    assert shifted[0].shape.count() <= e.shape.count()


def test_jobs_do_not_change_result(small_boxes, small_sets):
    par = build_plausible_sets(small_boxes, sweep=(-2, 0, 2), jobs=2)
    assert list(par) == list(small_sets)
    for k in par:
        assert [m.source_id for m in par[k]] == [m.source_id for m in small_sets[k]]
        assert all(a.shape == b.shape for a, b in zip(par[k], small_sets[k]))


def test_round_trip(small_sets, tmp_path):
    save_plausible_sets(small_sets, tmp_path, {"seed": 0})
    back = load_plausible_sets(tmp_path)
    assert set_sizes(back) == set_sizes(small_sets)
    for k in back:
        for a, b in zip(back[k], small_sets[k]):
            assert a.source_id == b.source_id and a.shape == b.shape
            np.testing.assert_allclose(a.transform.matrix(), b.transform.matrix(), atol=1e-12)


def test_deduplicate_keeps_first():
    g = VoxelGrid.from_indices([(1, 1, 1)], 4)
    h = VoxelGrid.from_indices([(2, 1, 1)], 4)
    ident = RigidTransform.identity()
    members = [PlausibleMember(g, "a", ident), PlausibleMember(h, "b", ident), PlausibleMember(g, "c", ident)]
    assert [m.source_id for m in deduplicate(members)] == ["a", "b"]


def test_empty_query_raises(small_boxes):
    empty = make_observation(VoxelGrid.empty(16))
    with pytest.raises(EmptyShape):
        compute_plausibles(empty, small_boxes)


def test_separate_query_set(box_data, small_boxes):
    queries = ShapeDataset(small_boxes.entries[:2], "test", small_boxes.specs)
    out = build_plausible_sets(box_data["train"], queries=queries)
    assert list(out) == queries.ids()
    assert all(m.source_id in box_data["train"].ids() for v in out.values() for m in v)


def test_hidden_handle_azimuths_all_plausible():
    from plausible_shapes.shapedata import DatasetEntry, ToyObjectSpec, handle_occluded, rasterize
    from plausible_shapes.voxelcore import aabb

    def entry(az):
        spec = ToyObjectSpec("mug", radius=4.0, height=8, handle_azimuth=az, handle_reach=1.5)
        g, _ = rasterize(spec)
        assert handle_occluded(spec, 0.0)
        return DatasetEntry(f"az{az:+03d}", make_observation(g), g, aabb(g), "obj", {})

    query = entry(0).observation
    cands = ShapeDataset([entry(a) for a in (-42, -30, -18, -6, 6, 18, 30, 42)])
    # Column-walk check: every handle pose leaves the same view.
    assert all(e.observation == query for e in cands)
    members = compute_plausibles(query, cands)
    assert [m.source_id for m in members] == cands.ids()


def test_too_deep_candidate_excluded():
    from plausible_shapes.shapedata import DatasetEntry
    from plausible_shapes.voxelcore import aabb

    idx = [(i, j, k) for i in range(4, 12) for j in range(4, 12) for k in range(6, 9)]
    g = VoxelGrid.from_indices(idx, 16, 0.01)
    deep = shift_grid(g, (0, 0, 5))
    x = make_observation(g)
    # Identity alignment (ICP capped at one step with no usable pairs) keeps the offset.
    cand = ShapeDataset([DatasetEntry("deep", make_observation(deep), deep, aabb(deep), "x", {})])
    assert compute_plausibles(x, cand, IcpConfig(max_iterations=1, max_correspondence_dist=1e-4)) == []
    assert not obs_plausible(x, deep)


def test_sweep_zero_equals_per_item(small_boxes, small_sets):
    plain = build_plausible_sets(small_boxes)
    for e in small_boxes:
        direct = compute_plausibles(e.observation, small_boxes)
        assert [m.source_id for m in plain[e.id]] == [m.source_id for m in direct]
    assert all(len(plain[k]) <= len(small_sets[k]) for k in plain)


def test_one_shape_two_sweep_positions():
    idx = [(i, j, k) for i in range(6, 10) for j in range(4, 12) for k in range(6, 9)]
    g = VoxelGrid.from_indices(idx, 16, 0.01)
    from plausible_shapes.shapedata import DatasetEntry
    from plausible_shapes.voxelcore import aabb

    ds = ShapeDataset([DatasetEntry("slab", make_observation(g, (4, 8)), g, aabb(g), "slab", {})])
    out = build_plausible_sets(ds, sweep=(0, 2))
    assert [m.source_id for m in out["slab"]] == ["slab", "slab@+2"]
