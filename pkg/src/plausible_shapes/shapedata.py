"""Procedural toy objects (mugs and boxes), pose sweeps and dataset persistence.

Objects live in a cubic grid with the vertical axis along y and the camera
looking along +z. Poses rotate an object about the vertical axis through the
grid center and then shift it by whole voxels. A handle azimuth of 0 deg
points along +z, straight away from the camera; azimuth grows toward +x.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .observe import PartialObservation, make_observation, slit_visibility
from .voxelcore import (
    OrientedBox,
    RigidTransform,
    VoxelGrid,
    aabb,
    load_binvox,
    save_binvox,
    transform_box,
)

SCHEMA_VERSION = 1
_EPS = 1e-9


@dataclass(frozen=True)
class ToyObjectSpec:
    """Parametric toy object, sizes in voxels.

    Mugs: solid cylindrical body of ``radius`` and ``height`` standing on
    ``floor``, with a ``loop`` or ``stub`` handle reaching ``handle_reach``
    voxels out from the body at ``handle_azimuth`` degrees. Boxes: ``extents``
    along (x, y, z).
    """

    kind: str = "mug"
    radius: float = 4.0
    height: int = 8
    handle_azimuth: float = 0.0
    handle_style: str = "loop"
    handle_reach: float = 2.0
    handle_width: float = 1.0
    extents: Tuple[int, int, int] = (4, 6, 8)
    floor: int = 2

    def __post_init__(self):
        if self.kind not in ("mug", "box"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.handle_style not in ("loop", "stub", "none"):
            raise ValueError(f"unknown handle style {self.handle_style!r}")
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))

    def horizontal_reach(self) -> float:
        """Largest distance (voxels) of any part from the vertical axis."""
        if self.kind == "mug":
            extra = self.handle_reach if self.handle_style != "none" else 0.0
            return math.hypot(self.radius + extra, self.handle_width / 2)
        ex, _, ez = self.extents
        return math.hypot(ex / 2 + 0.5, ez / 2 + 0.5)

    def occlusion_half_angle(self) -> float:
        """Half-angle (deg) about the back direction within which the handle
        is hidden behind the body from the camera."""
        if self.kind != "mug" or self.handle_style == "none":
            return 0.0
        # Body columns sit at half-integer lateral offsets |dx| <= D, where D
        # is the largest half-integer with dx^2 + 0.5^2 <= radius^2. The handle
        # hides when its lateral extent r_out*sin(a) + (w/2)*cos(a) stays
        # below D + 1, i.e. when no handle voxel center lands past column D.
        D = math.floor(math.sqrt(max(self.radius**2 - 0.25, 0.0)) - 0.5) + 0.5
        if D < 0:
            return 0.0
        outer = self.radius + self.handle_reach
        half_w = self.handle_width / 2
        ratio = (D + 1.0) / math.hypot(outer, half_w)
        if ratio >= 1.0:
            return 90.0
        return math.degrees(math.asin(ratio) - math.atan2(half_w, outer))

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d


def _grid_axis_center(resolution) -> float:
    return resolution / 2.0


def _centers(resolution):
    c = np.arange(resolution) + 0.5
    return np.meshgrid(c, c, c, indexing="ij")


def _mug_membership(spec: ToyObjectSpec, X, Y, Z, cx, cz, azimuth_deg):
    """Voxel-unit coordinates -> (body, handle) boolean masks for a mug whose
    handle points at ``azimuth_deg``."""
    dx, dz = X - cx, Z - cz
    rho = np.hypot(dx, dz)
    y0, y1 = spec.floor, spec.floor + spec.height
    in_height = (Y > y0) & (Y < y1)
    body = in_height & (rho <= spec.radius + _EPS)
    if spec.handle_style == "none":
        return body, np.zeros_like(body)
    a = math.radians(azimuth_deg)
    ux, uz = math.sin(a), math.cos(a)
    radial = dx * ux + dz * uz
    tangential = -dx * uz + dz * ux
    thin = np.abs(tangential) <= spec.handle_width / 2 + _EPS
    r_in, r_out = spec.radius - 0.5, spec.radius + spec.handle_reach
    ymid = (y0 + y1) / 2
    if spec.handle_style == "loop":
        ya, yb = y0 + 1, y1 - 1
        bars = ((np.abs(Y - (ya + 0.5)) < 0.5 + _EPS) | (np.abs(Y - (yb - 0.5)) < 0.5 + _EPS)) & (radial >= r_in) & (radial <= r_out + _EPS)
        upright = (Y > ya) & (Y < yb) & (radial >= r_out - 1.0 - _EPS) & (radial <= r_out + _EPS)
        handle = thin & (bars | upright)
    else:
        handle = thin & (np.abs(Y - ymid) <= 1.0 + _EPS) & (radial >= r_in) & (radial <= r_out + _EPS)
    return body, handle & ~body


def _box_membership(spec: ToyObjectSpec, X, Y, Z, cx, cz, rotation_deg):
    a = math.radians(rotation_deg)
    dx, dz = X - cx, Z - cz
    # Undo the rotation about +y to get canonical coordinates.
    qx = math.cos(a) * dx - math.sin(a) * dz
    qz = math.sin(a) * dx + math.cos(a) * dz
    ex, ey, ez = spec.extents
    lo_x, lo_z = -(ex // 2), -(ez // 2)
    inside_x = (qx >= lo_x - _EPS) & (qx < lo_x + ex - _EPS)
    inside_z = (qz >= lo_z - _EPS) & (qz < lo_z + ez - _EPS)
    inside_y = (Y >= spec.floor) & (Y < spec.floor + ey)
    return inside_x & inside_y & inside_z


def rasterize(spec: ToyObjectSpec, resolution=16, voxel_size=0.01, rotation_deg=0.0, shift=(0, 0, 0)):
    """Rasterize ``spec`` rotated by ``rotation_deg`` about the vertical axis
    and shifted by whole voxels. Returns ``(grid, handle_grid)``; the handle
    grid is empty for boxes."""
    X, Y, Z = _centers(resolution)
    sx, sy, sz = (int(s) for s in shift)
    X, Y, Z = X - sx, Y - sy, Z - sz
    c = _grid_axis_center(resolution)
    if spec.kind == "mug":
        body, handle = _mug_membership(spec, X, Y, Z, c, c, spec.handle_azimuth + rotation_deg)
        occ = body | handle
    else:
        occ = _box_membership(spec, X, Y, Z, c, c, rotation_deg)
        handle = np.zeros_like(occ)
    return VoxelGrid(occ.astype(np.uint8), voxel_size), VoxelGrid(handle.astype(np.uint8), voxel_size)


def pose_transform(resolution, voxel_size, rotation_deg, shift=(0, 0, 0)) -> RigidTransform:
    c = _grid_axis_center(resolution) * voxel_size
    rot = RigidTransform.about_axis([0, 1, 0], math.radians(rotation_deg), center=[c, 0.0, c])
    return RigidTransform.from_translation(np.asarray(shift, float) * voxel_size).compose(rot)


def generate_object(spec: ToyObjectSpec, resolution=16, voxel_size=0.01):
    """Canonical grid and its axis-aligned bounding box."""
    grid, _ = rasterize(spec, resolution, voxel_size)
    return grid, aabb(grid)


def handle_occluded(spec: ToyObjectSpec, rotation_deg) -> bool:
    """Analytic flag: the rotated handle points away from the camera within
    the object's occlusion half-angle."""
    if spec.kind != "mug" or spec.handle_style == "none":
        return False
    az = (spec.handle_azimuth + rotation_deg) % 360.0
    off = min(az, 360.0 - az)
    return off < spec.occlusion_half_angle() - 1e-9


@dataclass(frozen=True)
class AugmentationSweep:
    rotation_increment: float = 15.0
    translations: Tuple[Tuple[int, int, int], ...] = ((0, 0, 0),)
    slit_width: Optional[int] = None
    min_visible_columns: int = 2
    resolution: int = 16
    voxel_size: float = 0.01

    def rotations(self) -> List[float]:
        n = int(round(360.0 / self.rotation_increment))
        return [i * self.rotation_increment for i in range(n)]


@dataclass
class DatasetEntry:
    id: str
    observation: PartialObservation
    shape: VoxelGrid
    box: OrientedBox
    canonical_object_id: str
    pose_label: Dict


@dataclass
class ShapeDataset:
    entries: List[DatasetEntry]
    split: str = "test"
    specs: Dict[str, ToyObjectSpec] = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("dataset ids must be unique")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> DatasetEntry:
        return self.entries[i]

    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    def by_id(self) -> Dict[str, DatasetEntry]:
        return {e.id: e for e in self.entries}

    def observations(self):
        return [e.observation for e in self.entries]

    def shapes(self):
        return [e.shape for e in self.entries]

    def boxes(self) -> np.ndarray:
        return np.stack([e.box.as_vector() for e in self.entries]) if self.entries else np.zeros((0, 24))


def choose_slit(shape: VoxelGrid, width, min_visible, rng) -> Tuple[int, int]:
    """Random slit ``(first_col, width)`` showing at least ``min_visible``
    columns that contain the object."""
    R = shape.resolution
    cols = np.flatnonzero(shape.values.any(axis=(1, 2)))
    candidates = []
    for first in range(-width + 1, R):
        lo, hi = max(first, 0), min(first + width, R)
        if hi - lo < 1:
            continue
        seen = np.count_nonzero((cols >= lo) & (cols < hi))
        if seen >= min(min_visible, len(cols)):
            candidates.append(first)
    if not candidates:
        raise ValueError("no slit position shows enough of the object")
    first = int(candidates[rng.integers(len(candidates))])
    return max(first, 0), width if first >= 0 else width + first


def build_dataset(
    specs: Sequence[ToyObjectSpec],
    sweep: AugmentationSweep = AugmentationSweep(),
    test_fraction=0.25,
    seed=0,
    test_objects: Optional[Iterable[int]] = None,
) -> Dict[str, ShapeDataset]:
    """Pose every object at every sweep rotation and translation.

    Objects (not poses) are split into ``train`` and ``test``: pass
    ``test_objects`` (spec indices) or a ``test_fraction`` drawn with ``seed``.
    Entries are ordered by (object, rotation, translation).
    """
    rng = np.random.default_rng(seed)
    n = len(specs)
    if test_objects is None:
        n_test = int(round(test_fraction * n))
        test_set = set(rng.permutation(n)[:n_test].tolist())
    else:
        test_set = set(int(i) for i in test_objects)
    margin = 2
    R, vs = sweep.resolution, sweep.voxel_size
    out = {"train": [], "test": []}
    spec_map = {"train": {}, "test": {}}
    for oi, spec in enumerate(specs):
        oid = f"obj{oi:03d}"
        split = "test" if oi in test_set else "train"
        spec_map[split][oid] = spec
        canonical, _ = rasterize(spec, R, vs)
        box0 = aabb(canonical)
        for ri, rot in enumerate(sweep.rotations()):
            for ti, t in enumerate(sweep.translations):
                shape, handle = rasterize(spec, R, vs, rot, t)
                idx = shape.occupied_indices()
                if len(idx) == 0 or idx.min() < margin or idx.max() >= R - margin:
                    raise ValueError(f"{oid} at rotation {rot} / shift {t} leaves the {margin}-voxel margin")
                box = transform_box(box0, pose_transform(R, vs, rot, t))
                slit = None
                if sweep.slit_width is not None:
                    slit = choose_slit(shape, sweep.slit_width, sweep.min_visible_columns, rng)
                obs = make_observation(shape, slit)
                label = {
                    "rotation_deg": float(rot),
                    "translation": [int(v) for v in t],
                    "kind": spec.kind,
                    "handle_azimuth_deg": float((spec.handle_azimuth + rot) % 360.0) if spec.kind == "mug" else None,
                    "handle_occluded": handle_occluded(spec, rot),
                    "slit": list(slit) if slit is not None else None,
                }
                out[split].append(DatasetEntry(f"{oid}_r{ri:02d}_t{ti:02d}", obs, shape, box, oid, label))
    return {k: ShapeDataset(v, k, spec_map[k]) for k, v in out.items()}


def occlusion_partition(dataset: ShapeDataset):
    """``(occluded ids, visible ids)`` by the analytic handle flag."""
    occ = [e.id for e in dataset if e.pose_label.get("handle_occluded")]
    vis = [e.id for e in dataset if not e.pose_label.get("handle_occluded")]
    return occ, vis


def handle_seen(entry: DatasetEntry, spec: ToyObjectSpec) -> bool:
    """Render-based check: does any handle voxel appear among the known-occupied voxels?"""
    if spec.kind != "mug":
        return False
    t = entry.pose_label["translation"]
    _, handle = rasterize(spec, entry.shape.resolution, entry.shape.voxel_size, entry.pose_label["rotation_deg"], t)
    return bool(np.any((handle.values > 0) & (entry.observation.known_occupied.values > 0)))


# -- default toy families ----------------------------------------------------

def mug_family(styles=("loop", "stub"), heights=(7, 8, 9, 10), bodies=((3.0, 2.5), (3.5, 2.0), (4.0, 1.5))):
    """Mugs over body radius/handle reach pairs, heights and handle styles."""
    return [
        ToyObjectSpec("mug", radius=r, height=h, handle_style=s, handle_reach=reach)
        for (r, reach) in bodies
        for h in heights
        for s in styles
    ]


def box_family(extents=((4, 6, 8), (6, 6, 6), (3, 8, 5), (8, 4, 4), (5, 5, 9), (7, 9, 3), (4, 10, 4), (6, 3, 7))):
    return [ToyObjectSpec("box", extents=e) for e in extents]


# -- persistence -------------------------------------------------------------

def save_dataset(datasets: Dict[str, ShapeDataset], directory, extra: Optional[Dict] = None):
    """Write binvox files plus ``manifest.json`` for every split."""
    os.makedirs(os.path.join(directory, "shapes"), exist_ok=True)
    os.makedirs(os.path.join(directory, "observations"), exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "kind": "shape_dataset", "splits": {}, "specs": {}}
    if extra:
        manifest.update(extra)
    for split, ds in datasets.items():
        rows = []
        for e in ds:
            shape_file = f"shapes/{e.id}.binvox"
            occ_file = f"observations/{e.id}_occupied.binvox"
            free_file = f"observations/{e.id}_free.binvox"
            save_binvox(os.path.join(directory, shape_file), e.shape)
            save_binvox(os.path.join(directory, occ_file), e.observation.known_occupied)
            save_binvox(os.path.join(directory, free_file), e.observation.known_free)
            rows.append(
                {
                    "id": e.id,
                    "canonical_object_id": e.canonical_object_id,
                    "pose": e.pose_label,
                    "box": [float(v) for v in e.box.as_vector()],
                    "slit": list(e.observation.slit) if e.observation.slit else None,
                    "shape": shape_file,
                    "known_occupied": occ_file,
                    "known_free": free_file,
                }
            )
        manifest["splits"][split] = rows
        manifest["specs"].update({oid: s.to_dict() for oid, s in ds.specs.items()})
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(directory) -> Dict[str, ShapeDataset]:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')!r}")
    specs = {oid: ToyObjectSpec(**d) for oid, d in manifest.get("specs", {}).items()}
    out = {}
    for split, rows in manifest["splits"].items():
        entries = []
        for r in rows:
            shape = load_binvox(os.path.join(directory, r["shape"]))
            occ = load_binvox(os.path.join(directory, r["known_occupied"]))
            free = load_binvox(os.path.join(directory, r["known_free"]))
            slit = tuple(r["slit"]) if r["slit"] else None
            obs = PartialObservation(occ, free, slit_visibility(shape.resolution, slit), slit)
            entries.append(
                DatasetEntry(r["id"], obs, shape, OrientedBox.from_vector(r["box"]), r["canonical_object_id"], r["pose"])
            )
        out[split] = ShapeDataset(entries, split, {oid: s for oid, s in specs.items() if any(e.canonical_object_id == oid for e in entries)})
    return out
