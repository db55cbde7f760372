"""Voxel-grid geometry: occupancy grids, rigid transforms, boxes, Chamfer
distance and binvox / PLY I/O.

Index convention: ``values[i, j, k]`` is the voxel whose center sits at
``origin + voxel_size * (i + 0.5, j + 0.5, k + 0.5)``; ``i`` runs along x,
``j`` along y (vertical) and ``k`` along z (the camera axis).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyShape, MalformedHeader, NonCubicDims, TruncatedData

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense cubic occupancy grid with metric placement.

    ``values`` holds occupancies (or probabilities) in [0, 1] and is stored
    read-only so grids can be shared freely between threads.
    """

    values: np.ndarray
    voxel_size: float = 0.01
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if values.dtype == bool:
            values = values.astype(np.uint8)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise ValueError(f"values must be a cubic 3-D array, got shape {values.shape}")
        if values.shape[0] < 2:
            raise ValueError("resolution must be >= 2")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if values.size and (np.min(values) < 0 or np.max(values) > 1):
            raise ValueError("voxel values must lie in [0, 1]")
        values.setflags(write=False)
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @classmethod
    def empty(cls, resolution, voxel_size=0.01, origin=(0.0, 0.0, 0.0)):
        return cls(np.zeros((resolution,) * 3, dtype=np.uint8), voxel_size, np.asarray(origin, float))

    @classmethod
    def from_indices(cls, indices, resolution, voxel_size=0.01, origin=(0.0, 0.0, 0.0)):
        """Binary grid with the given ``(n, 3)`` voxel indices set."""
        values = np.zeros((resolution,) * 3, dtype=np.uint8)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if len(idx):
            values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
        return cls(values, voxel_size, np.asarray(origin, float))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def extent(self) -> float:
        """Edge length of the whole lattice in meters."""
        return self.resolution * self.voxel_size

    @property
    def diagonal(self) -> float:
        return float(np.sqrt(3.0) * self.extent)

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def binarize(self, threshold=DEFAULT_THRESHOLD) -> "VoxelGrid":
        """Threshold into a binary grid; a value equal to ``threshold`` counts as occupied."""
        return self.with_values((self.values >= threshold).astype(np.uint8))

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.voxel_size, self.origin)

    def occupied_indices(self, threshold=DEFAULT_THRESHOLD) -> np.ndarray:
        """``(n, 3)`` indices of voxels >= threshold in lexicographic order."""
        return np.argwhere(self.values >= threshold)

    def centers(self, indices) -> np.ndarray:
        return self.origin + self.voxel_size * (np.asarray(indices, dtype=np.float64) + 0.5)

    def count(self, threshold=DEFAULT_THRESHOLD) -> int:
        return int(np.count_nonzero(self.values >= threshold))

    def same_lattice(self, other: "VoxelGrid") -> bool:
        return (
            self.resolution == other.resolution
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
        )

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.same_lattice(other) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.resolution, self.voxel_size, self.values.tobytes()))

    def __repr__(self):
        return (
            f"VoxelGrid(resolution={self.resolution}, voxel_size={self.voxel_size}, "
            f"origin={self.origin.tolist()}, occupied={self.count()})"
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def about_axis(cls, axis, angle, center=(0.0, 0.0, 0.0)):
        """Rotation by ``angle`` radians about ``axis`` through ``center``."""
        R = axis_angle_matrix(axis, angle)
        c = np.asarray(center, dtype=np.float64)
        return cls(R, c - R @ c)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rows(self) -> list:
        """3x4 row-major list used in manifests."""
        return self.matrix()[:3].reshape(-1).tolist()

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __repr__(self):
        return f"RigidTransform(angle={np.degrees(self.rotation_angle()):.3f}deg, t={self.translation.tolist()})"


def axis_angle_matrix(axis, angle) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Eight box corners in canonical bit order.

    Corner ``b`` of the canonical axis-aligned box is
    ``(x[b & 1], y[(b >> 1) & 1], z[(b >> 2) & 1])`` with index 0 the minimum
    and 1 the maximum along each axis. Transforms keep the order.
    """

    corners: np.ndarray

    def __post_init__(self):
        c = np.array(self.corners, dtype=np.float64).reshape(8, 3)
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)

    @classmethod
    def from_extents(cls, lo, hi):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        pick = np.array([[(b >> ax) & 1 for ax in range(3)] for b in range(8)])
        return cls(np.where(pick == 1, hi, lo))

    @classmethod
    def from_vector(cls, v):
        return cls(np.asarray(v, dtype=np.float64).reshape(8, 3))

    def as_vector(self) -> np.ndarray:
        return self.corners.reshape(24).copy()

    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def edge_lengths(self) -> np.ndarray:
        """``(3, 4)`` lengths of the four parallel edges along each box axis."""
        out = np.empty((3, 4))
        for ax in range(3):
            bit = 1 << ax
            lows = [b for b in range(8) if not b & bit]
            out[ax] = [np.linalg.norm(self.corners[b | bit] - self.corners[b]) for b in lows]
        return out

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return np.array_equal(self.corners, other.corners)

    def __hash__(self):
        return hash(self.corners.tobytes())


def to_point_cloud(g: VoxelGrid, threshold=DEFAULT_THRESHOLD) -> np.ndarray:
    """Centers of voxels with value >= ``threshold``, as an ``(n, 3)`` array."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie strictly between 0 and 1")
    return g.centers(g.occupied_indices(threshold))


def _tree(g: VoxelGrid):
    pts = to_point_cloud(g)
    if len(pts) == 0:
        raise EmptyShape("grid has no occupied voxel")
    return pts, cKDTree(pts)


def chamfer_points(a: np.ndarray, b: np.ndarray, tree_a=None, tree_b=None) -> float:
    if len(a) == 0 or len(b) == 0:
        raise EmptyShape("chamfer needs two non-empty point sets")
    tree_a = tree_a if tree_a is not None else cKDTree(a)
    tree_b = tree_b if tree_b is not None else cKDTree(b)
    d_ab, _ = tree_b.query(a)
    d_ba, _ = tree_a.query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer(a: VoxelGrid, b: VoxelGrid) -> float:
    """Symmetric mean nearest-neighbor distance in meters.

    ``0.5 * (mean_{p in A} min_q |p - q| + mean_{q in B} min_p |p - q|)`` over
    occupied voxel centers (threshold 0.5).
    """
    pa, ta = _tree(a)
    pb, tb = _tree(b)
    return chamfer_points(pa, pb, ta, tb)


def chamfer_matrix(rows: Sequence[VoxelGrid], cols: Sequence[VoxelGrid], empty_penalty=None) -> np.ndarray:
    """Pairwise Chamfer distances, building each k-d tree once.

    Pairs involving an empty grid get ``empty_penalty``; with no penalty the
    :class:`EmptyShape` error propagates.
    """
    def prep(grids):
        out = []
        for g in grids:
            pts = to_point_cloud(g)
            out.append((pts, cKDTree(pts)) if len(pts) else None)
        return out

    pr, pc = prep(rows), prep(cols)
    D = np.empty((len(rows), len(cols)))
    for i, a in enumerate(pr):
        for j, b in enumerate(pc):
            if a is None or b is None:
                if empty_penalty is None:
                    raise EmptyShape(f"empty grid in chamfer pair ({i}, {j})")
                D[i, j] = empty_penalty
            else:
                D[i, j] = chamfer_points(a[0], b[0], a[1], b[1])
    return D


def transform_grid(g: VoxelGrid, T: RigidTransform, return_dropped=False):
    """Move every occupied voxel center by ``T`` and re-voxelize.

    Each moved center lands in the voxel whose center is nearest (the voxel
    containing it). Centers falling outside the lattice are dropped; pass
    ``return_dropped=True`` to get their count as well.
    """
    if not g.is_binary():
        raise ValueError("transform_grid needs a binary grid")
    pts = T.apply(to_point_cloud(g))
    idx = np.floor((pts - g.origin) / g.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < g.resolution), axis=1)
    out = VoxelGrid.from_indices(idx[inside], g.resolution, g.voxel_size, g.origin)
    if return_dropped:
        return out, int(np.count_nonzero(~inside))
    return out


def shift_grid(g: VoxelGrid, offset) -> VoxelGrid:
    """Exact lattice translation by whole voxels; voxels leaving the grid are dropped."""
    off = np.asarray(offset, dtype=np.int64)
    idx = g.occupied_indices() + off
    inside = np.all((idx >= 0) & (idx < g.resolution), axis=1)
    return VoxelGrid.from_indices(idx[inside], g.resolution, g.voxel_size, g.origin)


def aabb(g: VoxelGrid) -> OrientedBox:
    """Tight axis-aligned box around the outer faces of the occupied voxels."""
    idx = g.occupied_indices()
    if len(idx) == 0:
        raise EmptyShape("aabb of an empty grid")
    lo = g.origin + g.voxel_size * idx.min(axis=0)
    hi = g.origin + g.voxel_size * (idx.max(axis=0) + 1)
    return OrientedBox.from_extents(lo, hi)


def transform_box(b: OrientedBox, T: RigidTransform) -> OrientedBox:
    return OrientedBox(T.apply(b.corners))


# -- binvox ---------------------------------------------------------------
#
# Header lines: "#binvox 1", "dim D D D", "translate tx ty tz", "scale s",
# "data". The payload is (value, count) byte pairs, count in 1..255, over the
# voxels in binvox order: y fastest, then z, then x. That is, flat index
# ``x * D * D + z * D + y``. ``translate`` is our origin and ``scale`` the
# edge length of the whole lattice (resolution * voxel_size).


def _rle(flat: np.ndarray) -> bytes:
    if flat.size == 0:
        return b""
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    out = bytearray()
    for s, n in zip(starts.tolist(), lengths.tolist()):
        v = int(flat[s])
        while n > 0:
            c = min(n, 255)
            out += bytes((v, c))
            n -= c
    return bytes(out)


def write_binvox(g: VoxelGrid) -> bytes:
    if not g.is_binary():
        raise ValueError("binvox stores binary grids only")
    R = g.resolution
    header = (
        f"#binvox 1\ndim {R} {R} {R}\n"
        f"translate {' '.join(repr(float(v)) for v in g.origin)}\n"
        f"scale {g.extent!r}\ndata\n"
    ).encode("ascii")
    flat = np.transpose(g.values, (0, 2, 1)).astype(np.uint8).reshape(-1)
    return header + _rle(flat)


def read_binvox(data: bytes) -> VoxelGrid:
    fp = io.BytesIO(data)
    magic = fp.readline().strip()
    if magic != b"#binvox 1":
        raise MalformedHeader(f"bad magic line {magic!r}")
    dims = translate = scale = None
    while True:
        line = fp.readline()
        if not line:
            raise MalformedHeader("header ended before 'data'")
        parts = line.strip().split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == b"dim":
                dims = [int(p) for p in parts[1:]]
            elif key == b"translate":
                translate = [float(p) for p in parts[1:]]
            elif key == b"scale":
                scale = float(parts[1])
            elif key == b"data":
                break
            else:
                raise MalformedHeader(f"unknown header line {line!r}")
        except (ValueError, IndexError) as exc:
            raise MalformedHeader(f"unparseable header line {line!r}") from exc
    if dims is None or len(dims) != 3 or translate is None or len(translate) != 3 or scale is None:
        raise MalformedHeader("header must define dim (3 values), translate (3 values) and scale")
    if len(set(dims)) != 1:
        raise NonCubicDims(f"dims {dims} are not cubic")
    R = dims[0]
    raw = np.frombuffer(fp.read(), dtype=np.uint8)
    if raw.size % 2:
        raise TruncatedData("odd number of run-length bytes")
    values, counts = raw[0::2], raw[1::2]
    total = int(counts.sum(dtype=np.int64))
    if total < R**3:
        raise TruncatedData(f"payload covers {total} of {R**3} voxels")
    if total > R**3:
        raise MalformedHeader(f"payload covers {total} voxels, more than {R**3}")
    flat = np.repeat((values > 0).astype(np.uint8), counts)
    grid = np.transpose(flat.reshape(R, R, R), (0, 2, 1))
    return VoxelGrid(grid, scale / R, np.asarray(translate))


def save_binvox(path, g: VoxelGrid):
    with open(path, "wb") as f:
        f.write(write_binvox(g))


def load_binvox(path) -> VoxelGrid:
    with open(path, "rb") as f:
        return read_binvox(f.read())


def write_ply(points) -> str:
    """ASCII PLY with one ``x y z`` vertex per line."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts]
    return "\n".join(lines) + "\n"
