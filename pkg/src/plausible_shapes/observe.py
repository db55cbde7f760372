"""Depth rendering, 2.5D partial observations and the binary observation model.

The camera is orthographic and looks along +z: pixel ``(u, v)`` is the voxel
column ``(i=u, j=v)``, and depth is ``voxel_size * k`` of the first occupied
voxel along that column. Depth images are indexed ``[u, v]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .voxelcore import VoxelGrid


@dataclass(frozen=True, eq=False)
class DepthImage:
    values: np.ndarray
    sentinel: float

    @property
    def hit(self) -> np.ndarray:
        return self.values < self.sentinel


@dataclass(frozen=True, eq=False)
class PartialObservation:
    """Known-occupied and known-free voxels seen from the fixed camera.

    ``visibility`` marks the pixels (columns) not hidden by a slit occluder;
    ``slit`` keeps the ``(first_col, width)`` that produced it, if any.
    """

    known_occupied: VoxelGrid
    known_free: VoxelGrid
    visibility: np.ndarray
    slit: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if not self.known_occupied.same_lattice(self.known_free):
            raise ValueError("known_occupied and known_free must share a lattice")
        R = self.known_occupied.resolution
        vis = np.array(self.visibility, dtype=bool)
        if vis.shape != (R, R):
            raise ValueError(f"visibility must be {R}x{R}")
        vis.setflags(write=False)
        object.__setattr__(self, "visibility", vis)
        if np.any((self.known_occupied.values > 0) & (self.known_free.values > 0)):
            raise ValueError("a voxel cannot be both known occupied and known free")

    @property
    def resolution(self) -> int:
        return self.known_occupied.resolution

    def stacked(self, dtype=np.float32) -> np.ndarray:
        """``(2, R, R, R)`` array: known occupied then known free."""
        return np.stack([self.known_occupied.values, self.known_free.values]).astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, PartialObservation):
            return NotImplemented
        return (
            self.known_occupied == other.known_occupied
            and self.known_free == other.known_free
            and np.array_equal(self.visibility, other.visibility)
        )

    __hash__ = None


@dataclass(frozen=True)
class ObsConfig:
    delta: float = 0.04
    outlier_budget: int = 0
    mask_gradient_threshold: Optional[float] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.outlier_budget < 0:
            raise ValueError("outlier_budget must be >= 0")
        if self.mask_gradient_threshold is not None and not self.mask_gradient_threshold > 0:
            raise ValueError("mask_gradient_threshold must be positive")

    @property
    def mask_threshold(self) -> float:
        return self.delta if self.mask_gradient_threshold is None else self.mask_gradient_threshold


def sentinel_depth(g: VoxelGrid) -> float:
    return 10.0 * g.resolution * g.voxel_size


def _first_hit(g: VoxelGrid):
    occ = g.values >= 0.5
    hit = occ.any(axis=2)
    k_first = np.where(hit, occ.argmax(axis=2), -1)
    return hit, k_first


def render_depth(g: VoxelGrid) -> DepthImage:
    hit, k_first = _first_hit(g)
    s = sentinel_depth(g)
    return DepthImage(np.where(hit, g.voxel_size * k_first, s), s)


def slit_visibility(resolution, slit=None) -> np.ndarray:
    vis = np.zeros((resolution, resolution), dtype=bool)
    if slit is None:
        vis[:] = True
        return vis
    first, width = slit
    if width < 1 or width > resolution:
        raise ValueError(f"slit width {width} outside [1, {resolution}]")
    vis[max(first, 0): max(first + width, 0), :] = True
    return vis


def make_observation(g: VoxelGrid, slit=None) -> PartialObservation:
    """2.5D view of ``g``, optionally through a vertical slit ``(first_col, width)``."""
    R = g.resolution
    vis = slit_visibility(R, slit)
    hit, k_first = _first_hit(g)
    seen = vis & hit
    k = np.arange(R)
    known_occ = seen[:, :, None] & (k[None, None, :] == k_first[:, :, None])
    free = (seen[:, :, None] & (k[None, None, :] < k_first[:, :, None])) | (vis & ~hit)[:, :, None]
    return PartialObservation(
        g.with_values(known_occ.astype(np.uint8)),
        g.with_values(free.astype(np.uint8)),
        vis,
        None if slit is None else (int(slit[0]), int(slit[1])),
    )


def unreliable_mask(img: DepthImage, threshold: float) -> np.ndarray:
    """Pixels next to a depth jump larger than ``threshold``, grown by one pixel.

    The jump is the largest absolute difference to an in-bounds 4-neighbor;
    background pixels take part with the sentinel depth, so silhouettes are
    always unreliable. Growth uses 8-connectivity.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    d = np.asarray(img.values, dtype=np.float64)
    jump = np.zeros(d.shape, dtype=bool)
    diff_u = np.abs(np.diff(d, axis=0)) > threshold
    diff_v = np.abs(np.diff(d, axis=1)) > threshold
    jump[:-1, :] |= diff_u
    jump[1:, :] |= diff_u
    jump[:, :-1] |= diff_v
    jump[:, 1:] |= diff_v
    return ndimage.binary_dilation(jump, structure=np.ones((3, 3), dtype=bool))


def observed_depth(x: PartialObservation) -> DepthImage:
    return render_depth(x.known_occupied)


def count_outliers(x: PartialObservation, y: VoxelGrid, cfg: ObsConfig = ObsConfig()) -> int:
    if not x.known_occupied.same_lattice(y):
        raise ValueError("observation and candidate shape live on different lattices")
    obs = observed_depth(x)
    exp = render_depth(y)
    mask = unreliable_mask(exp, cfg.mask_threshold) | ~x.visibility
    bad = (np.abs(obs.values - exp.values) > cfg.delta) & ~mask
    return int(np.count_nonzero(bad))


def obs_plausible(x: PartialObservation, y: VoxelGrid, cfg: ObsConfig = ObsConfig()) -> bool:
    """True when ``y`` explains the depth seen in ``x``.

    Reliable, unoccluded pixels must agree within ``cfg.delta``; up to
    ``cfg.outlier_budget`` of them may disagree.
    """
    return count_outliers(x, y, cfg) <= cfg.outlier_budget


def write_pgm(img: DepthImage) -> bytes:
    """16-bit binary PGM in millimeters; image rows run top (max v) to bottom."""
    mm = np.clip(np.rint(np.asarray(img.values) * 1000.0), 0, 65535).astype(">u2")
    rows = mm.T[::-1]
    h, w = rows.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + rows.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`write_pgm`; returns millimeters indexed ``[u, v]``."""
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    if int(parts[2]) != 65535:
        raise ValueError("expected a 16-bit PGM")
    rows = np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
    return rows[::-1].T.astype(np.int64)
