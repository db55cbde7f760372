"""Point-to-point ICP between partial observations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyShape
from .observe import PartialObservation
from .voxelcore import RigidTransform, to_point_cloud


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-5
    # None means 10 voxels of the observation's lattice.
    max_correspondence_dist: Optional[float] = None

    def __post_init__(self):
        if self.max_iterations < 1 or not self.convergence_eps > 0:
            raise ValueError("max_iterations and convergence_eps must be positive")
        if self.max_correspondence_dist is not None and not self.max_correspondence_dist > 0:
            raise ValueError("max_correspondence_dist must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    fitness: float
    iterations: int
    history: list


def kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation and translation taking ``src`` onto ``dst``.

    Reflections are ruled out by flipping the last singular direction when
    the SVD solution has determinant -1.
    """
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def icp_points(source, target, cfg: IcpConfig = IcpConfig(), max_dist=None, target_tree=None) -> IcpResult:
    """Align ``source`` points to ``target`` points starting from the identity."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyShape("ICP needs non-empty source and target clouds")
    max_dist = max_dist if max_dist is not None else cfg.max_correspondence_dist
    if max_dist is None:
        raise ValueError("max correspondence distance is undefined for raw point clouds")
    tree = target_tree if target_tree is not None else cKDTree(dst)

    R, t = np.eye(3), np.zeros(3)
    history = []
    prev = np.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = src @ R.T + t
        dist, nn = tree.query(moved, distance_upper_bound=max_dist)
        keep = np.isfinite(dist)
        if not keep.any():
            if not history:
                return IcpResult(RigidTransform.identity(), np.inf, it, history)
            break
        mean_d = float(dist[keep].mean())
        history.append(mean_d)
        if mean_d == 0.0 or abs(prev - mean_d) < cfg.convergence_eps:
            break
        prev = mean_d
        R, t = kabsch(src[keep], dst[nn[keep]])

    moved = src @ R.T + t
    dist, _ = tree.query(moved, distance_upper_bound=max_dist)
    keep = np.isfinite(dist)
    fitness = float(dist[keep].mean()) if keep.any() else np.inf
    # Orthonormalize away accumulated rounding before building the transform.
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return IcpResult(RigidTransform(R, t), fitness, it, history)


def icp(source: PartialObservation, target: PartialObservation, cfg: IcpConfig = IcpConfig(), target_tree=None):
    """Rigid transform aligning ``source``'s known-occupied voxels to ``target``'s.

    Returns ``(transform, fitness)`` where fitness is the final mean
    correspondence distance in meters (``inf`` when nothing corresponds).
    """
    src = to_point_cloud(source.known_occupied)
    dst = to_point_cloud(target.known_occupied)
    max_dist = cfg.max_correspondence_dist
    if max_dist is None:
        max_dist = 10.0 * target.known_occupied.voxel_size
    res = icp_points(src, dst, cfg, max_dist=max_dist, target_tree=target_tree)
    return res.transform, res.fitness
