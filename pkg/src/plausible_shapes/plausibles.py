"""Plausible-set construction: align every dataset shape to a test view with
ICP and keep the ones the observation model accepts."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyShape
from .observe import ObsConfig, PartialObservation, make_observation, obs_plausible
from .registration import IcpConfig, icp
from .shapedata import ShapeDataset
from .voxelcore import RigidTransform, VoxelGrid, load_binvox, save_binvox, shift_grid, to_point_cloud, transform_grid

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class PlausibleMember:
    shape: VoxelGrid
    source_id: str
    transform: RigidTransform


@dataclass
class Candidate:
    """A dataset shape, possibly pre-shifted along the sweep, with the view
    used to initialize its alignment."""

    source_id: str
    observation: PartialObservation
    shape: VoxelGrid
    base: RigidTransform


PlausibleSet = Dict[str, List[PlausibleMember]]


def compute_plausibles(
    x_i: PartialObservation,
    candidates,
    icp_cfg: IcpConfig = IcpConfig(),
    obs_cfg: ObsConfig = ObsConfig(),
) -> List[PlausibleMember]:
    """Every candidate shape that, once aligned to ``x_i``, explains it.

    ``candidates`` is a :class:`ShapeDataset` or a list of :class:`Candidate`.
    Output follows candidate order. Candidates whose view is empty, or that
    re-voxelize to nothing, are skipped.
    """
    if isinstance(candidates, ShapeDataset):
        candidates = [Candidate(e.id, e.observation, e.shape, RigidTransform.identity()) for e in candidates]
    target_pts = to_point_cloud(x_i.known_occupied)
    if len(target_pts) == 0:
        raise EmptyShape("test observation has no known-occupied voxel")
    tree = cKDTree(target_pts)
    out = []
    for c in candidates:
        try:
            T, _ = icp(c.observation, x_i, icp_cfg, target_tree=tree)
        except EmptyShape:
            log.debug("skipping %s: empty view", c.source_id)
            continue
        moved = transform_grid(c.shape, T)
        if moved.count() == 0:
            log.debug("skipping %s: empty after transform", c.source_id)
            continue
        if obs_plausible(x_i, moved, obs_cfg):
            out.append(PlausibleMember(moved, c.source_id, T.compose(c.base)))
    return out


def sweep_candidates(dataset: ShapeDataset, sweep: Sequence[int] = (0,)) -> List[Candidate]:
    """Dataset entries shifted by each sweep offset (whole voxels along x),
    re-observed through their own slit. Ordered by entry, then offset."""
    vs = dataset[0].shape.voxel_size if len(dataset) else 0.01
    out = []
    for e in dataset:
        for s in sweep:
            if s == 0:
                out.append(Candidate(e.id, e.observation, e.shape, RigidTransform.identity()))
                continue
            shape = shift_grid(e.shape, (s, 0, 0))
            if shape.count() == 0:
                continue
            obs = make_observation(shape, e.observation.slit)
            if obs.known_occupied.count() == 0:
                continue
            out.append(Candidate(f"{e.id}@{s:+d}", obs, shape, RigidTransform.from_translation((s * vs, 0.0, 0.0))))
    return out


_WORKER = {}


def _init_worker(candidates, icp_cfg, obs_cfg):
    _WORKER.update(candidates=candidates, icp_cfg=icp_cfg, obs_cfg=obs_cfg)


def _worker_job(x_i):
    return compute_plausibles(x_i, _WORKER["candidates"], _WORKER["icp_cfg"], _WORKER["obs_cfg"])


def build_plausible_sets(
    dataset: ShapeDataset,
    sweep: Sequence[int] = (0,),
    icp_cfg: IcpConfig = IcpConfig(),
    obs_cfg: ObsConfig = ObsConfig(),
    jobs: int = 1,
    dedup: bool = False,
    queries: Optional[ShapeDataset] = None,
) -> PlausibleSet:
    """Plausible set for every entry of ``queries`` (default: ``dataset``)
    against all sweep copies of ``dataset``.

    Work is split over query ids; each id's list is assembled in candidate
    order, so the result does not depend on ``jobs``.
    """
    queries = dataset if queries is None else queries
    candidates = sweep_candidates(dataset, sweep)
    n_pairs = len(candidates) * len(queries)
    log.info("plausible sets: %d queries x %d candidates = %d pairs", len(queries), len(candidates), n_pairs)
    start = time.perf_counter()
    views = [e.observation for e in queries]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(candidates, icp_cfg, obs_cfg)) as ex:
            results = list(ex.map(_worker_job, views))
    else:
        results = []
        for n, x in enumerate(views, 1):
            results.append(compute_plausibles(x, candidates, icp_cfg, obs_cfg))
            if n % 10 == 0 or n == len(views):
                log.info("  %d/%d queries done (%.1fs)", n, len(views), time.perf_counter() - start)
    out: PlausibleSet = {}
    for e, members in zip(queries, results):
        if dedup:
            members = deduplicate(members)
        out[e.id] = members
    log.info("plausible sets built in %.1fs", time.perf_counter() - start)
    return out


def deduplicate(members: List[PlausibleMember]) -> List[PlausibleMember]:
    """Drop exact voxel-grid duplicates, keeping the first occurrence."""
    seen, out = set(), []
    for m in members:
        key = m.shape.values.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(m)
    return out


def set_sizes(psets: PlausibleSet) -> Dict[str, int]:
    return {k: len(v) for k, v in psets.items()}


def save_plausible_sets(psets: PlausibleSet, directory, extra: Optional[Dict] = None):
    """One binvox per member plus ``manifest.json`` mapping test id to
    ``{source_id, transform (3x4 row-major), file}`` records."""
    os.makedirs(os.path.join(directory, "shapes"), exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "kind": "plausible_sets", "sets": {}}
    if extra:
        manifest.update(extra)
    for tid, members in psets.items():
        rows = []
        for n, m in enumerate(members):
            rel = f"shapes/{tid}__{n:04d}.binvox"
            save_binvox(os.path.join(directory, rel), m.shape)
            rows.append({"source_id": m.source_id, "transform": m.transform.rows(), "file": rel})
        manifest["sets"][tid] = rows
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_plausible_sets(directory) -> PlausibleSet:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported plausible-set schema {manifest.get('schema_version')!r}")
    out: PlausibleSet = {}
    for tid, rows in manifest["sets"].items():
        members = []
        for r in rows:
            m = np.vstack([np.asarray(r["transform"], float).reshape(3, 4), [0, 0, 0, 1]])
            members.append(PlausibleMember(load_binvox(os.path.join(directory, r["file"])), r["source_id"], RigidTransform.from_matrix(m)))
        out[tid] = members
    return out
