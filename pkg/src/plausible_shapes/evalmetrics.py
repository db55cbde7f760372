"""Set-level completion metrics: best accuracy, coverage, plausibility,
plausible diversity, plus nearest-training-shape analysis.

All distances are Chamfer distances in meters. Every metric works from a
precomputed distance matrix so a report builds each k-d tree once.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .voxelcore import VoxelGrid, chamfer_matrix


def _penalty(grids, empty_penalty):
    if empty_penalty is not None:
        return empty_penalty
    return max(g.diagonal for g in grids)


def distances(samples: Sequence[VoxelGrid], others: Sequence[VoxelGrid], empty_penalty=None) -> np.ndarray:
    """``D[s, p]`` = chamfer(samples[s], others[p]); empty grids score ``empty_penalty``
    (default: the grid diagonal)."""
    if len(samples) == 0 or len(others) == 0:
        raise ValueError("metric sets must be non-empty")
    return chamfer_matrix(samples, others, _penalty(list(samples) + list(others), empty_penalty))


def coverage_from_matrix(D: np.ndarray) -> float:
    """Mean over plausibles (columns) of the nearest sample (rows)."""
    return float(np.mean(np.min(D, axis=0)))


def plausibility_from_matrix(D: np.ndarray) -> float:
    """Mean over samples (rows) of the nearest plausible (columns)."""
    return float(np.mean(np.min(D, axis=1)))


def best_accuracy(samples, ground_truth: VoxelGrid, empty_penalty=None) -> float:
    return float(np.min(distances(samples, [ground_truth], empty_penalty)))


def coverage(samples, plausibles, empty_penalty=None) -> float:
    return coverage_from_matrix(distances(samples, plausibles, empty_penalty))


def plausibility(samples, plausibles, empty_penalty=None) -> float:
    return plausibility_from_matrix(distances(samples, plausibles, empty_penalty))


def plausible_diversity(samples, plausibles, empty_penalty=None) -> float:
    D = distances(samples, plausibles, empty_penalty)
    return coverage_from_matrix(D) + plausibility_from_matrix(D)


def nearest_shape(query: VoxelGrid, pool: Sequence[VoxelGrid]):
    """``(index, distance)`` of the closest pool shape; ties go to the lowest index."""
    D = distances([query], pool)[0]
    idx = int(np.argmin(D))
    return idx, float(D[idx])


@dataclass
class SimilarityReport:
    mean_d_test: float
    mean_d_train: float
    frac_closer_to_train: float
    d_test: np.ndarray = field(repr=False)
    d_train: np.ndarray = field(repr=False)
    nearest_train_index: int = -1


def train_similarity_report(samples, test_shape: VoxelGrid, train_pool, empty_penalty=None) -> SimilarityReport:
    """Compare each sample with the test shape and with the training shape
    nearest to that test shape."""
    nearest, _ = nearest_shape(test_shape, train_pool)
    D = distances(samples, [test_shape, train_pool[nearest]], empty_penalty)
    d_test, d_train = D[:, 0], D[:, 1]
    return SimilarityReport(
        float(d_test.mean()),
        float(d_train.mean()),
        float(np.mean(d_train < d_test)),
        d_test,
        d_train,
        nearest,
    )


@dataclass
class MetricsRow:
    id: str
    best_accuracy: float
    coverage: float
    plausibility: float
    n_samples: int = 0
    n_plausibles: int = 0

    @property
    def plausible_diversity(self) -> float:
        return self.coverage + self.plausibility


@dataclass
class MetricsReport:
    rows: List[MetricsRow]
    empty_penalty: float

    def mean(self, ids: Optional[Sequence[str]] = None) -> Dict[str, float]:
        keep = self.rows if ids is None else [r for r in self.rows if r.id in set(ids)]
        if not keep:
            return {k: float("nan") for k in ("best_accuracy", "coverage", "plausibility", "plausible_diversity")}
        acc = float(np.mean([r.best_accuracy for r in keep]))
        cov = float(np.mean([r.coverage for r in keep]))
        pla = float(np.mean([r.plausibility for r in keep]))
        return {"best_accuracy": acc, "coverage": cov, "plausibility": pla, "plausible_diversity": cov + pla}

    def to_csv(self, strata: Optional[Dict[str, Sequence[str]]] = None) -> str:
        """CSV in millimeters, one row per id, then ``MEAN`` and any stratum means."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# empty_penalty_mm", f"{self.empty_penalty * 1000:.6f}"])
        w.writerow(["id", "best_acc_mm", "coverage_mm", "plausibility_mm", "plausible_diversity_mm"])

        def fmt(name, acc, cov, pla):
            w.writerow([name] + [f"{v * 1000:.6f}" for v in (acc, cov, pla, cov + pla)])

        for r in self.rows:
            fmt(r.id, r.best_accuracy, r.coverage, r.plausibility)
        m = self.mean()
        fmt("MEAN", m["best_accuracy"], m["coverage"], m["plausibility"])
        for name, ids in (strata or {}).items():
            m = self.mean(ids)
            fmt(f"MEAN:{name}", m["best_accuracy"], m["coverage"], m["plausibility"])
        return buf.getvalue()


def evaluate_row(id, samples, plausibles, ground_truth, empty_penalty=None) -> MetricsRow:
    plausibles = [getattr(m, "shape", m) for m in plausibles]
    penalty = _penalty(list(samples) + plausibles + [ground_truth], empty_penalty)
    D = distances(samples, plausibles + [ground_truth], penalty)
    Dp = D[:, :-1]
    return MetricsRow(
        str(id),
        float(D[:, -1].min()),
        coverage_from_matrix(Dp),
        plausibility_from_matrix(Dp),
        len(samples),
        len(plausibles),
    )


def _row_job(args):
    return evaluate_row(*args)


def evaluate(sample_sets, plausible_sets, ground_truths, empty_penalty=None, jobs=1) -> MetricsReport:
    """Metrics for every id in ``sample_sets`` (dict id -> list of grids).

    Rows come back in the key order of ``sample_sets`` regardless of ``jobs``.
    """
    ids = list(sample_sets)
    if empty_penalty is None:
        empty_penalty = next(iter(ground_truths.values())).diagonal
    tasks = [(i, sample_sets[i], plausible_sets[i], ground_truths[i], empty_penalty) for i in ids]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(_row_job, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        rows = [_row_job(t) for t in tasks]
    return MetricsReport(rows, float(empty_penalty))
