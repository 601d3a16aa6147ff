"""
ADD-family pose errors, the AUC / ACC-0.1d summaries and mask IoU.
"""
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from app.core.errors import EmptyInput
from app.engine.geometry import Pose, apply_pose
from app.engine.meshes import ModelMesh
from app.schemas.reports import AggregateScores, InstanceResult, MetricReport, ReportRow

logger = logging.getLogger(__name__)

# pose error recorded for instances whose fit failed; beyond every threshold
FAILED_POSE_ERROR = 1.0


class NearestNeighborIndex:
    """Exact nearest-neighbour queries over a fixed point set (k-d tree)."""

    def __init__(self, points: np.ndarray):
        points = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyInput("NearestNeighborIndex needs at least one point")
        points.setflags(write=False)
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray):
        """(distances, indices) of the nearest indexed point for each query."""
        queries = np.asarray(queries, dtype=np.float64)
        distances, indices = self._tree.query(queries.reshape(-1, 3), k=1)
        return distances.reshape(queries.shape[:-1]), indices.reshape(queries.shape[:-1])

    @classmethod
    def for_pose(cls, mesh: ModelMesh, pose: Pose) -> "NearestNeighborIndex":
        return cls(apply_pose(pose, mesh.vertices))


def metric_add(pred: Pose, gt: Pose, mesh: ModelMesh) -> float:
    """Mean distance between matched vertices under the two poses."""
    moved = apply_pose(pred, mesh.vertices)
    target = apply_pose(gt, mesh.vertices)
    return float(np.mean(np.linalg.norm(moved - target, axis=1)))


def metric_adds(pred: Pose, gt: Pose, mesh: ModelMesh, index: NearestNeighborIndex = None) -> float:
    """Mean closest-point distance from pred-transformed to gt-transformed vertices."""
    moved = apply_pose(pred, mesh.vertices)
    target = apply_pose(gt, mesh.vertices)
    if index is None:
        index = NearestNeighborIndex(target)
    _, nearest = index.query(moved)
    closest = np.linalg.norm(moved - index.points[nearest], axis=1)
    # the matched vertex is part of the searched set
    matched = np.linalg.norm(moved - target, axis=1)
    return float(np.mean(np.minimum(closest, matched)))


def metric_add_s_selector(pred: Pose, gt: Pose, mesh: ModelMesh) -> float:
    return metric_adds(pred, gt, mesh) if mesh.symmetric else metric_add(pred, gt, mesh)


def auc(errors: Sequence[float], tau_max: float = 0.1) -> float:
    """
    Area under the accuracy-threshold curve on [0, tau_max], in percent:
    100 * mean(1 - min(e, tau_max) / tau_max).
    """
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise EmptyInput("auc needs at least one error")
    if tau_max <= 0:
        raise ValueError("tau_max must be positive")
    clamped = np.minimum(errors, tau_max)
    return float(100.0 * np.mean(1.0 - clamped / tau_max))


def acc_threshold(errors: Sequence[float], diameters: Sequence[float], fraction: float = 0.1) -> float:
    """Percent of errors strictly below fraction * diameter."""
    errors = np.asarray(list(errors), dtype=np.float64)
    diameters = np.asarray(list(diameters), dtype=np.float64)
    if errors.size == 0:
        raise EmptyInput("acc_threshold needs at least one error")
    if errors.shape != diameters.shape:
        raise ValueError("errors and diameters must have the same length")
    if np.any(diameters <= 0):
        raise ValueError("diameters must be positive")
    return float(100.0 * np.count_nonzero(errors < fraction * diameters) / errors.size)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(pred_masks: Iterable[np.ndarray], gt_masks: Iterable[np.ndarray]) -> float:
    pairs = list(zip(pred_masks, gt_masks))
    if not pairs:
        raise EmptyInput("miou needs at least one mask pair")
    return float(np.mean([mask_iou(p, g) for p, g in pairs]))


def _scores(results: List[InstanceResult], tau_max: float, fraction: float) -> AggregateScores:
    return AggregateScores(
        auc_adds=auc([r.adds for r in results], tau_max),
        auc_add_s_mixed=auc([r.add_s for r in results], tau_max),
        acc_0_1d=acc_threshold([r.add_s for r in results], [r.diameter for r in results], fraction),
    )


def aggregate_report(results: Iterable[InstanceResult], tau_max: float = 0.1,
                     acc_fraction: float = 0.1) -> MetricReport:
    """
    Per-class rows (sorted by class name) and two overall aggregates: the
    mean of the class rows (default) and the pooled instance-weighted scores.
    """
    results = list(results)
    if not results:
        raise EmptyInput("aggregate_report needs at least one instance result")
    by_class: Dict[str, List[InstanceResult]] = defaultdict(list)
    for result in results:
        by_class[result.class_name].append(result)
    rows = []
    for name in sorted(by_class):
        scores = _scores(by_class[name], tau_max, acc_fraction)
        rows.append(ReportRow(class_name=name, count=len(by_class[name]), auc_adds=scores.auc_adds,
                              auc_add_s=scores.auc_add_s_mixed, acc_0_1d=scores.acc_0_1d))
    class_weighted = AggregateScores(
        auc_adds=float(np.mean([r.auc_adds for r in rows])),
        auc_add_s_mixed=float(np.mean([r.auc_add_s for r in rows])),
        acc_0_1d=float(np.mean([r.acc_0_1d for r in rows])),
    )
    return MetricReport(
        per_instance=results,
        rows=rows,
        aggregates=class_weighted,
        instance_weighted=_scores(results, tau_max, acc_fraction),
        tau_max=tau_max,
        acc_fraction=acc_fraction,
    )
