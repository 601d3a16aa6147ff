"""
Pose estimation from abc <-> xyd correspondences and the training losses
evaluated as functionals.

The regression head is replaced by closed-form weighted rigid fitting, the
exact minimizer of the RT loss given correspondences.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from app.core.errors import DegenerateConfiguration, EmptyMask, TooFewPoints
from app.core.rng import as_generator
from app.engine.geometry import Pose, nearest_rotation
from app.engine.metrics import metric_add
from app.engine.render import ChannelStack
from app.schemas.experiment import LossWeights

logger = logging.getLogger(__name__)

SINGULAR_RATIO = 1e-9

# (first epoch, lambda0) breakpoints; each value holds until the next breakpoint
LAMBDA0_SCHEDULES: Dict[str, Tuple[Tuple[int, float], ...]] = {
    "main_text": ((1, 1.0), (20, 5.0), (30, 20.0), (38, 50.0)),
    "supplement": ((1, 1.0), (16, 5.0), (26, 10.0), (36, 20.0)),
}
SCHEDULE_EPOCHS = 40


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    abc: np.ndarray  # (N, 3) object frame
    xyd: np.ndarray  # (N, 3) camera frame
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        abc = np.array(self.abc, dtype=np.float64).reshape(-1, 3)
        xyd = np.array(self.xyd, dtype=np.float64).reshape(-1, 3)
        if abc.shape != xyd.shape:
            raise ValueError(f"abc and xyd differ in length: {len(abc)} vs {len(xyd)}")
        object.__setattr__(self, "abc", abc)
        object.__setattr__(self, "xyd", xyd)
        if self.weights is not None:
            weights = np.array(self.weights, dtype=np.float64).reshape(-1)
            if weights.shape != (len(abc),) or np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be one finite nonnegative value per pair")
            object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.abc)


def build_correspondences(patch: ChannelStack, subsample: Optional[int] = None, seed: Optional[int] = None,
                          instance_id: Optional[int] = None,
                          rng: Optional[np.random.Generator] = None) -> CorrespondenceSet:
    """
    (abc, (x, y, d)) for every valid instance pixel, subsampled uniformly
    without replacement to at most `subsample` pairs (kept in raster order).
    """
    own = patch.instance_id == instance_id if instance_id is not None else patch.instance_id > 0
    usable = patch.valid & own & np.all(np.isfinite(patch.abc), axis=-1)
    flat = np.flatnonzero(usable)
    if flat.size < 3:
        raise TooFewPoints(f"Only {flat.size} usable pixels for correspondences")
    if subsample is not None and flat.size > subsample:
        rng = as_generator(rng, seed, "correspondences")
        flat = flat[np.sort(rng.choice(flat.size, size=subsample, replace=False))]
    abc = patch.abc.reshape(-1, 3)[flat]
    xyd = np.column_stack([patch.xy.reshape(-1, 2)[flat], patch.depth.reshape(-1)[flat]])
    return CorrespondenceSet(abc, xyd)


def corrupt_abc(c: CorrespondenceSet, sigma: float, seed: Optional[int] = None,
                rng: Optional[np.random.Generator] = None) -> CorrespondenceSet:
    """Gaussian noise on the object-frame coordinates (abc-head error model)."""
    if sigma <= 0:
        return c
    rng = as_generator(rng, seed, "abc")
    return CorrespondenceSet(c.abc + rng.normal(0.0, sigma, size=c.abc.shape), c.xyd, c.weights)


def fit_pose(c: CorrespondenceSet) -> Pose:
    """argmin_{R,T} sum w_i ||R abc_i + T - xyd_i||^2 (weighted Kabsch)."""
    if len(c) < 3:
        raise DegenerateConfiguration(f"Need at least 3 correspondences, got {len(c)}")
    weights = np.ones(len(c)) if c.weights is None else c.weights
    total = weights.sum()
    if total <= 0:
        raise DegenerateConfiguration("All correspondence weights are zero")
    w = weights / total
    mu_abc = w @ c.abc
    mu_xyd = w @ c.xyd
    src = c.abc - mu_abc
    dst = c.xyd - mu_xyd
    spread = np.linalg.svd(np.sqrt(w)[:, None] * src, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= SINGULAR_RATIO * spread[0]:
        raise DegenerateConfiguration("Correspondence points are collinear or coincident")
    cross = (w[:, None] * dst).T @ src
    u, _, vt = np.linalg.svd(cross)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rotation = nearest_rotation(u @ fix @ vt)
    translation = mu_xyd - rotation @ mu_abc
    return Pose(rotation, translation)


def fit_residual(c: CorrespondenceSet, pose: Pose) -> float:
    weights = np.ones(len(c)) if c.weights is None else c.weights
    residual = c.abc @ pose.rotation.T + pose.translation - c.xyd
    return float(np.sum(weights * np.sum(residual * residual, axis=1)))


# the RT regression loss is the ADD metric
loss_rt = metric_add


def loss_abc(pred_abc: np.ndarray, gt_abc: np.ndarray, mask: np.ndarray) -> float:
    """Mean over mask pixels of |da| + |db| + |dc|."""
    pred_abc = np.asarray(pred_abc, dtype=np.float64)
    gt_abc = np.asarray(gt_abc, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred_abc.shape != gt_abc.shape or pred_abc.shape[:2] != mask.shape:
        raise ValueError("abc rasters and mask must share one shape")
    if not mask.any():
        raise EmptyMask("loss_abc needs a non-empty mask")
    return float(np.mean(np.sum(np.abs(pred_abc[mask] - gt_abc[mask]), axis=-1)))


def loss_depth(depth: np.ndarray, xy: np.ndarray, nrm: np.ndarray,
               dprime: np.ndarray, xyprime: np.ndarray, nrmprime: np.ndarray, mask: np.ndarray) -> float:
    """Mean over mask pixels of the six L1 terms on d, x, y, n_x, n_y, n_z."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("loss_depth needs a non-empty mask")
    pred = np.concatenate([np.asarray(depth, dtype=np.float64)[..., None], np.asarray(xy, dtype=np.float64),
                           np.asarray(nrm, dtype=np.float64)], axis=-1)
    label = np.concatenate([np.asarray(dprime, dtype=np.float64)[..., None],
                            np.asarray(xyprime, dtype=np.float64), np.asarray(nrmprime, dtype=np.float64)], axis=-1)
    if pred.shape != label.shape or pred.shape[:2] != mask.shape:
        raise ValueError("prediction, label rasters and mask must share one shape")
    return float(np.mean(np.sum(np.abs(pred[mask] - label[mask]), axis=-1)))


def loss_total(lrt: float, labc: float, ldepth: float, w: LossWeights = LossWeights()) -> float:
    for value in (lrt, labc, ldepth):
        if not np.isfinite(value):
            raise ValueError("loss components must be finite")
    return w.lambda0 * lrt + w.lambda1 * labc + w.lambda2 * ldepth


def lambda_schedule(preset: str, epoch: int) -> float:
    """lambda0 for a 1-based epoch under a named schedule."""
    if preset not in LAMBDA0_SCHEDULES:
        raise ValueError(f"Unknown schedule '{preset}', expected one of {sorted(LAMBDA0_SCHEDULES)}")
    if not 1 <= epoch <= SCHEDULE_EPOCHS:
        raise ValueError(f"epoch must lie in [1, {SCHEDULE_EPOCHS}]")
    value = LAMBDA0_SCHEDULES[preset][0][1]
    for start, weight in LAMBDA0_SCHEDULES[preset]:
        if epoch >= start:
            value = weight
    return value


def loss_weights_for(preset: str, epoch: int) -> LossWeights:
    return LossWeights(lambda0=lambda_schedule(preset, epoch), lambda1=1.0, lambda2=1.0)
