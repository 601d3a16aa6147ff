import logging

import numpy as np
from fastapi import APIRouter, Depends, HTTPException

from app.api.deps import get_settings
from app.core.config import Settings
from app.core.errors import Denoise6DError
from app.engine.geometry import Pose
from app.engine.meshes import PRIMITIVES, ModelMesh
from app.engine.metrics import acc_threshold, auc, metric_add, metric_adds, miou
from app.schemas import api as schemas

router = APIRouter()
logger = logging.getLogger(__name__)


def _pose(payload: schemas.PosePayload) -> Pose:
    return Pose(np.asarray(payload.R, dtype=np.float64).reshape(3, 3), payload.T)


@router.post("/pose-error", response_model=schemas.PoseErrorResponse)
async def pose_error(request: schemas.PoseErrorRequest):
    """
    ADD, ADD-S and ADD(S) of a predicted pose against ground truth on a
    built-in primitive mesh.
    """
    if request.mesh not in PRIMITIVES:
        raise HTTPException(status_code=404, detail=f"Unknown mesh '{request.mesh}'")
    try:
        mesh = PRIMITIVES[request.mesh]()
        if request.symmetric is not None and request.symmetric != mesh.symmetric:
            mesh = ModelMesh(mesh.name, mesh.vertices, mesh.triangles, request.symmetric, mesh.metadata)
        pred, gt = _pose(request.pred), _pose(request.gt)
        add = metric_add(pred, gt, mesh)
        adds = metric_adds(pred, gt, mesh)
    except Denoise6DError as e:
        logger.warning(f"pose-error rejected: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    return schemas.PoseErrorResponse(mesh=mesh.name, symmetric=mesh.symmetric, diameter=mesh.diameter,
                                     add=add, adds=adds, add_s=adds if mesh.symmetric else add)


@router.post("/auc", response_model=schemas.ScoreResponse)
async def area_under_curve(request: schemas.AUCRequest, settings: Settings = Depends(get_settings)):
    tau_max = request.tau_max or settings.AUC_TAU_MAX
    try:
        value = auc(request.errors, tau_max)
    except Denoise6DError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return schemas.ScoreResponse(value=value, label=f"AUC (tau_max={tau_max} m)")


@router.post("/acc", response_model=schemas.ScoreResponse)
async def accuracy(request: schemas.ACCRequest, settings: Settings = Depends(get_settings)):
    fraction = request.fraction or settings.ACC_DIAMETER_FRACTION
    try:
        value = acc_threshold(request.errors, request.diameters, fraction)
    except Denoise6DError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return schemas.ScoreResponse(value=value, label=f"ACC-{fraction}d")


@router.post("/miou", response_model=schemas.ScoreResponse)
async def mean_iou(request: schemas.MIoURequest):
    try:
        value = miou([np.array(p.pred, dtype=bool) for p in request.pairs],
                     [np.array(p.gt, dtype=bool) for p in request.pairs])
    except Denoise6DError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return schemas.ScoreResponse(value=value, label="mIoU")
