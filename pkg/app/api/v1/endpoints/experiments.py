import logging

from fastapi import APIRouter, Depends, HTTPException
from fastapi.concurrency import run_in_threadpool

from app.api.deps import get_settings
from app.core.config import Settings
from app.core.errors import ConfigError, Denoise6DError
from app.harness.experiments import run_ablation, run_noise_stats
from app.schemas import api as schemas
from app.schemas.experiment import ExperimentConfig, load_experiment_config
from app.schemas.reports import AblationTable, NoiseSummary

router = APIRouter()
logger = logging.getLogger(__name__)


def _config(request: schemas.ExperimentRequest, settings: Settings) -> ExperimentConfig:
    if request.scene_count > settings.API_MAX_SCENES:
        raise HTTPException(status_code=422,
                            detail=f"scene_count is limited to {settings.API_MAX_SCENES} over HTTP")
    data = {"scene_count": request.scene_count, "train_fraction": request.train_fraction, "workers": 1}
    if request.noise is not None:
        data["noise"] = request.noise.model_dump()
    try:
        return load_experiment_config(data, seed=request.seed)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=e.diagnostics or str(e))


@router.post("/ablation", response_model=AblationTable)
async def ablation(request: schemas.ExperimentRequest, settings: Settings = Depends(get_settings)):
    """Run the denoising ablation on a small corpus."""
    cfg = _config(request, settings)
    logger.info(f"Ablation requested: {cfg.scene_count} scenes, seed {cfg.seed}")
    try:
        return await run_in_threadpool(run_ablation, cfg, 1)
    except Denoise6DError as e:
        logger.error(f"Ablation failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/noise-stats", response_model=NoiseSummary)
async def noise_stats(request: schemas.ExperimentRequest, settings: Settings = Depends(get_settings)):
    cfg = _config(request, settings)
    try:
        return await run_in_threadpool(run_noise_stats, cfg, 1)
    except Denoise6DError as e:
        logger.error(f"Noise statistics failed: {e}")
        raise HTTPException(status_code=400, detail=str(e))
