from fastapi import APIRouter
from app.api.v1.endpoints import metrics, experiments

api_router_v1 = APIRouter()

api_router_v1.include_router(metrics.router, prefix="/metrics", tags=["Pose Metrics"])
api_router_v1.include_router(experiments.router, prefix="/experiments", tags=["Experiments"])
