from typing import List, Optional

from pydantic import BaseModel, Field

from app.schemas.experiment import NoiseSpec


class PosePayload(BaseModel):
    R: List[float] = Field(..., min_length=9, max_length=9)  # row-major
    T: List[float] = Field(..., min_length=3, max_length=3)  # meters

class PoseErrorRequest(BaseModel):
    mesh: str = "box"  # a built-in primitive
    symmetric: Optional[bool] = None
    pred: PosePayload
    gt: PosePayload

class PoseErrorResponse(BaseModel):
    mesh: str
    symmetric: bool
    diameter: float
    add: float
    adds: float
    add_s: float

class AUCRequest(BaseModel):
    errors: List[float]
    tau_max: Optional[float] = Field(None, gt=0.0)

class ACCRequest(BaseModel):
    errors: List[float]
    diameters: List[float]
    fraction: Optional[float] = Field(None, gt=0.0)

class ScoreResponse(BaseModel):
    value: float  # percent
    label: Optional[str] = None

class MaskPair(BaseModel):
    pred: List[List[bool]]
    gt: List[List[bool]]

class MIoURequest(BaseModel):
    pairs: List[MaskPair]

class ExperimentRequest(BaseModel):
    seed: Optional[int] = None
    scene_count: int = Field(10, ge=2)
    train_fraction: float = Field(0.3, ge=0.0, lt=1.0)
    noise: Optional[NoiseSpec] = None
