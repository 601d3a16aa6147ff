import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.config import settings
from app.core.errors import ConfigError
from app.engine.geometry import CameraIntrinsics


class NoiseSpec(BaseModel):
    """Instance-inside and instance-outside noise injected into clean renders."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hole_rate: float = Field(0.0, ge=0.0, le=1.0)
    hole_blob_radius: int = Field(0, ge=0)  # pixels
    gaussian_sigma: float = Field(0.0, ge=0.0)  # meters
    quantization_step: float = Field(0.0, ge=0.0)  # meters
    depth_scale_error: float = Field(0.0, gt=-0.5, lt=0.5)
    depth_offset: float = 0.0  # meters
    clutter_count: int = Field(0, ge=0)
    clutter_depth_range: Tuple[float, float] = (0.4, 1.2)
    clutter_size_range: Tuple[int, int] = (4, 16)  # pixels
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.clutter_depth_range
        if not 0 < lo <= hi:
            raise ValueError("clutter_depth_range must satisfy 0 < low <= high")
        smin, smax = self.clutter_size_range
        if not 1 <= smin <= smax:
            raise ValueError("clutter_size_range must satisfy 1 <= low <= high")
        return self

    @property
    def is_zero(self) -> bool:
        return (self.hole_rate == 0 and self.gaussian_sigma == 0 and self.quantization_step == 0
                and self.depth_scale_error == 0 and self.depth_offset == 0 and self.clutter_count == 0)


class BackgroundSpec(BaseModel):
    """Background plane (None disables it) and seeded clutter boxes in front of it."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    plane_depth: Optional[float] = Field(1.4, gt=0.0)  # meters
    clutter_count: int = Field(0, ge=0)
    clutter_seed: int = 0


class MeshKind(str, Enum):
    BOX = "box"
    CYLINDER = "cylinder"
    CAN = "can"
    BRACKET = "bracket"
    SQUARE = "square"
    PLY = "ply"


class MeshDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: MeshKind
    symmetric: Optional[bool] = None  # None keeps the primitive's default
    params: Dict[str, Any] = Field(default_factory=dict)
    path: Optional[str] = None

    @model_validator(mode="after")
    def _ply_needs_path(self):
        if self.kind is MeshKind.PLY and not self.path:
            raise ValueError("PLY meshes need a path")
        return self


class AblationCell(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    box: bool = False
    mask: bool = False
    depth: bool = False

    @property
    def name(self) -> str:
        parts = [label for label, on in (("box", self.box), ("mask", self.mask), ("depth", self.depth)) if on]
        return "+".join(parts) if parts else "none"

    @property
    def key(self) -> Tuple[bool, bool, bool]:
        return (self.box, self.mask, self.depth)


BASELINE_CELL = AblationCell()
DEFAULT_CELLS = [
    AblationCell(),
    AblationCell(box=True),
    AblationCell(box=True, mask=True),
    AblationCell(box=True, mask=True, depth=True),
]


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda0: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    lambda1: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    lambda2: float = Field(1.0, ge=0.0, allow_inf_nan=False)


class AnnotationSource(str, Enum):
    ORACLE = "oracle"
    DEGRADED = "degraded"


def default_meshes() -> List[MeshDescriptor]:
    return [
        MeshDescriptor(name="box", kind=MeshKind.BOX),
        MeshDescriptor(name="cylinder", kind=MeshKind.CYLINDER),
        MeshDescriptor(name="can", kind=MeshKind.CAN),
        MeshDescriptor(name="bracket", kind=MeshKind.BRACKET),
    ]


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=220.0, fy=220.0, cx=80.0, cy=60.0, width=160, height=120)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    scene_count: int = Field(200, ge=1)
    instances_per_scene: int = Field(2, ge=1, le=6)
    object_depth_range: Tuple[float, float] = (0.6, 1.0)  # meters
    meshes: List[MeshDescriptor] = Field(default_factory=default_meshes)
    camera: CameraIntrinsics = Field(default_factory=default_camera)
    background: BackgroundSpec = Field(default_factory=lambda: BackgroundSpec(clutter_count=2))
    noise: NoiseSpec = Field(default_factory=lambda: NoiseSpec(
        hole_rate=0.2, gaussian_sigma=0.005, depth_scale_error=0.01, clutter_count=4))
    ablation_cells: List[AblationCell] = Field(default_factory=lambda: list(DEFAULT_CELLS))
    train_fraction: float = Field(0.3, ge=0.0, le=1.0)
    output_dir: str = Field(default_factory=lambda: f"{settings.OUTPUT_DIR}/default")
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)

    pe_mode: Literal["normalized_uv", "sinusoidal"] = "normalized_uv"
    receptive_radius: int = Field(2, ge=0)
    crop_margin: float = Field(0.0, ge=0.0)
    fill_kernel_sizes: List[int] = Field(default_factory=lambda: [5, 7, 9])
    fill_max_iterations: int = Field(10, ge=1)
    calibration_supervision: List[Literal["depth", "xy"]] = Field(default_factory=lambda: ["depth"])
    unmasked_pe_classes: List[str] = Field(default_factory=list)
    correspondence_subsample: int = Field(400, ge=3)
    abc_noise_sigma: float = Field(0.0, ge=0.0)  # meters, object frame
    min_visible_pixels: int = Field(30, ge=3)
    annotation_source: AnnotationSource = AnnotationSource.ORACLE
    degrade_probability: float = Field(0.75, ge=0.0, le=1.0)
    loss_weights: LossWeights = Field(default_factory=LossWeights)

    tau_max: float = Field(0.1, gt=0.0)  # meters
    acc_fraction: float = Field(0.1, gt=0.0)
    fractions: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    histogram_bins: int = Field(50, ge=1)
    histogram_max: float = Field(0.05, gt=0.0)  # meters

    @field_validator("fill_kernel_sizes")
    @classmethod
    def _odd_kernels(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError("kernel sizes must be positive odd integers")
        return value

    @field_validator("fractions")
    @classmethod
    def _unit_fractions(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= f <= 1.0 for f in value):
            raise ValueError("fractions must lie in [0, 1]")
        return value

    @field_validator("calibration_supervision")
    @classmethod
    def _depth_first(cls, value: List[str]) -> List[str]:
        if "depth" not in value:
            raise ValueError("calibration supervision must include depth")
        return list(dict.fromkeys(value))

    @model_validator(mode="after")
    def _check_consistency(self):
        if not self.meshes:
            raise ValueError("at least one mesh is required")
        names = [m.name for m in self.meshes]
        if len(set(names)) != len(names):
            raise ValueError("mesh names must be unique")
        keys = [cell.key for cell in self.ablation_cells]
        if not keys:
            raise ValueError("at least one ablation cell is required")
        if len(set(keys)) != len(keys):
            raise ValueError("ablation cells must be distinct")
        if self.train_scene_count >= self.scene_count:
            raise ValueError("train_fraction must leave at least one test scene")
        lo, hi = self.object_depth_range
        if not 0 < lo <= hi:
            raise ValueError("object_depth_range must satisfy 0 < low <= high")
        plane = self.background.plane_depth
        if plane is not None and plane <= hi + 0.1:
            raise ValueError("background plane must lie behind the objects")
        return self

    @property
    def train_scene_count(self) -> int:
        return int(self.train_fraction * self.scene_count)

    @property
    def cells_with_baseline(self) -> List[AblationCell]:
        cells = list(self.ablation_cells)
        if BASELINE_CELL.key not in {c.key for c in cells}:
            cells.insert(0, BASELINE_CELL)
        return cells


def load_experiment_config(source: Union[None, str, Path, Dict[str, Any]] = None,
                           **overrides) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a JSON file path or a dict, applying
    non-None keyword overrides (seed, output_dir, workers, ...) on top.
    Raises ConfigError with field-level diagnostics.
    """
    if source is None:
        data: Dict[str, Any] = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}", [{"loc": "config", "msg": "file not found"}])
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON: {path}", [{"loc": "config", "msg": str(e)}])
        if not isinstance(data, dict):
            raise ConfigError("Config root must be a JSON object", [{"loc": "config", "msg": "not an object"}])
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError.from_validation_error(e)
