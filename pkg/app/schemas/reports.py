from typing import Dict, List, Optional

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, computed_field

from app.engine.pipeline import CalibrationModel


class InstanceResult(BaseModel):
    """One evaluated instance; enough to recompute the row in isolation."""

    model_config = ConfigDict(populate_by_name=True)

    scene: int
    instance: int
    class_name: str = Field(alias="class")
    cell: str = "none"
    seed: int = 0
    symmetric: bool = False
    diameter: float  # meters
    add: float  # meters
    adds: float  # meters
    fit_failed: bool = False
    correspondences: int = 0
    pred_R: List[float] = Field(default_factory=list, validation_alias=AliasChoices("R", "pred_R"),
                                serialization_alias="R")  # row-major 3x3
    pred_T: List[float] = Field(default_factory=list, validation_alias=AliasChoices("T", "pred_T"),
                                serialization_alias="T")
    gt_R: List[float] = Field(default_factory=list)
    gt_T: List[float] = Field(default_factory=list)
    losses: Dict[str, float] = Field(default_factory=dict)
    mask_iou: Optional[float] = None

    @computed_field
    @property
    def add_s_used(self) -> bool:
        return self.symmetric

    @computed_field
    @property
    def add_s(self) -> float:
        """ADD(S): ADD-S for symmetric classes, ADD otherwise."""
        return self.adds if self.symmetric else self.add


class ReportRow(BaseModel):
    class_name: str
    count: int
    auc_adds: float  # percent
    auc_add_s: float  # percent
    acc_0_1d: float  # percent


class AggregateScores(BaseModel):
    auc_adds: float
    auc_add_s_mixed: float
    acc_0_1d: float


class MetricReport(BaseModel):
    per_instance: List[InstanceResult] = Field(default_factory=list)
    rows: List[ReportRow] = Field(default_factory=list)
    aggregates: AggregateScores  # class-weighted ("Avg")
    instance_weighted: AggregateScores  # "Avg-instance"
    tau_max: float = 0.1
    acc_fraction: float = 0.1

    def table_rows(self) -> List[ReportRow]:
        """Per-class rows followed by the Avg and Avg-instance rows."""
        total = sum(r.count for r in self.rows)
        extra = [
            ReportRow(class_name="Avg", count=total, auc_adds=self.aggregates.auc_adds,
                      auc_add_s=self.aggregates.auc_add_s_mixed, acc_0_1d=self.aggregates.acc_0_1d),
            ReportRow(class_name="Avg-instance", count=total, auc_adds=self.instance_weighted.auc_adds,
                      auc_add_s=self.instance_weighted.auc_add_s_mixed, acc_0_1d=self.instance_weighted.acc_0_1d),
        ]
        return list(self.rows) + extra


class CellResult(BaseModel):
    cell: str
    box: bool
    mask: bool
    depth: bool
    report: MetricReport
    failed_fits: int = 0
    mean_mask_iou: Optional[float] = None


class AblationTable(BaseModel):
    seed: int
    scene_count: int
    train_scene_count: int
    cells: List[CellResult]
    calibrations: List[CalibrationModel] = Field(default_factory=list)

    def cell(self, name: str) -> CellResult:
        for entry in self.cells:
            if entry.cell == name:
                return entry
        raise KeyError(name)


class FractionRow(BaseModel):
    fraction: float
    real_scenes: int
    synthetic_scenes: int
    cell: str
    auc_adds: float
    auc_add_s: float
    acc_0_1d: float
    alpha: Optional[Dict[str, float]] = None


class FractionTable(BaseModel):
    seed: int
    rows: List[FractionRow]

    def lookup(self, fraction: float, cell: str) -> FractionRow:
        for row in self.rows:
            if row.fraction == fraction and row.cell == cell:
                return row
        raise KeyError((fraction, cell))


class HistogramBin(BaseModel):
    low: float  # meters
    high: float  # meters
    count: int


class NoiseSummary(BaseModel):
    scene_count: int
    pixel_count: int
    valid_count: int
    mean: float
    median: float
    p95: float
    std: float
    bias: float
    hole_fraction: float
    histogram: List[HistogramBin]
