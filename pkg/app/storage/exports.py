"""
Structured results on disk: pydantic models as JSON, tables as CSV through
pandas, and run-length-encoded annotation masks.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.engine.pipeline import InstanceAnnotation
from app.schemas.experiment import AnnotationSource
from app.schemas.reports import AblationTable, FractionTable, MetricReport, NoiseSummary

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["class", "count", "auc_adds", "auc_add_s", "acc_0_1d"]
FLOAT_FORMAT = "%.6f"


def write_json(data: Union[BaseModel, Dict[str, Any], List[Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, BaseModel):
        payload = data.model_dump(mode="json", by_alias=True)
    else:
        payload = data
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def report_frame(report: MetricReport) -> pd.DataFrame:
    rows = [[r.class_name, r.count, r.auc_adds, r.auc_add_s, r.acc_0_1d] for r in report.table_rows()]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def ablation_frame(table: AblationTable) -> pd.DataFrame:
    rows = []
    for entry in table.cells:
        for row in entry.report.table_rows():
            rows.append({
                "cell": entry.cell,
                "box": entry.box,
                "mask": entry.mask,
                "depth": entry.depth,
                "class": row.class_name,
                "count": row.count,
                "auc_adds": row.auc_adds,
                "auc_add_s": row.auc_add_s,
                "acc_0_1d": row.acc_0_1d,
                "failed_fits": entry.failed_fits,
                "mask_iou": entry.mean_mask_iou,
            })
    return pd.DataFrame(rows)


def fraction_frame(table: FractionTable) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump(exclude={"alpha"}) for row in table.rows])


def histogram_frame(summary: NoiseSummary) -> pd.DataFrame:
    return pd.DataFrame([b.model_dump() for b in summary.histogram], columns=["low", "high", "count"])


def instance_frame(report: MetricReport) -> pd.DataFrame:
    return pd.DataFrame([{
        "scene": r.scene, "instance": r.instance, "class": r.class_name, "cell": r.cell,
        "add": r.add, "adds": r.adds, "add_s": r.add_s, "add_s_used": r.add_s_used, "fit_failed": r.fit_failed,
    } for r in report.per_instance])


def encode_rle(mask: np.ndarray) -> Dict[str, Any]:
    """Row-major run lengths, starting with a run of False (possibly 0)."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(-1)
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def decode_rle(rle: Dict[str, Any]) -> np.ndarray:
    height, width = rle["size"]
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle["counts"])
    if flat.size != height * width:
        raise ValueError(f"RLE covers {flat.size} pixels, expected {height * width}")
    return flat.reshape(height, width)


def annotation_to_dict(ann: InstanceAnnotation) -> Dict[str, Any]:
    return {"instance_id": ann.instance_id, "bbox": list(ann.bbox), "source": ann.source.value,
            "mask": encode_rle(ann.mask)}


def annotation_from_dict(data: Dict[str, Any]) -> InstanceAnnotation:
    return InstanceAnnotation(int(data["instance_id"]), tuple(data["bbox"]), decode_rle(data["mask"]),
                              AnnotationSource(data.get("source", "oracle")))


def write_annotations(annotations: Sequence[InstanceAnnotation], path: Union[str, Path]) -> Path:
    return write_json([annotation_to_dict(a) for a in annotations], path)


def read_annotations(path: Union[str, Path]) -> List[InstanceAnnotation]:
    return [annotation_from_dict(item) for item in json.loads(Path(path).read_text())]
