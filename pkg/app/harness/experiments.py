"""
The experiment program: the denoising ablation grid, the calibration-data
fraction study and the depth re-projection error statistics.

Scenes are processed independently (optionally in a process pool) and merged
by scene index; every random draw comes from a (seed, scene, purpose)
substream, so the worker count never changes a result.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import (
    AllInvalid,
    ConfigError,
    DegenerateConfiguration,
    DegenerateFit,
    EmptyMaskAfterErosion,
    TooFewPoints,
)
from app.core.rng import substream
from app.engine.estimator import build_correspondences, corrupt_abc, fit_pose, loss_abc, loss_depth, loss_total
from app.engine.metrics import FAILED_POSE_ERROR, aggregate_report, mask_iou, metric_add, metric_adds
from app.engine.noise import error_histogram, histogram_edges, reprojection_error_stats
from app.engine.pipeline import (
    CalibrationModel,
    CalibrationSample,
    DenoiseOptions,
    InstanceAnnotation,
    calibration_sample,
    crop_and_mask,
    degrade_annotation,
    denoise_instance,
    fit_calibration,
)
from app.engine.render import ChannelStack, ReprojectedLabels, instance_labels
from app.harness.corpus import SceneData, build_meshes, crop_raster, hole_only, prepare_scene
from app.schemas.experiment import AblationCell, AnnotationSource, ExperimentConfig
from app.schemas.reports import (
    AblationTable,
    CellResult,
    FractionRow,
    FractionTable,
    HistogramBin,
    InstanceResult,
    NoiseSummary,
)

logger = logging.getLogger(__name__)


def map_scenes(fn: Callable, cfg: ExperimentConfig, indices: Sequence[int], workers: Optional[int] = None,
               *extra) -> List:
    """fn(cfg, index, *extra) for every index, results in index order."""
    workers = workers or cfg.workers
    indices = list(indices)
    if workers <= 1 or len(indices) <= 1:
        return [fn(cfg, index, *extra) for index in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, cfg, index, *extra) for index in indices]
        return [future.result() for future in futures]


def scene_annotations(cfg: ExperimentConfig, data: SceneData) -> List[Tuple[InstanceAnnotation, InstanceAnnotation]]:
    """(oracle, used) annotation pairs; `used` is degraded per the config's annotation source."""
    pairs = []
    for oracle in data.annotations:
        used = oracle
        if cfg.annotation_source is AnnotationSource.DEGRADED:
            rng = substream(cfg.seed, data.index, f"degrade/{oracle.instance_id}")
            if rng.random() < cfg.degrade_probability:
                try:
                    used = degrade_annotation(oracle, image_shape=data.clean.shape, rng=rng)
                except EmptyMaskAfterErosion:
                    logger.debug(f"Scene {data.index} instance {oracle.instance_id}: erosion emptied the mask, "
                                 f"keeping the oracle annotation")
        pairs.append((oracle, used))
    return pairs


def denoise_options(cfg: ExperimentConfig, class_name: str) -> DenoiseOptions:
    return DenoiseOptions(
        margin=cfg.crop_margin,
        kernel_sizes=tuple(cfg.fill_kernel_sizes),
        max_iterations=cfg.fill_max_iterations,
        receptive_radius=cfg.receptive_radius,
        mask_pe=class_name not in cfg.unmasked_pe_classes,
    )


def _calibration_samples(cfg: ExperimentConfig, index: int, real_count: int) -> List[Tuple[str, CalibrationSample]]:
    synthetic = index >= real_count
    data = prepare_scene(cfg, index, hole_only(cfg.noise) if synthetic else None)
    samples = []
    for ann in data.annotations:
        iid = ann.instance_id
        mesh = data.mesh_of(iid)
        labels = instance_labels(data.clean, mesh, data.pose_of(iid), iid)
        patch = crop_and_mask(data.noisy, ann, cfg.crop_margin)
        mask = crop_raster(labels.pixels, patch) & (patch.instance_id == iid)
        samples.append((mesh.name, calibration_sample(patch, crop_raster(labels.dprime, patch), mask,
                                                      crop_raster(labels.xyprime, patch))))
    return samples


def fit_class_calibrations(cfg: ExperimentConfig, real_count: int,
                           workers: Optional[int] = None) -> Dict[str, CalibrationModel]:
    """
    One calibration model per class from the training split: noisy versions
    of the first `real_count` training scenes, hole-only versions of the rest.
    real_count == 0 gives identity models.
    """
    names = list(build_meshes(cfg))
    n_train = cfg.train_scene_count
    if real_count == 0 or n_train == 0:
        logger.info("No noisy training scenes: using identity calibration for every class")
        return {name: CalibrationModel.identity(name) for name in names}
    per_scene = map_scenes(_calibration_samples, cfg, range(n_train), workers, real_count)
    grouped: Dict[str, List[CalibrationSample]] = {name: [] for name in names}
    for samples in per_scene:
        for name, sample in samples:
            grouped[name].append(sample)
    models = {}
    for name in names:
        try:
            models[name] = fit_calibration(grouped[name], name, cfg.calibration_supervision)
        except DegenerateFit as e:
            logger.warning(f"Calibration of '{name}' failed ({e}); using identity")
            models[name] = CalibrationModel.identity(name)
    return models


def _instance_losses(cfg: ExperimentConfig, data: SceneData, features: ChannelStack, labels: ReprojectedLabels,
                     iid: int, add: float) -> Dict[str, float]:
    losses = {"rt": add}
    mask = (features.valid & (features.instance_id == iid) & crop_raster(labels.pixels, features)
            & np.any(features.nrm != 0, axis=-1))
    if mask.any():
        labc = loss_abc(features.abc, crop_raster(data.clean.abc, features), mask)
        ldepth = loss_depth(features.depth, features.xy, features.nrm, crop_raster(labels.dprime, features),
                            crop_raster(labels.xyprime, features), crop_raster(labels.nrmprime, features), mask)
        losses.update(abc=labc, depth=ldepth, total=loss_total(add, labc, ldepth, cfg.loss_weights))
    return losses


def evaluate_instance(cfg: ExperimentConfig, data: SceneData, ann: InstanceAnnotation, cell: AblationCell,
                      calibration: Optional[CalibrationModel], labels: ReprojectedLabels,
                      iou: Optional[float] = None) -> InstanceResult:
    iid = ann.instance_id
    mesh = data.mesh_of(iid)
    gt = data.pose_of(iid)
    base = dict(scene=data.index, instance=iid, class_name=mesh.name, cell=cell.name, seed=cfg.seed,
                symmetric=mesh.symmetric, diameter=mesh.diameter, gt_R=gt.rotation.reshape(-1).tolist(),
                gt_T=gt.translation.tolist(), mask_iou=iou)
    try:
        features = denoise_instance(data.noisy, ann, cell, denoise_options(cfg, mesh.name), calibration)
        corr = build_correspondences(features, cfg.correspondence_subsample, instance_id=iid,
                                     rng=substream(cfg.seed, data.index, f"correspondences/{iid}"))
        corr = corrupt_abc(corr, cfg.abc_noise_sigma, rng=substream(cfg.seed, data.index, f"abc/{iid}"))
        pred = fit_pose(corr)
    except (TooFewPoints, DegenerateConfiguration, AllInvalid) as e:
        logger.debug(f"Scene {data.index} instance {iid} cell {cell.name}: fit failed ({e})")
        return InstanceResult(**base, add=FAILED_POSE_ERROR, adds=FAILED_POSE_ERROR, fit_failed=True)
    add = metric_add(pred, gt, mesh)
    return InstanceResult(
        **base,
        add=add,
        adds=metric_adds(pred, gt, mesh),
        correspondences=len(corr),
        pred_R=pred.rotation.reshape(-1).tolist(),
        pred_T=pred.translation.tolist(),
        losses=_instance_losses(cfg, data, features, labels, iid, add),
    )


def evaluate_scene(cfg: ExperimentConfig, index: int, cells: Sequence[AblationCell],
                   calibrations: Dict[str, CalibrationModel]) -> List[InstanceResult]:
    data = prepare_scene(cfg, index)
    shape = data.clean.shape
    results = []
    for oracle, used in scene_annotations(cfg, data):
        iid = oracle.instance_id
        mesh = data.mesh_of(iid)
        labels = instance_labels(data.clean, mesh, data.pose_of(iid), iid)
        iou = mask_iou(used.full_mask(shape), oracle.full_mask(shape))
        for cell in cells:
            results.append(evaluate_instance(cfg, data, used, cell, calibrations.get(mesh.name), labels, iou))
    return results


def _evaluate_cells(cfg: ExperimentConfig, cells: Sequence[AblationCell], calibrations: Dict[str, CalibrationModel],
                    workers: Optional[int]) -> List[InstanceResult]:
    test = range(cfg.train_scene_count, cfg.scene_count)
    per_scene = map_scenes(evaluate_scene, cfg, test, workers, list(cells), calibrations)
    return [result for scene in per_scene for result in scene]


def cell_result(cfg: ExperimentConfig, cell: AblationCell, results: Sequence[InstanceResult]) -> CellResult:
    mine = [r for r in results if r.cell == cell.name]
    report = aggregate_report(mine, cfg.tau_max, cfg.acc_fraction)
    ious = [r.mask_iou for r in mine if r.mask_iou is not None]
    return CellResult(
        cell=cell.name, box=cell.box, mask=cell.mask, depth=cell.depth, report=report,
        failed_fits=sum(r.fit_failed for r in mine),
        mean_mask_iou=float(np.mean(ious)) if ious else None,
    )


def run_ablation(cfg: ExperimentConfig, workers: Optional[int] = None) -> AblationTable:
    """Evaluate every ablation cell (plus the no-denoising baseline) on the test split."""
    cells = cfg.cells_with_baseline
    logger.info(f"Ablation: {cfg.scene_count} scenes ({cfg.train_scene_count} train), "
                f"cells {[c.name for c in cells]}")
    if any(cell.depth for cell in cells):
        calibrations = fit_class_calibrations(cfg, cfg.train_scene_count, workers)
    else:
        calibrations = {}
    results = _evaluate_cells(cfg, cells, calibrations, workers)
    table = AblationTable(
        seed=cfg.seed,
        scene_count=cfg.scene_count,
        train_scene_count=cfg.train_scene_count,
        cells=[cell_result(cfg, cell, results) for cell in cells],
        calibrations=list(calibrations.values()),
    )
    for entry in table.cells:
        logger.info(f"Cell {entry.cell}: AUC ADD-S {entry.report.aggregates.auc_adds:.2f}, "
                    f"AUC ADD(S) {entry.report.aggregates.auc_add_s_mixed:.2f}, failed fits {entry.failed_fits}")
    return table


def run_real_fraction_study(cfg: ExperimentConfig, fractions: Optional[Sequence[float]] = None,
                            workers: Optional[int] = None) -> FractionTable:
    """
    Re-evaluate the cells with calibration fit on a growing share of noisy
    training scenes (the rest hole-only). Cells without the depth step do not
    depend on the fraction and are evaluated once.
    """
    fractions = list(cfg.fractions if fractions is None else fractions)
    bad = [f for f in fractions if not 0.0 <= f <= 1.0]
    if bad:
        raise ConfigError("fractions must lie in [0, 1]", [{"loc": "fractions", "msg": f"out of range: {bad}"}])
    cells = cfg.cells_with_baseline
    plain_cells = [c for c in cells if not c.depth]
    depth_cells = [c for c in cells if c.depth]
    plain = _evaluate_cells(cfg, plain_cells, {}, workers) if plain_cells else []
    n_train = cfg.train_scene_count
    rows = []
    for fraction in fractions:
        real = min(math.ceil(fraction * n_train), n_train)
        calibrations = fit_class_calibrations(cfg, real, workers)
        with_depth = _evaluate_cells(cfg, depth_cells, calibrations, workers) if depth_cells else []
        for cell in cells:
            entry = cell_result(cfg, cell, with_depth if cell.depth else plain)
            rows.append(FractionRow(
                fraction=fraction,
                real_scenes=real,
                synthetic_scenes=n_train - real if real > 0 else 0,
                cell=cell.name,
                auc_adds=entry.report.aggregates.auc_adds,
                auc_add_s=entry.report.aggregates.auc_add_s_mixed,
                acc_0_1d=entry.report.aggregates.acc_0_1d,
                alpha={name: model.alpha for name, model in calibrations.items()},
            ))
        logger.info(f"Fraction {fraction}: {real} noisy / {n_train - real if real else 0} hole-only scenes")
    return FractionTable(seed=cfg.seed, rows=rows)


def _scene_errors(cfg: ExperimentConfig, index: int) -> Tuple[np.ndarray, int, int]:
    data = prepare_scene(cfg, index)
    signed, pixels, valid = [], 0, 0
    for ann in data.annotations:
        iid = ann.instance_id
        labels = instance_labels(data.clean, data.mesh_of(iid), data.pose_of(iid), iid)
        stats = reprojection_error_stats(data.noisy.depth, labels.dprime, labels.pixels, data.noisy.valid,
                                         cfg.histogram_bins, cfg.histogram_max)
        signed.append(stats.signed_errors)
        pixels += stats.pixel_count
        valid += stats.valid_count
    return (np.concatenate(signed) if signed else np.zeros(0)), pixels, valid


def run_noise_stats(cfg: ExperimentConfig, workers: Optional[int] = None) -> NoiseSummary:
    """Pooled |observed - D'| statistics over every visible instance of every scene."""
    per_scene = map_scenes(_scene_errors, cfg, range(cfg.scene_count), workers)
    signed = np.concatenate([s for s, _, _ in per_scene]) if per_scene else np.zeros(0)
    pixels = sum(p for _, p, _ in per_scene)
    valid = sum(v for _, _, v in per_scene)
    errors = np.abs(signed)
    edges = histogram_edges(cfg.histogram_bins, cfg.histogram_max)
    counts = error_histogram(errors, edges)
    if errors.size:
        mean, median = float(errors.mean()), float(np.median(errors))
        p95, std, bias = float(np.percentile(errors, 95)), float(signed.std()), float(signed.mean())
    else:
        mean = median = p95 = std = bias = 0.0
    summary = NoiseSummary(
        scene_count=cfg.scene_count,
        pixel_count=pixels,
        valid_count=valid,
        mean=mean,
        median=median,
        p95=p95,
        std=std,
        bias=bias,
        hole_fraction=1.0 - valid / pixels if pixels else 0.0,
        histogram=[HistogramBin(low=float(edges[k]), high=float(edges[k + 1]), count=int(counts[k]))
                   for k in range(len(counts))],
    )
    logger.info(f"Noise stats over {pixels} instance pixels: mean {mean:.5f} m, std {std:.5f} m, "
                f"hole fraction {summary.hole_fraction:.3f}")
    return summary
