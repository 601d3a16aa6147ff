"""
Command-line entry point.

    python -m app.harness ablate --config experiment.json --out runs/a --workers 4

Exit codes: 0 on success, 2 on a configuration error, 3 on any other failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from app.core.config import configure_logging
from app.core.errors import ConfigError
from app.engine.metrics import aggregate_report
from app.engine.pipeline import crop_and_mask, denoise_instance
from app.harness.corpus import prepare_scene
from app.harness.experiments import (
    denoise_options,
    fit_class_calibrations,
    run_ablation,
    run_noise_stats,
    run_real_fraction_study,
    scene_annotations,
)
from app.schemas.experiment import ExperimentConfig, load_experiment_config
from app.schemas.reports import InstanceResult
from app.storage.exports import (
    ablation_frame,
    fraction_frame,
    histogram_frame,
    instance_frame,
    report_frame,
    write_annotations,
    write_csv,
    write_json,
)
from app.storage.rasters import write_channel_stack, write_depth_pgm

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _scene_dir(out: Path, index: int) -> Path:
    return out / "scenes" / f"{index:05d}"


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> None:
    """Clean renders, oracle annotations and ground-truth poses per scene."""
    for index in range(cfg.scene_count):
        data = prepare_scene(cfg, index)
        target = _scene_dir(out, index)
        write_channel_stack(data.clean, target / "clean")
        write_depth_pgm(data.clean.depth, target / "clean_depth.pgm")
        write_annotations(data.annotations, target / "annotations.json")
        write_json([{"instance": k, "class": inst.mesh.name, **inst.pose.to_dict()}
                    for k, inst in enumerate(data.scene.instances, start=1)], target / "poses.json")
    logger.info(f"Simulated {cfg.scene_count} scenes into {out}")


def cmd_corrupt(cfg: ExperimentConfig, out: Path) -> None:
    for index in range(cfg.scene_count):
        data = prepare_scene(cfg, index)
        target = _scene_dir(out, index)
        write_channel_stack(data.noisy, target / "noisy")
        write_depth_pgm(data.noisy.depth, target / "noisy_depth.pgm")
    logger.info(f"Corrupted {cfg.scene_count} scenes into {out}")


def cmd_denoise(cfg: ExperimentConfig, out: Path) -> None:
    """Calibration models plus the fully denoised patch of every test instance."""
    calibrations = fit_class_calibrations(cfg, cfg.train_scene_count)
    write_json([model.to_json_dict() for model in calibrations.values()], out / "calibration.json")
    full = [c for c in cfg.ablation_cells if c.box and c.mask and c.depth]
    for index in range(cfg.train_scene_count, cfg.scene_count):
        data = prepare_scene(cfg, index)
        for _, ann in scene_annotations(cfg, data):
            name = data.mesh_of(ann.instance_id).name
            target = _scene_dir(out, index) / f"instance_{ann.instance_id}"
            write_channel_stack(crop_and_mask(data.noisy, ann, cfg.crop_margin), target / "masked")
            if full:
                patch = denoise_instance(data.noisy, ann, full[0], denoise_options(cfg, name), calibrations.get(name))
                write_channel_stack(patch, target / "denoised")
    logger.info(f"Wrote {len(calibrations)} calibration models and denoised patches to {out}")


def cmd_estimate(cfg: ExperimentConfig, out: Path) -> None:
    table = run_ablation(cfg)
    records = [r for entry in table.cells for r in entry.report.per_instance]
    write_json([r.model_dump(mode="json", by_alias=True) for r in records], out / "estimates.json")
    logger.info(f"Wrote {len(records)} pose estimates to {out / 'estimates.json'}")


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> None:
    """Metric reports per cell from estimates.json (written by `estimate`)."""
    source = out / "estimates.json"
    if not source.exists():
        cmd_estimate(cfg, out)
    records = [InstanceResult.model_validate(item) for item in json.loads(source.read_text())]
    cells: Dict[str, List[InstanceResult]] = {}
    for record in records:
        cells.setdefault(record.cell, []).append(record)
    for cell, results in cells.items():
        report = aggregate_report(results, cfg.tau_max, cfg.acc_fraction)
        slug = cell.replace("+", "_")
        write_csv(report_frame(report), out / "reports" / f"{slug}.csv")
        write_json(report, out / "reports" / f"{slug}.json")
    logger.info(f"Evaluated {len(records)} estimates over {len(cells)} cells")


def cmd_ablate(cfg: ExperimentConfig, out: Path) -> None:
    table = run_ablation(cfg)
    write_csv(ablation_frame(table), out / "ablation.csv")
    write_json(table, out / "ablation.json")
    for entry in table.cells:
        write_csv(instance_frame(entry.report), out / "instances" / f"{entry.cell.replace('+', '_')}.csv")
    write_json([m.to_json_dict() for m in table.calibrations], out / "calibration.json")


def cmd_fractions(cfg: ExperimentConfig, out: Path) -> None:
    table = run_real_fraction_study(cfg)
    write_csv(fraction_frame(table), out / "fractions.csv")
    write_json(table, out / "fractions.json")


def cmd_stats(cfg: ExperimentConfig, out: Path) -> None:
    summary = run_noise_stats(cfg)
    write_csv(histogram_frame(summary), out / "noise_histogram.csv")
    write_json(summary.model_dump(exclude={"histogram"}), out / "noise_summary.json")


COMMANDS: Dict[str, Callable[[ExperimentConfig, Path], None]] = {
    "simulate": cmd_simulate,
    "corrupt": cmd_corrupt,
    "denoise": cmd_denoise,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "fractions": cmd_fractions,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=int, help="parallel scene workers")
    common.add_argument("--log-level", default=None, help="logging level (default from LOG_LEVEL)")
    parser = argparse.ArgumentParser(prog="denoise6d", description="Two-step RGB-D denoising benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).strip().splitlines()[0])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        cfg = load_experiment_config(
            args.config,
            seed=args.seed,
            output_dir=str(args.out) if args.out else None,
            workers=args.workers,
        )
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
