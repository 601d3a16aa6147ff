import json

import numpy as np
import pytest

from app.core.errors import ConfigError
from app.harness import cli
from app.harness.corpus import prepare_scene
from app.harness.experiments import (
    fit_class_calibrations,
    run_ablation,
    run_noise_stats,
    run_real_fraction_study,
)
from app.schemas.experiment import load_experiment_config
from app.storage.exports import ablation_frame, write_csv

SMALL_CAMERA = {"fx": 110.0, "fy": 110.0, "cx": 40.0, "cy": 30.0, "width": 80, "height": 60}
ZERO_NOISE = {"hole_rate": 0.0}


def small_config(**overrides):
    data = {
        "seed": 7,
        "scene_count": 4,
        "train_fraction": 0.5,
        "camera": SMALL_CAMERA,
        "background": {"plane_depth": 1.4, "clutter_count": 0},
        "noise": {"hole_rate": 0.1, "gaussian_sigma": 0.003, "depth_scale_error": 0.01,
                  "clutter_count": 2, "clutter_size_range": [3, 8]},
        "correspondence_subsample": 200,
        "min_visible_pixels": 20,
        "workers": 1,
    }
    data.update(overrides)
    return load_experiment_config(data)


def test_scene_preparation_is_deterministic():
    cfg = small_config()
    a, b = prepare_scene(cfg, 1), prepare_scene(cfg, 1)
    assert np.array_equal(a.noisy.depth, b.noisy.depth)
    assert [x.bbox for x in a.annotations] == [x.bbox for x in b.annotations]
    assert not np.array_equal(a.noisy.depth, prepare_scene(cfg, 2).noisy.depth)


def test_zero_noise_corpus_is_solved_exactly():
    cfg = small_config(noise=ZERO_NOISE, receptive_radius=0)
    table = run_ablation(cfg)
    assert [entry.cell for entry in table.cells] == ["none", "box", "box+mask", "box+mask+depth"]
    for entry in table.cells:
        assert entry.failed_fits == 0
        assert all(r.add < 1e-6 for r in entry.report.per_instance), entry.cell
        assert entry.report.aggregates.auc_adds == pytest.approx(100.0, abs=0.01)


def test_clean_calibration_is_identity():
    cfg = small_config(noise=ZERO_NOISE)
    for model in fit_class_calibrations(cfg, cfg.train_scene_count).values():
        assert model.alpha == pytest.approx(1.0, abs=1e-9)
        assert model.beta == pytest.approx(0.0, abs=1e-9)


def test_calibration_learns_scale_error():
    cfg = small_config(noise={"depth_scale_error": 0.02})
    models = fit_class_calibrations(cfg, cfg.train_scene_count)
    fitted = [m for m in models.values() if m.pixel_count > 0]
    assert fitted
    for model in fitted:
        assert model.alpha == pytest.approx(1.0 / 1.02, abs=1e-6)


def test_baseline_cell_is_always_reported():
    cfg = small_config(ablation_cells=[{"box": True, "mask": True}])
    assert [entry.cell for entry in run_ablation(cfg).cells] == ["none", "box+mask"]


def test_results_do_not_depend_on_worker_count(tmp_path):
    cfg = small_config()
    one = write_csv(ablation_frame(run_ablation(cfg, workers=1)), tmp_path / "one.csv")
    two = write_csv(ablation_frame(run_ablation(cfg, workers=2)), tmp_path / "two.csv")
    assert one.read_bytes() == two.read_bytes()


def test_instance_results_are_traceable():
    cfg = small_config()
    entry = run_ablation(cfg).cell("box+mask")
    for r in entry.report.per_instance:
        assert r.seed == cfg.seed and r.cell == "box+mask"
        assert len(r.gt_R) == 9 and len(r.gt_T) == 3
        assert r.adds <= r.add + 1e-15


def test_degraded_annotations_lower_mask_iou():
    oracle = run_ablation(small_config())
    degraded = run_ablation(small_config(annotation_source="degraded", degrade_probability=1.0))
    assert oracle.cell("box+mask").mean_mask_iou == 1.0
    assert degraded.cell("box+mask").mean_mask_iou < 1.0


def test_full_fraction_reproduces_ablation_depth_cell():
    cfg = small_config()
    ablation = run_ablation(cfg).cell("box+mask+depth").report.aggregates
    table = run_real_fraction_study(cfg, fractions=[0.0, 1.0])
    row = table.lookup(1.0, "box+mask+depth")
    assert row.real_scenes == cfg.train_scene_count
    assert row.auc_adds == ablation.auc_adds
    assert row.auc_add_s == ablation.auc_add_s_mixed
    assert table.lookup(0.0, "box+mask+depth").alpha == {"box": 1.0, "cylinder": 1.0, "can": 1.0, "bracket": 1.0}
    assert table.lookup(0.0, "none").auc_adds == table.lookup(1.0, "none").auc_adds


def test_fraction_study_rejects_bad_fractions():
    with pytest.raises(ConfigError):
        run_real_fraction_study(small_config(), fractions=[1.5])


def test_noise_stats_zero_noise():
    summary = run_noise_stats(small_config(noise=ZERO_NOISE, scene_count=2))
    assert summary.hole_fraction == 0.0
    assert summary.mean < 1e-9
    assert summary.histogram[0].count == summary.valid_count
    assert sum(b.count for b in summary.histogram[1:]) == 0


def test_noise_stats_gaussian_sigma():
    cfg = load_experiment_config({"seed": 11, "scene_count": 20, "background": {"clutter_count": 0},
                                  "noise": {"gaussian_sigma": 0.005}})
    summary = run_noise_stats(cfg)
    assert summary.valid_count > 10000
    assert abs(summary.std - 0.005) < 0.02 * 0.005


def test_noise_stats_hole_fraction():
    cfg = load_experiment_config({"seed": 12, "scene_count": 10, "background": {"clutter_count": 0},
                                  "noise": {"hole_rate": 0.2}})
    summary = run_noise_stats(cfg)
    sigma = np.sqrt(0.2 * 0.8 / summary.pixel_count)
    assert abs(summary.hole_fraction - 0.2) < 3 * sigma


def test_config_errors_carry_field_diagnostics():
    with pytest.raises(ConfigError) as exc:
        load_experiment_config({"noise": {"hole_rate": 1.5}})
    assert [d["loc"] for d in exc.value.diagnostics] == ["noise.hole_rate"]
    with pytest.raises(ConfigError) as exc:
        load_experiment_config({"scene_count": 4, "train_fraction": 1.0})
    assert any("train_fraction" in d["msg"] for d in exc.value.diagnostics)
    with pytest.raises(ConfigError):
        load_experiment_config({"ablation_cells": [{"box": True}, {"box": True}]})


def _write_config(tmp_path, **overrides):
    data = {"seed": 3, "scene_count": 3, "train_fraction": 0.34, "camera": SMALL_CAMERA,
            "background": {"clutter_count": 0}, "min_visible_pixels": 20, "correspondence_subsample": 100}
    data.update(overrides)
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(data))
    return path


def test_cli_ablate_writes_tables(tmp_path):
    config = _write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["ablate", "--config", str(config), "--out", str(out)]) == cli.EXIT_OK
    header = (out / "ablation.csv").read_text().splitlines()[0]
    assert header.startswith("cell,box,mask,depth,class,count,auc_adds,auc_add_s,acc_0_1d")
    assert (out / "instances" / "box_mask_depth.csv").exists()
    models = json.loads((out / "calibration.json").read_text())
    assert {m["class"] for m in models} == {"box", "cylinder", "can", "bracket"}


def test_cli_estimate_then_evaluate(tmp_path):
    config = _write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["estimate", "--config", str(config), "--out", str(out)]) == cli.EXIT_OK
    estimates = json.loads((out / "estimates.json").read_text())
    assert {"scene", "instance", "class", "R", "T", "losses", "add_s_used"} <= set(estimates[0])
    assert cli.main(["evaluate", "--config", str(config), "--out", str(out)]) == cli.EXIT_OK
    header = (out / "reports" / "none.csv").read_text().splitlines()[0]
    assert header == "class,count,auc_adds,auc_add_s,acc_0_1d"


def test_cli_stats_and_simulate(tmp_path):
    config = _write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["stats", "--config", str(config), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "noise_histogram.csv").read_text().startswith("low,high,count")
    assert "hole_fraction" in json.loads((out / "noise_summary.json").read_text())
    assert cli.main(["simulate", "--config", str(config), "--out", str(out), "--seed", "5"]) == cli.EXIT_OK
    assert (out / "scenes" / "00000" / "clean.f32").exists()
    assert (out / "scenes" / "00000" / "annotations.json").exists()


def test_cli_exit_codes(tmp_path):
    bad = _write_config(tmp_path, noise={"hole_rate": 1.5})
    assert cli.main(["ablate", "--config", str(bad), "--out", str(tmp_path / "bad")]) == cli.EXIT_CONFIG
    assert cli.main(["ablate", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    broken = _write_config(tmp_path, meshes=[{"name": "ghost", "kind": "ply", "path": str(tmp_path / "none.ply")}])
    assert cli.main(["simulate", "--config", str(broken), "--out", str(tmp_path / "broken")]) == cli.EXIT_RUNTIME


ACCEPTANCE_NOISE = {"hole_rate": 0.2, "gaussian_sigma": 0.005, "depth_scale_error": 0.01,
                    "clutter_count": 2, "clutter_size_range": [3, 8]}


@pytest.mark.slow
def test_denoising_steps_improve_scores():
    cfg = small_config(scene_count=200, train_fraction=0.3, receptive_radius=2, noise=ACCEPTANCE_NOISE)
    table = run_ablation(cfg, workers=1)
    scores = [entry.report.aggregates.auc_adds for entry in table.cells]
    assert [entry.cell for entry in table.cells] == ["none", "box", "box+mask", "box+mask+depth"]
    assert scores == sorted(scores)
    assert scores[-1] >= scores[0] + 3.0


@pytest.mark.slow
def test_hole_filling_helps_without_noisy_calibration_data():
    cfg = small_config(scene_count=200, train_fraction=0.3, receptive_radius=2, noise=ACCEPTANCE_NOISE)
    table = run_real_fraction_study(cfg, fractions=[0.0])
    margin = table.lookup(0.0, "box+mask+depth").auc_adds - table.lookup(0.0, "none").auc_adds
    assert margin >= 5.0
