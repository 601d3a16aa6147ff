import itertools

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from app.core.errors import DegenerateConfiguration, EmptyMask, TooFewPoints
from app.engine import meshes
from app.engine.estimator import (
    CorrespondenceSet,
    build_correspondences,
    corrupt_abc,
    fit_pose,
    fit_residual,
    lambda_schedule,
    loss_abc,
    loss_depth,
    loss_rt,
    loss_total,
    loss_weights_for,
)
from app.engine.geometry import Pose, apply_pose, compose
from app.engine.metrics import metric_add
from app.schemas.experiment import LossWeights


def _pose_close(a: Pose, b: Pose, tol: float = 1e-9) -> bool:
    return (np.linalg.norm(a.rotation - b.rotation) <= tol
            and np.linalg.norm(a.translation - b.translation) <= tol)


def test_fit_identity(rng):
    abc = rng.normal(size=(10, 3))
    assert _pose_close(fit_pose(CorrespondenceSet(abc, abc)), Pose.identity())


def test_fit_recovers_random_poses(rng):
    for _ in range(100):
        truth = Pose.random(rng, rng.uniform(-0.5, 0.5, size=3) + (0.0, 0.0, 1.0))
        abc = rng.uniform(-0.1, 0.1, size=(10, 3))
        assert _pose_close(fit_pose(CorrespondenceSet(abc, apply_pose(truth, abc))), truth)


def test_weighted_fit_ignores_zero_weight_outliers(rng):
    truth = Pose.random(rng, (0.0, 0.1, 0.8))
    abc = rng.uniform(-0.1, 0.1, size=(12, 3))
    xyd = apply_pose(truth, abc)
    xyd[:3] += 0.5
    weights = np.r_[np.zeros(3), np.ones(9)]
    assert _pose_close(fit_pose(CorrespondenceSet(abc, xyd, weights)), truth)


def test_degenerate_configurations():
    line = np.outer(np.linspace(0.0, 1.0, 5), (1.0, 2.0, 3.0))
    with pytest.raises(DegenerateConfiguration):
        fit_pose(CorrespondenceSet(line, line))
    with pytest.raises(DegenerateConfiguration):
        fit_pose(CorrespondenceSet(line[:2], line[:2]))
    with pytest.raises(DegenerateConfiguration):
        fit_pose(CorrespondenceSet(np.ones((4, 3)), np.ones((4, 3))))


def test_correspondence_set_validation():
    with pytest.raises(ValueError):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        CorrespondenceSet(np.zeros((3, 3)), np.zeros((3, 3)), weights=[1.0, -1.0, 1.0])


def test_fit_is_equivariant_to_model_rotation(rng):
    for _ in range(20):
        truth = Pose.random(rng, (0.05, -0.02, 0.7))
        q = Rotation.random(random_state=rng).as_matrix()
        abc = rng.uniform(-0.1, 0.1, size=(15, 3))
        xyd = apply_pose(truth, abc) + rng.normal(0.0, 1e-3, size=(15, 3))
        base = fit_pose(CorrespondenceSet(abc, xyd))
        rotated = fit_pose(CorrespondenceSet(abc @ q.T, xyd))
        assert np.linalg.norm(rotated.rotation - base.rotation @ q.T) < 1e-9
        assert np.linalg.norm(rotated.translation - base.translation) < 1e-9


def test_fit_is_locally_optimal(rng):
    truth = Pose.random(rng, (0.0, 0.0, 0.9))
    abc = rng.uniform(-0.1, 0.1, size=(40, 3))
    c = CorrespondenceSet(abc, apply_pose(truth, abc) + rng.normal(0.0, 0.005, size=(40, 3)))
    fitted = fit_pose(c)
    best = fit_residual(c, fitted)
    for _ in range(1000):
        nudge = Pose.from_rotvec(rng.normal(0.0, 1e-3, size=3), rng.normal(0.0, 1e-3, size=3))
        assert best <= fit_residual(c, compose(nudge, fitted)) + 1e-15


def test_build_correspondences_on_render(box_render, box_scene):
    pose = box_scene.instances[0].pose
    c = build_correspondences(box_render, instance_id=1)
    assert len(c) == int((box_render.instance_id == 1).sum())
    assert np.allclose(apply_pose(pose, c.abc), c.xyd, atol=1e-9)
    assert _pose_close(fit_pose(c), pose, tol=1e-7)


def test_subsample_is_deterministic(box_render):
    a = build_correspondences(box_render, subsample=100, seed=3, instance_id=1)
    b = build_correspondences(box_render, subsample=100, seed=3, instance_id=1)
    c = build_correspondences(box_render, subsample=100, seed=4, instance_id=1)
    assert len(a) == 100
    assert np.array_equal(a.abc, b.abc) and np.array_equal(a.xyd, b.xyd)
    assert not np.array_equal(a.abc, c.abc)


def test_holes_are_excluded(box_render):
    valid = box_render.valid.copy()
    rows, cols = np.nonzero(box_render.instance_id == 1)
    valid[rows[::2], cols[::2]] = False
    holed = box_render.replace(valid=valid, depth=np.where(valid, box_render.depth, 0.0))
    c = build_correspondences(holed, instance_id=1)
    assert len(c) == int((valid & (box_render.instance_id == 1)).sum())
    assert np.all(c.xyd[:, 2] > 0)


def test_too_few_points(stack_factory):
    ids = np.zeros((5, 5), dtype=np.int32)
    ids[2, 2:4] = 1
    with pytest.raises(TooFewPoints):
        build_correspondences(stack_factory(np.ones((5, 5)), instance_id=ids))


def test_corrupt_abc(rng):
    c = CorrespondenceSet(rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
    assert corrupt_abc(c, 0.0) is c
    noisy = corrupt_abc(c, 0.01, seed=1)
    assert np.array_equal(noisy.xyd, c.xyd)
    assert 0.005 < np.std(noisy.abc - c.abc) < 0.015


def test_loss_rt_is_the_add_metric(rng, box_mesh):
    assert loss_rt is metric_add
    gt = Pose.random(rng, (0.0, 0.0, 1.0))
    shift = Pose(np.eye(3), (0.01, -0.02, 0.02))
    assert loss_rt(gt, gt, box_mesh) == 0.0
    assert loss_rt(compose(shift, gt), gt, box_mesh) == pytest.approx(0.03, abs=1e-12)


def test_loss_rt_matches_direct_sum_on_cube(rng):
    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=3)))
    cube = meshes.ModelMesh("cube", corners, [[0, 1, 2]])
    pred = Pose.random(rng, rng.normal(size=3))
    gt = Pose.random(rng, rng.normal(size=3))
    total = 0.0
    for x in corners:
        total += np.linalg.norm((pred.rotation @ x + pred.translation) - (gt.rotation @ x + gt.translation))
    assert loss_rt(pred, gt, cube) == pytest.approx(total / 8, abs=1e-12)


def test_loss_abc(rng):
    gt = rng.normal(size=(4, 4, 3))
    mask = np.ones((4, 4), dtype=bool)
    assert loss_abc(gt, gt, mask) == 0.0
    assert loss_abc(gt + (0.01, 0.0, 0.0), gt, mask) == pytest.approx(0.01)
    pred = rng.normal(size=(4, 4, 3))
    mask = rng.random((4, 4)) > 0.3
    mask[0, 0] = True
    expected = sum(np.abs(pred[i, j] - gt[i, j]).sum() for i in range(4) for j in range(4) if mask[i, j]) / mask.sum()
    assert loss_abc(pred, gt, mask) == pytest.approx(expected)
    with pytest.raises(EmptyMask):
        loss_abc(pred, gt, np.zeros((4, 4), dtype=bool))


def test_loss_depth(rng):
    d = rng.uniform(0.5, 1.0, size=(4, 4))
    xy = rng.normal(size=(4, 4, 2))
    nrm = rng.normal(size=(4, 4, 3))
    mask = np.ones((4, 4), dtype=bool)
    assert loss_depth(d, xy, nrm, d, xy, nrm, mask) == 0.0
    assert loss_depth(d - 0.003, xy, nrm, d, xy, nrm, mask) == pytest.approx(0.003)
    d2, xy2, nrm2 = rng.uniform(0.5, 1.0, size=(4, 4)), rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 3))
    expected = np.mean([abs(d2[i, j] - d[i, j]) + np.abs(xy2[i, j] - xy[i, j]).sum()
                        + np.abs(nrm2[i, j] - nrm[i, j]).sum() for i in range(4) for j in range(4)])
    assert loss_depth(d2, xy2, nrm2, d, xy, nrm, mask) == pytest.approx(expected)
    with pytest.raises(EmptyMask):
        loss_depth(d, xy, nrm, d, xy, nrm, np.zeros((4, 4), dtype=bool))


def test_loss_total():
    assert loss_total(2.0, 3.0, 4.0, LossWeights()) == 9.0
    assert loss_total(2.0, 3.0, 4.0, LossWeights(lambda0=0.0, lambda1=0.0, lambda2=0.0)) == 0.0
    with pytest.raises(ValueError):
        loss_total(float("nan"), 0.0, 0.0)
    with pytest.raises(ValidationError):
        LossWeights(lambda0=-1.0)


@pytest.mark.parametrize("preset,epoch,expected", [
    ("main_text", 1, 1.0), ("main_text", 19, 1.0), ("main_text", 20, 5.0), ("main_text", 29, 5.0),
    ("main_text", 30, 20.0), ("main_text", 38, 50.0), ("main_text", 40, 50.0),
    ("supplement", 15, 1.0), ("supplement", 16, 5.0), ("supplement", 26, 10.0), ("supplement", 36, 20.0),
])
def test_lambda_schedules(preset, epoch, expected):
    assert lambda_schedule(preset, epoch) == expected
    assert loss_weights_for(preset, epoch).lambda0 == expected


def test_lambda_schedule_bounds():
    with pytest.raises(ValueError):
        lambda_schedule("main_text", 0)
    with pytest.raises(ValueError):
        lambda_schedule("main_text", 41)
    with pytest.raises(ValueError):
        lambda_schedule("cosine", 1)
