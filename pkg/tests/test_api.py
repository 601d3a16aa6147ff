import pytest
from fastapi.testclient import TestClient

from app.api.deps import get_settings
from app.core.config import Settings
from app.main import app

IDENTITY = {"R": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "T": [0.0, 0.0, 1.0]}
QUARTER_TURN = {"R": [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], "T": [0.0, 0.0, 1.0]}


@pytest.fixture
def client():
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()


def test_root(client):
    assert client.get("/").status_code == 200


def test_pose_error_on_symmetric_square(client):
    response = client.post("/api/v1/metrics/pose-error", json={"mesh": "square", "pred": QUARTER_TURN, "gt": IDENTITY})
    assert response.status_code == 200
    body = response.json()
    assert body["add"] == pytest.approx(2.0)
    assert body["adds"] == pytest.approx(0.0, abs=1e-12)
    assert body["add_s"] == body["adds"]


def test_pose_error_respects_symmetric_override(client):
    payload = {"mesh": "square", "symmetric": False, "pred": QUARTER_TURN, "gt": IDENTITY}
    body = client.post("/api/v1/metrics/pose-error", json=payload).json()
    assert body["symmetric"] is False
    assert body["add_s"] == pytest.approx(2.0)


def test_pose_error_errors(client):
    unknown = client.post("/api/v1/metrics/pose-error", json={"mesh": "teapot", "pred": IDENTITY, "gt": IDENTITY})
    assert unknown.status_code == 404
    skewed = dict(IDENTITY, R=[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0])
    assert client.post("/api/v1/metrics/pose-error", json={"pred": skewed, "gt": IDENTITY}).status_code == 400
    short = dict(IDENTITY, T=[0.0, 1.0])
    assert client.post("/api/v1/metrics/pose-error", json={"pred": short, "gt": IDENTITY}).status_code == 422


def test_auc_and_acc(client):
    body = client.post("/api/v1/metrics/auc", json={"errors": [0.05]}).json()
    assert body["value"] == pytest.approx(50.0)
    assert client.post("/api/v1/metrics/auc", json={"errors": []}).status_code == 400
    body = client.post("/api/v1/metrics/acc", json={"errors": [0.01, 0.2], "diameters": [1.0, 1.0]}).json()
    assert body["value"] == 50.0
    mismatch = client.post("/api/v1/metrics/acc", json={"errors": [0.01], "diameters": [1.0, 1.0]})
    assert mismatch.status_code == 422


def test_settings_drive_default_thresholds(client):
    app.dependency_overrides[get_settings] = lambda: Settings(AUC_TAU_MAX=0.2)
    body = client.post("/api/v1/metrics/auc", json={"errors": [0.05]}).json()
    assert body["value"] == pytest.approx(75.0)


def test_miou(client):
    pairs = [{"pred": [[True, True, False]], "gt": [[False, True, True]]}]
    body = client.post("/api/v1/metrics/miou", json={"pairs": pairs}).json()
    assert body["value"] == pytest.approx(1.0 / 3.0)


def test_experiment_size_guard(client):
    app.dependency_overrides[get_settings] = lambda: Settings(API_MAX_SCENES=5)
    response = client.post("/api/v1/experiments/ablation", json={"scene_count": 6})
    assert response.status_code == 422


def test_experiment_config_diagnostics(client):
    response = client.post("/api/v1/experiments/noise-stats",
                           json={"scene_count": 2, "noise": {"hole_rate": 0.1, "bogus": 1}})
    assert response.status_code == 422


def test_noise_stats_endpoint(client):
    response = client.post("/api/v1/experiments/noise-stats",
                           json={"seed": 1, "scene_count": 2, "noise": {"gaussian_sigma": 0.002}})
    assert response.status_code == 200
    body = response.json()
    assert body["scene_count"] == 2
    assert len(body["histogram"]) == 50
