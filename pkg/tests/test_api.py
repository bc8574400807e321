from types import SimpleNamespace

import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.routers import runs, scenarios
from app.services import formats, sim
from app.services.geometry import Pose

client = TestClient(app)


def tum_text(offset=0.0) -> str:
    poses = [(t, Pose(translation=(t, offset * (t == 1.0), 0.0))) for t in (0.0, 1.0, 2.0)]
    return "".join(formats.format_tum_line(t, p) + "\n" for t, p in poses)


@pytest.fixture
def queued(monkeypatch):
    calls = []

    def delay(*args):
        calls.append(args)
        return SimpleNamespace(id="task-1")

    monkeypatch.setattr(runs, "run_pipeline_task", SimpleNamespace(delay=delay))
    monkeypatch.setattr(scenarios, "export_scenario_task", SimpleNamespace(delay=delay))
    return calls


def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert "Welcome" in response.json()["message"]


def test_list_scenarios():
    response = client.get("/api/v1/scenarios/")
    assert response.status_code == 200
    names = {item["name"] for item in response.json()}
    assert names == set(sim.builtin_scenarios())


def test_read_scenario_and_script():
    summary = client.get("/api/v1/scenarios/conveyor_up").json()
    assert summary["moving_bodies"] == ["box"]
    script = client.get("/api/v1/scenarios/conveyor_up/script").json()
    assert script["name"] == "conveyor_up"


def test_unknown_scenario_is_404():
    response = client.get("/api/v1/scenarios/nope")
    assert response.status_code == 404
    assert "conveyor_up" in response.json()["detail"]


def test_export_is_queued(queued):
    response = client.post("/api/v1/scenarios/rotation/export", json={"out_dir": "/tmp/rotation", "seed": 2})
    assert response.status_code == 202
    assert response.json() == {"task_id": "task-1"}
    assert queued == [("rotation", "/tmp/rotation", 2)]


def test_run_is_queued_with_a_default_output_dir(queued):
    response = client.post("/api/v1/runs/", json={"scenario": "conveyor_up", "seed": 3})
    assert response.status_code == 202
    (payload,) = queued[0]
    assert payload["scenario"] == "conveyor_up"
    assert payload["output_dir"].endswith("conveyor_up-seed3")


def test_run_needs_exactly_one_source(queued):
    assert client.post("/api/v1/runs/", json={"scenario": "rotation", "dataset": "/data"}).status_code == 422
    assert client.post("/api/v1/runs/", json={}).status_code == 422
    assert queued == []


def test_run_with_unknown_scenario_is_404(queued):
    assert client.post("/api/v1/runs/", json={"scenario": "nope"}).status_code == 404
    assert queued == []


def test_ate_endpoint():
    response = client.post("/api/v1/metrics/ate", json={"estimated": tum_text(), "truth": tum_text()})
    assert response.status_code == 200
    body = response.json()
    assert body["metric"] == "ate_rmse_m"
    assert body["value"] == pytest.approx(0.0, abs=1e-9)


def test_ate_endpoint_reports_the_displacement():
    response = client.post("/api/v1/metrics/ate", json={"estimated": tum_text(0.3), "truth": tum_text()})
    expected = ((0.1**2 + 0.2**2 + 0.1**2) / 3.0) ** 0.5
    assert response.json()["value"] == pytest.approx(expected, abs=1e-6)


def test_rpe_endpoint():
    response = client.post("/api/v1/metrics/rpe", json={"estimated": tum_text(), "truth": tum_text(), "delta": 1.0})
    assert [row["metric"] for row in response.json()] == ["rpe_trans_m_per_s", "rpe_rot_deg_per_s"]


def test_malformed_trajectory_is_400():
    response = client.post("/api/v1/metrics/ate", json={"estimated": "0.0 1 2\n", "truth": tum_text()})
    assert response.status_code == 400
    assert response.json()["detail"].startswith("MalformedFile")


def test_recon_endpoint():
    ply = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n"
    response = client.post("/api/v1/metrics/recon", json={"estimated": ply, "truth": ply})
    assert response.status_code == 200
    assert response.json()["value"] == pytest.approx(0.0)
