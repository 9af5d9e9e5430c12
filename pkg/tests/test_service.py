import base64
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from b2s import scene
from b2s.service.app import create_app


@pytest.fixture(scope="module")
def client(trained_models):
    return TestClient(create_app(trained_models))


@pytest.fixture(scope="module")
def scene_payload(trained_models):
    sg = scene.sample_scene(10_010, trained_models.config.scene_config())
    return scene.scene_to_dict(sg)


def decode_png(b64: str) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(io.BytesIO(base64.b64decode(b64))))


def test_health(client):
    r = client.get("/v1/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert "base" in body["checkpoints"] and "control" in body["checkpoints"]
    assert "adapter:cam0" in body["checkpoints"]


def test_rig_endpoint(client):
    r = client.get("/v1/rig")
    assert r.status_code == 200
    cams = r.json()["cameras"]
    assert [c["name"] for c in cams] == [f"cam{i}" for i in range(6)]
    assert cams[0]["image_wh"] == [64, 32]


def test_validate_ok_and_violations(client, scene_payload):
    r = client.post("/v1/scene/validate", json=scene_payload)
    assert r.status_code == 200
    assert r.json()["valid"] is True

    bad = dict(scene_payload)
    bad["vehicles"] = scene_payload["vehicles"] + [
        {"center": [999.0, 0.0], "yaw": 0.0, "length": 4.0, "width": 2.0, "height": None}
    ]
    r = client.post("/v1/scene/validate", json=bad)
    assert r.status_code == 200
    body = r.json()
    assert body["valid"] is False
    assert any(v["code"] == "vehicle_out_of_bounds" for v in body["violations"])


def test_malformed_request_gives_400_with_field(client, scene_payload):
    bad = dict(scene_payload)
    bad.pop("extent_m")
    r = client.post("/v1/scene/validate", json=bad)
    assert r.status_code == 400
    body = r.json()
    assert body["code"] == "invalid_request"
    assert body["field"] == "extent_m"


def test_project_latency_and_statelessness(client, scene_payload):
    t0 = time.time()
    r1 = client.post("/v1/project", json={"scene": scene_payload})
    elapsed = time.time() - t0
    assert r1.status_code == 200
    assert elapsed < 1.0, f"projection took {elapsed:.2f}s"
    r2 = client.post("/v1/project", json={"scene": scene_payload})
    assert r1.content == r2.content  # byte-identical bodies
    views = r1.json()["views"]
    assert len(views) == 6
    v0 = views[0]
    assert v0["initial"]["resolution_tag"] == "initial_lowres"
    assert v0["refined"]["resolution_tag"] == "refined"
    assert (v0["refined"]["width"], v0["refined"]["height"]) == (64, 32)
    assert decode_png(v0["refined"]["png"]).shape == (32, 64, 3)


def test_generate_job_lifecycle(client, scene_payload):
    r = client.post("/v1/generate", json={"scene": scene_payload, "seed": 4})
    assert r.status_code == 200
    job_id = r.json()["job_id"]
    for _ in range(600):
        status = client.get(f"/v1/jobs/{job_id}").json()
        if status["status"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert status["status"] == "done", status.get("error")
    result = status["result"]
    assert len(result["views"]) == 6
    panel = decode_png(result["panel_png"])
    assert panel.shape == (32, 64 * 6, 3)
    assert all(v["adapter_id"] for v in result["views"])


def test_generate_failure_reaches_failed_state(client, scene_payload):
    bad = dict(scene_payload)
    r = client.post("/v1/generate", json={"scene": bad, "seed": 0, "weather": "hurricane"})
    job_id = r.json()["job_id"]
    for _ in range(600):
        status = client.get(f"/v1/jobs/{job_id}").json()
        if status["status"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert status["status"] == "failed"
    assert status["error"]


def test_unknown_job_404(client):
    r = client.get("/v1/jobs/doesnotexist")
    assert r.status_code == 404
    assert r.json()["code"] == "unknown_job"
