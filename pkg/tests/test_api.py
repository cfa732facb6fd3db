from __future__ import annotations

from pathlib import Path
from typing import Any

from fastapi.testclient import TestClient

from zdalab.main import app, cache
from zdalab.settings import get_settings

HEADERS = {"X-API-Key": "test-key"}


def _client(monkeypatch, tmp_path: Path) -> TestClient:
    monkeypatch.setenv("API_KEY", "test-key")
    monkeypatch.setenv("ZDALAB_OUTPUT_DIR", str(tmp_path))
    monkeypatch.setenv("CACHE_TTL_SECONDS", "60")
    get_settings.cache_clear()
    cache.clear()
    return TestClient(app)


def _p3(**overrides: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "name": "p3_api",
        "n": 3,
        "horizon": 5.0,
        "dt": 0.01,
        "topologies": [{"id": 1, "edges": [[1, 2, 1.0], [2, 3, 1.0]]}],
        "schedule": [{"topology": 1, "dwell": 5.0}],
        "outputs": {"monitored": [2]},
        "initial": {"x": [0.0, 1.0, 3.0], "v": [0.0, 0.0, 0.0]},
        "attack": {
            "zda": {
                "misbehaving": [1, 3],
                "synthesize": False,
                "eta": 1.0,
                "z0": [1.0, 0.0, -1.0, 1.0, 0.0, -1.0],
                "g": [3.0, 0.0, -3.0],
            }
        },
    }
    data.update(overrides)
    return data


def test_health_requires_key(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.get("/health")
    assert response.status_code == 401
    assert response.json()["error"]["code"] == "missing_api_key"

    response = client.get("/health", headers={"X-API-Key": "wrong"})
    assert response.status_code == 403
    assert response.json()["error"]["code"] == "invalid_api_key"


def test_health_ok(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.get("/health", headers=HEADERS)
    assert response.status_code == 200
    payload = response.json()
    assert payload["status"] == "ok"
    assert payload["version"]
    assert payload["output_dir"] == str(tmp_path)


def test_open_service_without_api_key(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    monkeypatch.delenv("API_KEY")
    get_settings.cache_clear()
    assert client.get("/health").status_code == 200


def test_defense_is_cached(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    first = client.post("/defense", json=_p3(), headers=HEADERS)
    assert first.status_code == 200
    assert first.json()["verdict"] == {"intermittent": "fail", "cooperative": "pass"}
    assert len(cache) == 1

    second = client.post("/defense", json=_p3(), headers=HEADERS)
    assert second.json() == first.json()
    assert len(cache) == 1


def test_invalid_body(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.post("/defense", json=_p3(outputs={"monitored": [7]}), headers=HEADERS)
    assert response.status_code == 400
    assert response.json()["error"]["code"] == "invalid_request"

    response = client.post("/synthesize?topology=1&policy=bogus", json=_p3(), headers=HEADERS)
    assert response.status_code == 400


def test_synthesize(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.post("/synthesize?topology=1", json=_p3(), headers=HEADERS)
    assert response.status_code == 200
    payload = response.json()
    assert payload["topology"] == 1
    assert payload["candidates"]

    response = client.post("/synthesize?topology=9", json=_p3(), headers=HEADERS)
    assert response.status_code == 400
    assert response.json()["error"]["code"] == "invalid_config"


def test_certify(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.post("/certify", json=_p3(), headers=HEADERS)
    assert response.status_code == 200
    assert response.json()["observer"]["kind"] == "observer"


def test_run_writes_artifacts(monkeypatch, tmp_path: Path) -> None:
    client = _client(monkeypatch, tmp_path)
    response = client.post("/run", json=_p3(), headers=HEADERS)
    assert response.status_code == 200
    payload = response.json()
    assert payload["detection"] == "clean"
    assert payload["output_dir"] == str(tmp_path / "p3_api")
    assert Path(payload["trajectory_csv"]).is_file()
    assert payload["summary"]["max_residual"] < 1e-6
