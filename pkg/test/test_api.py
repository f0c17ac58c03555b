import numpy as np
import pytest
from fastapi.testclient import TestClient

from salvit.checkpoint import save_checkpoint
from salvit.fskd import KeypointDetector
from server.api import app


def image(rng, h=32, w=32):
    sal = np.zeros((h, w))
    sal[h // 4: 3 * h // 4, w // 4: 3 * w // 4] = 1.0
    return {"rgb": rng.uniform(size=(3, h, w)).tolist(), "saliency": sal.tolist()}


@pytest.fixture
def client(tmp_path, monkeypatch, model_cfg):
    model = KeypointDetector(model_cfg(), seed=0)
    path = save_checkpoint(tmp_path / "m.ckpt", model.params, {"model": model.cfg.model_dump(mode="json")})
    monkeypatch.setenv("SALVIT_CHECKPOINT", str(path))
    with TestClient(app) as c:
        yield c


def request(rng, queries=2, **extra):
    support = {**image(rng), "points": [[10.0, 12.0], [20.0, 18.0], [16.0, 16.0]]}
    return {"supports": [support], "queries": [image(rng, 24, 32) for _ in range(queries)], **extra}


def test_health(client):
    assert client.get("/health").json() == {"ok": True, "model": True}


@pytest.mark.parametrize("preprocess", [True, False])
def test_detect_returns_one_point_per_type(client, rng, preprocess):
    res = client.post("/detect", json=request(rng, type_ids=[4, 9, 13], preprocess_saliency=preprocess))
    assert res.status_code == 200
    preds = res.json()["predictions"]
    assert len(preds) == 2
    for row in preds:
        assert [p["type_id"] for p in row] == [4, 9, 13]
        for p in row:
            assert 0.0 <= p["x"] <= 32.0 and 0.0 <= p["y"] <= 32.0
            assert np.asarray(p["sigma"]).shape == (2, 2)


def test_invisible_support_point_drops_its_type(client, rng):
    body = request(rng, queries=1)
    body["supports"][0]["visible"] = [True, False, True]
    row = client.post("/detect", json=body).json()["predictions"][0]
    assert [p["type_id"] for p in row] == [0, 2]


def test_bad_shapes_are_rejected(client, rng):
    body = request(rng, type_ids=[1, 2])
    assert client.post("/detect", json=body).status_code == 400
    body = request(rng)
    body["queries"][0]["saliency"] = np.zeros((5, 5)).tolist()
    assert client.post("/detect", json=body).status_code == 400
    assert client.post("/detect", json={"supports": [], "queries": []}).status_code == 422


def test_detect_without_checkpoint(monkeypatch, rng):
    monkeypatch.delenv("SALVIT_CHECKPOINT", raising=False)
    with TestClient(app) as c:
        assert c.get("/health").json()["model"] is False
        assert c.post("/detect", json=request(rng)).status_code == 503
