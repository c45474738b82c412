import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from partfont.server import create_app
from partfont.util import png_bytes


def _png(arr: np.ndarray) -> bytes:
    return png_bytes(arr)


def _glyph_png(record, ch="A") -> bytes:
    return _png(record.glyphs[ch].pixels)


@pytest.fixture(scope="module")
def client(tiny_checkpoint):
    app = create_app(checkpoint_path=tiny_checkpoint)
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def bare_client():
    app = create_app(checkpoint_path=None)
    with TestClient(app) as c:
        yield c


@pytest.fixture()
def session(client):
    return client.post("/sessions").json()["session_id"]


def _upload(client, sid, data, name="ref.png"):
    return client.post(f"/sessions/{sid}/images", files={"file": (name, data, "image/png")})


def _wait_job(client, job_id, timeout=120.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        status = client.get(f"/jobs/{job_id}").json()
        if status["status"] in ("done", "error"):
            return status
        time.sleep(0.2)
    raise TimeoutError("job did not finish")


class TestSessionsAndImages:
    def test_healthz(self, client):
        body = client.get("/healthz").json()
        assert body["status"] == "ok"
        assert body["checkpoint"].startswith("ckpt-")

    def test_create_session(self, client):
        r = client.post("/sessions")
        assert r.status_code == 201
        assert r.json()["part_size"] == 32

    def test_upload_valid(self, client, session, dejavu_64):
        r = _upload(client, session, _glyph_png(dejavu_64))
        assert r.status_code == 201
        body = r.json()
        assert body["width"] == 64 and body["height"] == 64
        png = client.get(f"/sessions/{session}/images/{body['image_id']}.png")
        assert png.status_code == 200

    def test_upload_decodes_rgb_and_inverts(self, client, session):
        # black-on-white RGB upload ends up ink=1 internally
        arr = np.full((64, 64, 3), 255, dtype=np.uint8)
        arr[20:40, 20:40] = 0
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PNG")
        r = _upload(client, session, buf.getvalue())
        assert r.status_code == 201

    def test_upload_garbage_400(self, client, session):
        assert _upload(client, session, b"not a png at all").status_code == 400

    def test_upload_too_small_400(self, client, session):
        assert _upload(client, session, _png(np.ones((16, 16), np.float32))).status_code == 400

    def test_upload_too_large_413(self, client, session):
        r = _upload(client, session, b"x" * (9 * 1024 * 1024))
        assert r.status_code == 413

    def test_unknown_session_404(self, client, dejavu_64):
        assert _upload(client, "nope", _glyph_png(dejavu_64)).status_code == 404


class TestParts:
    def test_crop_at_stroke(self, client, session, dejavu_64):
        image_id = _upload(client, session, _glyph_png(dejavu_64)).json()["image_id"]
        pix = dejavu_64.glyphs["A"].pixels
        ys, xs = np.where(pix > 0.5)
        x, y = int(xs[len(xs) // 2]), int(ys[len(ys) // 2])
        r = client.post(
            f"/sessions/{session}/parts",
            json={"image_id": image_id, "x": x, "y": y, "size": 32},
        )
        assert r.status_code == 201
        part_id = r.json()["part_id"]
        thumb = client.get(f"/sessions/{session}/parts/{part_id}/thumbnail.png")
        assert thumb.status_code == 200
        state = client.get(f"/sessions/{session}").json()
        assert [p["part_id"] for p in state["parts"]] == [part_id]

    def test_blank_crop_422(self, client, session, dejavu_64):
        image_id = _upload(client, session, _glyph_png(dejavu_64)).json()["image_id"]
        r = client.post(
            f"/sessions/{session}/parts",
            json={"image_id": image_id, "x": 1, "y": 1, "size": 32},
        )
        assert r.status_code == 422
        assert "blank" in r.json()["detail"]

    def test_crop_unknown_image_404(self, client, session):
        r = client.post(
            f"/sessions/{session}/parts", json={"image_id": "missing", "x": 5, "y": 5, "size": 32}
        )
        assert r.status_code == 404

    def test_crop_wrong_size_422(self, client, session, dejavu_64):
        image_id = _upload(client, session, _glyph_png(dejavu_64)).json()["image_id"]
        r = client.post(
            f"/sessions/{session}/parts", json={"image_id": image_id, "x": 32, "y": 32, "size": 64}
        )
        assert r.status_code == 422

    def test_auto_extract_capped_at_k(self, client, session, dejavu_64):
        image_id = _upload(client, session, _glyph_png(dejavu_64, "B")).json()["image_id"]
        r = client.post(f"/sessions/{session}/parts/auto", json={"image_ids": [image_id], "k": 5})
        assert r.status_code == 201
        assert 1 <= len(r.json()["part_ids"]) <= 5

    def test_delete_part(self, client, session, dejavu_64):
        image_id = _upload(client, session, _glyph_png(dejavu_64, "C")).json()["image_id"]
        pid = client.post(
            f"/sessions/{session}/parts/auto", json={"image_ids": [image_id], "k": 1}
        ).json()["part_ids"][0]
        assert client.delete(f"/sessions/{session}/parts/{pid}").status_code == 204
        assert client.get(f"/sessions/{session}").json()["parts"] == []


class TestGenerate:
    def _tray(self, client, session, dejavu_64, k=3):
        image_id = _upload(client, session, _glyph_png(dejavu_64, "R")).json()["image_id"]
        r = client.post(f"/sessions/{session}/parts/auto", json={"image_ids": [image_id], "k": k})
        return r.json()["part_ids"]

    def test_no_checkpoint_409(self, bare_client, dejavu_64):
        sid = bare_client.post("/sessions").json()["session_id"]
        image_id = _upload(bare_client, sid, _glyph_png(dejavu_64)).json()["image_id"]
        pids = bare_client.post(
            f"/sessions/{sid}/parts/auto", json={"image_ids": [image_id], "k": 2}
        ).json()["part_ids"]
        r = bare_client.post(
            f"/sessions/{sid}/generate", json={"part_ids": pids, "chars": "AB", "seed": 1}
        )
        assert r.status_code == 409

    def test_empty_part_ids_422(self, client, session):
        r = client.post(f"/sessions/{session}/generate", json={"part_ids": [], "chars": "A"})
        assert r.status_code == 422

    def test_bad_chars_422(self, client, session, dejavu_64):
        pids = self._tray(client, session, dejavu_64)
        r = client.post(f"/sessions/{session}/generate", json={"part_ids": pids, "chars": "a1"})
        assert r.status_code == 422

    def test_round_trip_and_cache(self, client, session, dejavu_64):
        pids = self._tray(client, session, dejavu_64)
        req = {"part_ids": pids, "chars": "ABC", "steps": 4, "seed": 7}
        r1 = client.post(f"/sessions/{session}/generate", json=req)
        assert r1.status_code == 202
        job1 = r1.json()["job_id"]
        status = _wait_job(client, job1)
        assert status["status"] == "done", status
        assert sorted(status["chars"]) == ["A", "B", "C"]
        png_a = client.get(status["chars"]["A"]).content
        grid = client.get(status["grid"]).content
        assert png_a[:8] == b"\x89PNG\r\n\x1a\n" and grid[:8] == b"\x89PNG\r\n\x1a\n"

        # identical request hits the cache: same job, same bytes
        r2 = client.post(f"/sessions/{session}/generate", json=req)
        assert r2.json()["cached"] is True and r2.json()["job_id"] == job1
        assert client.get(status["chars"]["A"]).content == png_a

    def test_part_order_invariance(self, client, session, dejavu_64):
        pids = self._tray(client, session, dejavu_64, k=4)
        req1 = {"part_ids": pids, "chars": "AB", "steps": 4, "seed": 3}
        req2 = {"part_ids": pids[::-1], "chars": "AB", "steps": 4, "seed": 3}
        j1 = client.post(f"/sessions/{session}/generate", json=req1).json()["job_id"]
        s1 = _wait_job(client, j1)
        j2 = client.post(f"/sessions/{session}/generate", json=req2).json()["job_id"]
        s2 = _wait_job(client, j2)
        g1 = client.get(s1["grid"]).content
        g2 = client.get(s2["grid"]).content
        assert g1 == g2

    def test_unknown_part_404(self, client, session):
        r = client.post(f"/sessions/{session}/generate", json={"part_ids": ["ghost"], "chars": "A"})
        assert r.status_code == 404

    def test_steps_above_T_422(self, client, session, dejavu_64):
        pids = self._tray(client, session, dejavu_64)
        r = client.post(
            f"/sessions/{session}/generate",
            json={"part_ids": pids, "chars": "A", "steps": 5000},
        )
        assert r.status_code == 422

    def test_isolation_between_sessions(self, client, dejavu_64):
        s1 = client.post("/sessions").json()["session_id"]
        s2 = client.post("/sessions").json()["session_id"]
        image_id = _upload(client, s1, _glyph_png(dejavu_64)).json()["image_id"]
        # the other session cannot see or crop this image
        assert client.get(f"/sessions/{s2}").json()["images"] == []
        r = client.post(
            f"/sessions/{s2}/parts", json={"image_id": image_id, "x": 32, "y": 32, "size": 32}
        )
        assert r.status_code == 404
