"""Service contract: catalog, composition, replayable generation, jobs."""

import io
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from partstudio import world
from partstudio.service import create_app


@pytest.fixture(scope="module")
def client(micro_corpus, micro_stage2, tmp_path_factory):
    app = create_app(
        micro_stage2,
        micro_corpus.root,
        artifact_root=tmp_path_factory.mktemp("artifacts"),
    )
    with TestClient(app) as c:
        yield c


def all_seen(sid, m=5):
    return [{"kind": "species", "species_id": sid}] * m


def wait_for(client, job_id, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        job = client.get(f"/api/jobs/{job_id}").json()
        if job["state"] in ("done", "failed"):
            return job
        time.sleep(0.1)
    raise TimeoutError(f"job {job_id} did not finish")


def test_health(client):
    out = client.get("/api/health").json()
    assert out["status"] == "ok"
    assert out["species_count"] == 3
    assert out["part_count"] == 5


def test_species_catalog_entries(client):
    out = client.get("/api/species").json()
    assert len(out["species"]) == 3
    names = {e["name"] for e in out["species"]}
    assert len(names) == 3
    for entry in out["species"]:
        assert len(entry["parts"]) == 5
        png = client.get(entry["thumbnail_url"])
        assert png.status_code == 200
        assert png.headers["content-type"] == "image/png"


def test_species_preview_renders(client, micro_corpus):
    r = client.get("/api/species/1/preview", params={"view": 2})
    img = np.asarray(Image.open(io.BytesIO(r.content)))
    assert img.shape == (micro_corpus.image_size, micro_corpus.image_size, 3)
    assert client.get("/api/species/9/preview").status_code == 404
    assert client.get("/api/species/1/preview", params={"view": 7}).status_code == 422


def test_compose_content_addressed(client):
    req = {"selections": all_seen(0), "seed": 4}
    a = client.post("/api/compose", json=req).json()
    b = client.post("/api/compose", json=req).json()
    assert a["tokens_ref"] == b["tokens_ref"]
    artifact = client.get(a["url"]).json()
    assert artifact["latents"] == a["latents"]
    assert len(a["latents"]) == 5


def test_compose_validation(client):
    r = client.post("/api/compose", json={"selections": all_seen(0)[:3]})
    assert r.status_code == 422
    r = client.post("/api/compose", json={"selections": all_seen(9)})
    assert r.status_code == 422
    bad_alpha = [{"kind": "interpolate", "species_a": 0, "species_b": 1,
                  "alpha": 1.5}] * 5
    r = client.post("/api/compose", json={"selections": bad_alpha})
    assert r.status_code == 422
    assert "alpha" in str(r.json()["detail"])


def test_sample_endpoint(client):
    req = {"parts": [0, 2], "seed": 9}
    a = client.post("/api/sample", json=req).json()
    b = client.post("/api/sample", json=req).json()
    assert a == b
    assert [row["part"] for row in a["latents"]] == [0, 2]
    assert all(len(row["values"]) == 4 for row in a["latents"])
    assert client.post("/api/sample", json={"parts": [7]}).status_code == 422


def test_interpolate_endpoint_exactness(client):
    r = client.post("/api/interpolate",
                    json={"species_a": 0, "species_b": 1, "alpha": 1.0}).json()
    seen = client.post("/api/compose",
                       json={"selections": all_seen(0)}).json()
    assert r["latents"] == seen["latents"]
    single = client.post(
        "/api/interpolate",
        json={"species_a": 0, "species_b": 1, "alpha": 0.5, "part": 3},
    ).json()
    assert single["part"] == 3 and len(single["values"]) == 4
    bad = client.post("/api/interpolate",
                      json={"species_a": 0, "species_b": 1, "alpha": 2.0})
    assert bad.status_code == 422


def test_generate_and_replay_provenance(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(1), "seed": 0}).json()
    req = {"tokens_ref": tokens["tokens_ref"], "cameras": [0, 1, 2, 3],
           "seed": 5, "steps": 4}
    first = client.post("/api/generate", json=req).json()
    assert [e["camera"] for e in first["images"]] == [0, 1, 2, 3]
    assert [e["view_name"] for e in first["images"]] == list(world.VIEW_NAMES)
    png = client.get(first["images"][0]["url"])
    assert png.headers["content-type"] == "image/png"

    # the provenance record itself is a valid generate request and
    # replays to the same content-addressed artifacts
    again = client.post("/api/generate", json=first["provenance"]).json()
    assert [e["ref"] for e in again["images"]] == [e["ref"] for e in first["images"]]


def test_generate_attention_refs(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(2)}).json()
    out = client.post("/api/generate", json={
        "tokens_ref": tokens["tokens_ref"], "cameras": [0, 2], "steps": 4,
        "attention": True,
    }).json()
    assert len(out["attention"]) == 2 * 5
    roles = {e["part_role"] for e in out["attention"]}
    assert roles == set(world.PART_ROLES)


def test_generate_validation(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(0)}).json()
    bad = client.post("/api/generate", json={
        "tokens_ref": tokens["tokens_ref"], "cameras": [5],
    })
    assert bad.status_code == 422
    missing = client.post("/api/generate", json={
        "tokens_ref": "0" * 64, "cameras": [0],
    })
    assert missing.status_code == 404


def test_concurrent_identical_generates_match(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(0), "seed": 2}).json()
    req = {"tokens_ref": tokens["tokens_ref"], "cameras": [1], "seed": 3,
           "steps": 4}
    with ThreadPoolExecutor(2) as pool:
        a, b = pool.map(
            lambda _: client.post("/api/generate", json=req).json(), range(2)
        )
    assert a["images"][0]["ref"] == b["images"][0]["ref"]


def test_lift3d_job_lifecycle(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(0)}).json()
    sub = client.post("/api/lift3d", json={
        "tokens_ref": tokens["tokens_ref"],
        "config": {"steps": 6, "seed": 1},
    }).json()
    assert sub["state"] == "queued"
    probe = client.get(f"/api/jobs/{sub['job_id']}").json()
    assert probe["state"] in ("queued", "running")
    job = wait_for(client, sub["job_id"])
    assert job["state"] == "done", job["error"]
    assert len(job["artifacts"]["turntable"]) == world.VIEW_COUNT
    field = client.get(f"/api/artifacts/{job['artifacts']['field']}")
    assert field.status_code == 200
    report = client.get(f"/api/artifacts/{job['artifacts']['report']}").json()
    assert report["field_ref"] == job["artifacts"]["field"]


def test_invert_job(client):
    tokens = client.post("/api/compose",
                         json={"selections": all_seen(1)}).json()
    gen = client.post("/api/generate", json={
        "tokens_ref": tokens["tokens_ref"], "cameras": [0], "steps": 4,
    }).json()
    sub = client.post("/api/invert", json={
        "image_refs": [gen["images"][0]["ref"]], "views": [0], "steps": 5,
    }).json()
    job = wait_for(client, sub["job_id"])
    assert job["state"] == "done", job["error"]
    report = client.get(f"/api/artifacts/{job['artifacts']['report']}").json()
    assert np.asarray(report["latents"]).shape == (5, 4)
    bad = client.post("/api/invert", json={"image_refs": ["x"], "views": [0, 1]})
    assert bad.status_code == 422


def test_unknown_job_and_artifact_404(client):
    assert client.get("/api/jobs/nope").status_code == 404
    assert client.get("/api/artifacts/" + "f" * 64).status_code == 404


def test_bad_checkpoint_refuses_to_start(micro_corpus, tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(RuntimeError, match="cannot serve"):
        create_app(bogus, micro_corpus.root)


def test_static_ui_mount(micro_corpus, micro_stage2, tmp_path):
    ui = tmp_path / "dist"
    ui.mkdir()
    (ui / "index.html").write_text("<html><body>studio</body></html>")
    app = create_app(micro_stage2, micro_corpus.root,
                     artifact_root=tmp_path / "store", ui_dir=ui)
    with TestClient(app) as c:
        r = c.get("/")
        assert r.status_code == 200
        assert "studio" in r.text
        assert c.get("/api/health").json()["status"] == "ok"
