"""Review API: endpoints, validation, the aggregation job, journal replay.

One real aggregation job runs against a private copy of the small
dataset (module scope); the decision flow is exercised as a single
ordered walk so the mutable cluster state never leaks between tests.
"""

from __future__ import annotations

import dataclasses
import json
import shutil
import time

import pytest
from fastapi.testclient import TestClient

from semkp.core import MAX_KEYPOINTS_PER_ANNOTATOR
from semkp.server import create_app


@pytest.fixture(scope="module")
def served_dir(tmp_path_factory, small_dataset):
    dst = tmp_path_factory.mktemp("served") / "data"
    shutil.copytree(small_dataset, dst)
    return dst


@pytest.fixture(scope="module")
def served_config(small_config):
    # The annotation tests below leave junk keypoints behind on purpose,
    # which compresses the layout; the review walk wants the true
    # clusters back out of that state, so the scale is pinned here.
    return dataclasses.replace(small_config, cluster_eps=55.0)


@pytest.fixture(scope="module")
def client(served_dir, served_config):
    app = create_app(str(served_dir), served_config)
    with TestClient(app) as c:
        yield c


def _wait_for_job(client, job_id, timeout=300.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        record = client.get(f"/jobs/{job_id}").json()
        if record["status"] in ("done", "failed"):
            return record
        time.sleep(0.2)
    raise AssertionError(f"job {job_id} did not finish within {timeout}s")


@pytest.fixture(scope="module")
def aggregated(client):
    """Run the one real aggregation job and return its final record."""
    job = client.post("/jobs/aggregate").json()
    assert job["status"] == "queued"
    record = _wait_for_job(client, job["id"])
    assert record["status"] == "done", record.get("error")
    return record


class TestModelEndpoints:
    def test_list_models(self, client):
        models = client.get("/models").json()
        assert len(models) == 4
        assert {m["id"] for m in models} == {f"table-{7000 + i:04d}" for i in range(4)}
        assert all(m["split"] in ("train", "val", "test") for m in models)

    def test_get_cloud(self, client):
        obj = client.get("/models/table-7000/cloud").json()
        assert obj["id"] == "table-7000"
        assert obj["n"] == 2048

    def test_unknown_model_404(self, client):
        assert client.get("/models/nope/cloud").status_code == 404
        assert client.get("/models/nope/annotations").status_code == 404
        assert client.post("/models/nope/annotations",
                           json={"annotator": "x", "keypoints": []}).status_code == 404

    def test_base_annotations_served(self, client, small_config):
        obj = client.get("/models/table-7001/annotations").json()
        assert obj["model_id"] == "table-7001"
        assert len(obj["annotators"]) == small_config.n_annotators


class TestAnnotationWrites:
    def test_post_overrides_one_annotator(self, client):
        before = client.get("/models/table-7002/annotations").json()
        name = before["annotators"][0]["annotator"]
        new = [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]
        resp = client.post(f"/models/table-7002/annotations",
                           json={"annotator": name, "keypoints": new})
        assert resp.status_code == 200
        assert resp.json() == {"model_id": "table-7002", "annotator": name, "n": 2}
        after = client.get("/models/table-7002/annotations").json()
        merged = {a["annotator"]: a["keypoints"] for a in after["annotators"]}
        assert merged[name] == new
        assert len(after["annotators"]) == len(before["annotators"])

    def test_new_annotator_appends(self, client):
        before = client.get("/models/table-7003/annotations").json()
        resp = client.post("/models/table-7003/annotations",
                           json={"annotator": "reviewer-1",
                                 "keypoints": [[0.0, 0.0, 0.0]]})
        assert resp.status_code == 200
        after = client.get("/models/table-7003/annotations").json()
        assert len(after["annotators"]) == len(before["annotators"]) + 1

    def test_limit_right_at_the_edge(self, client):
        kp = [[0.0, 0.0, 0.0]] * MAX_KEYPOINTS_PER_ANNOTATOR
        resp = client.post("/models/table-7000/annotations",
                           json={"annotator": "edge", "keypoints": kp})
        assert resp.status_code == 200

    def test_limit_exceeded_is_422(self, client):
        kp = [[0.0, 0.0, 0.0]] * (MAX_KEYPOINTS_PER_ANNOTATOR + 1)
        resp = client.post("/models/table-7000/annotations",
                           json={"annotator": "greedy", "keypoints": kp})
        assert resp.status_code == 422
        assert str(MAX_KEYPOINTS_PER_ANNOTATOR) in resp.json()["detail"]

    @pytest.mark.parametrize("payload", [
        {"keypoints": []},
        {"annotator": "", "keypoints": []},
        {"annotator": "a", "keypoints": "nope"},
        {"annotator": "a", "keypoints": [[1.0, 2.0]]},
        {"annotator": "a", "keypoints": [[1.0, 2.0, "x"]]},
        {"annotator": "a", "keypoints": [[1.0, 2.0, float("nan")]]},
    ])
    def test_malformed_bodies_are_400(self, client, payload):
        # json.dumps(nan) produces invalid strict JSON, so build text by hand
        body = json.dumps(payload).replace("NaN", "NaN")
        resp = client.post("/models/table-7000/annotations",
                           content=body, headers={"content-type": "application/json"})
        assert resp.status_code == 400

    def test_empty_list_clears_an_annotator(self, client):
        client.post("/models/table-7001/annotations",
                    json={"annotator": "temp", "keypoints": [[1.0, 1.0, 1.0]]})
        client.post("/models/table-7001/annotations",
                    json={"annotator": "temp", "keypoints": []})
        obj = client.get("/models/table-7001/annotations").json()
        merged = {a["annotator"]: a["keypoints"] for a in obj["annotators"]}
        assert merged["temp"] == []


class TestClustersBeforeAggregation:
    def test_empty_and_404(self, client):
        assert client.get("/clusters").json() == []
        assert client.get("/clusters/0").status_code == 404
        resp = client.post("/clusters/0/decision", json={"action": "accept"})
        assert resp.status_code == 404


class TestAggregationAndReview:
    def test_job_record(self, aggregated):
        assert set(aggregated["summary"]) == {"clusters", "noise", "candidates"}
        assert aggregated["summary"]["clusters"] >= 4

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/job-9999").status_code == 404

    def test_cluster_detail_members(self, client, aggregated):
        clusters = client.get("/clusters").json()
        cid = clusters[0]["id"]
        detail = client.get(f"/clusters/{cid}").json()
        assert detail["id"] == cid
        assert detail["state"] == "pending"
        assert len(detail["members"]) == clusters[0]["size"]
        assert all(m["label"] == cid for m in detail["members"])

    def test_decision_walk(self, client, aggregated):
        ids = [c["id"] for c in client.get("/clusters").json()]
        assert len(ids) >= 4, "review walk needs at least four clusters"
        c_accept, c_reject, c_src, c_dst = ids[:4]

        r = client.post(f"/clusters/{c_accept}/decision", json={"action": "accept"})
        assert r.status_code == 200
        assert client.get(f"/clusters/{c_accept}").json()["state"] == "accepted"

        client.post(f"/clusters/{c_reject}/decision", json={"action": "reject"})
        live = client.get("/clusters").json()
        assert c_reject not in [c["id"] for c in live]

        sizes = {c["id"]: c["size"] for c in live}
        r = client.post(f"/clusters/{c_src}/decision",
                        json={"action": "merge", "target": c_dst})
        assert r.status_code == 200
        live = {c["id"]: c for c in client.get("/clusters").json()}
        assert c_src not in live
        assert live[c_dst]["size"] == sizes[c_src] + sizes[c_dst]
        assert live[c_dst]["merged_from"] == [c_src]

        # conflicting or malformed decisions
        bad = [
            ({"action": "merge"}, 400),                       # no target
            ({"action": "merge", "target": c_dst}, 400),      # self merge
            ({"action": "promote"}, 400),                     # unknown action
            ({"action": "merge", "target": c_reject}, 409),   # into rejected
            ({"action": "merge", "target": 10 ** 6}, 400),    # unknown target
        ]
        for payload, code in bad:
            cluster = c_dst if payload.get("target") == c_dst else ids[-1]
            resp = client.post(f"/clusters/{cluster}/decision", json=payload)
            assert resp.status_code == code, (payload, resp.json())

    def test_journal_replays_to_identical_state(self, client, served_dir,
                                                served_config, aggregated):
        """A fresh server over the same directory sees the same world."""
        replay = create_app(str(served_dir), served_config)
        with TestClient(replay) as fresh:
            assert fresh.get("/clusters").json() == client.get("/clusters").json()
            for mid in ("table-7001", "table-7002", "table-7003"):
                assert (fresh.get(f"/models/{mid}/annotations").json()
                        == client.get(f"/models/{mid}/annotations").json())
            live_states = {c["id"]: c["state"] for c in fresh.get("/clusters").json()}
            assert "accepted" in live_states.values()

    def test_journal_is_append_only_jsonl(self, served_dir, aggregated):
        lines = (served_dir / "journal.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        ops = {r["op"] for r in records}
        assert {"annotate", "aggregate", "decision"} <= ops


def test_failed_job_reports_error(tmp_path, small_dataset, small_config):
    """Aggregation over a broken dataset fails the job, not the server."""
    dst = tmp_path / "solo"
    shutil.copytree(small_dataset, dst)
    manifest = json.loads((dst / "manifest.json").read_text())
    manifest["models"] = manifest["models"][:1]
    (dst / "manifest.json").write_text(json.dumps(manifest))
    with TestClient(create_app(str(dst), small_config)) as c:
        job = c.post("/jobs/aggregate").json()
        record = _wait_for_job(c, job["id"], timeout=60.0)
        assert record["status"] == "failed"
        assert record["error"]
