"""JSON-over-HTTP API behind the annotation and cluster-review UI.

The served dataset directory is treated as read-only ground: the
manifest, clouds, and any base annotation files stay untouched.  Every
mutation (posted annotations, cluster decisions, finished aggregation
jobs) is appended to journal.jsonl in that directory, and server state
is exactly (base files + journal replay), so a restart reproduces the
live state and the journal doubles as an audit trail.

Reads are lock-free; writes serialize per model id, and aggregation
runs on a single background worker so two jobs can never interleave.
"""

from __future__ import annotations

import json
import os
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .aggregate import aggregate_run
from .core import MAX_KEYPOINTS_PER_ANNOTATOR, RawAnnotationSet, stage_seed
from .errors import SemkpError
from .pipeline import PipelineConfig
from .storage import load_annotations, load_cloud, load_manifest


def _read_file_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


class ServerState:
    """Dataset view plus journal-backed mutable state."""

    def __init__(self, data_dir: str, cfg: PipelineConfig | None = None):
        self.data_dir = data_dir
        self.cfg = cfg if cfg is not None else PipelineConfig()
        self.manifest = load_manifest(os.path.join(data_dir, "manifest.json"))
        self.entries = {e.model_id: e for e in self.manifest.entries}

        # (model_id, annotator) -> list of [x, y, z]; replaces the base set
        self.overrides: dict = {}
        self.clusters: dict | None = None  # {"candidates": [...], "sizes": {...}}
        self.decisions: dict = {}          # cluster id -> {"action", "target"}
        self.jobs: dict = {}               # job id -> status record
        self._job_counter = 0

        self._state_lock = threading.Lock()
        self._journal_lock = threading.Lock()
        self._model_locks: dict = defaultdict(threading.Lock)
        self._executor = ThreadPoolExecutor(max_workers=1)

        self.journal_path = os.path.join(data_dir, "journal.jsonl")
        self._replay()

    # -- journal ----------------------------------------------------------

    def _append(self, record: dict) -> None:
        with self._journal_lock:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")

    def _replay(self) -> None:
        if not os.path.exists(self.journal_path):
            return
        with open(self.journal_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                op = rec.get("op")
                if op == "annotate":
                    self.overrides[(rec["model_id"], rec["annotator"])] = rec["keypoints"]
                elif op == "decision":
                    self.decisions[int(rec["cluster"])] = {
                        "action": rec["action"], "target": rec.get("target"),
                    }
                elif op == "aggregate":
                    self.clusters = {
                        "candidates": rec["candidates"],
                        "sizes": {int(k): int(v) for k, v in rec["sizes"].items()},
                    }
                    self.decisions = {}

    # -- annotations -------------------------------------------------------

    def model_annotations(self, model_id: str) -> dict:
        path = os.path.join(self.data_dir, "annotations", f"{model_id}.json")
        per_annotator: dict = {}
        if os.path.exists(path):
            base = _read_file_json(path)
            for rec in base.get("annotators", ()):
                per_annotator[rec["annotator"]] = rec["keypoints"]
        for (mid, annotator), kps in self.overrides.items():
            if mid == model_id:
                per_annotator[annotator] = kps
        return {
            "model_id": model_id,
            "annotators": [
                {"annotator": a, "keypoints": per_annotator[a]} for a in per_annotator
            ],
        }

    def put_annotation(self, model_id: str, annotator: str, keypoints: list) -> None:
        with self._model_locks[model_id]:
            self.overrides[(model_id, annotator)] = keypoints
            self._append({
                "op": "annotate", "model_id": model_id,
                "annotator": annotator, "keypoints": keypoints,
            })

    # -- clusters and decisions --------------------------------------------

    def cluster_states(self) -> dict:
        """cluster id -> pending | accepted | rejected | merged."""
        if self.clusters is None:
            return {}
        states = {cid: "pending" for cid in self.clusters["sizes"]}
        for cid, dec in self.decisions.items():
            if cid in states:
                states[cid] = {"accept": "accepted", "reject": "rejected",
                               "merge": "merged"}[dec["action"]]
        return states

    def effective_clusters(self) -> list:
        """Post-decision view: rejected and merged-away clusters vanish,
        merge targets absorb the member counts of their sources."""
        if self.clusters is None:
            return []
        states = self.cluster_states()
        sizes = dict(self.clusters["sizes"])
        merged_from = defaultdict(list)
        for cid, dec in self.decisions.items():
            if dec["action"] == "merge" and cid in sizes:
                merged_from[int(dec["target"])].append(cid)
        out = []
        for cid in sorted(sizes):
            if states[cid] in ("rejected", "merged"):
                continue
            size = sizes[cid] + sum(sizes[src] for src in merged_from[cid])
            out.append({
                "id": cid, "size": size, "state": states[cid],
                "merged_from": sorted(merged_from[cid]),
            })
        return out

    def decide(self, cluster_id: int, action: str, target) -> dict:
        with self._state_lock:
            states = self.cluster_states()
            if cluster_id not in states:
                raise HTTPException(404, f"no cluster {cluster_id}")
            if action == "merge":
                if target is None:
                    raise HTTPException(400, "merge needs an integer 'target'")
                target = int(target)
                if target == cluster_id:
                    raise HTTPException(400, "cannot merge a cluster into itself")
                if target not in states:
                    raise HTTPException(400, f"no merge target {target}")
                if states[target] in ("rejected", "merged"):
                    raise HTTPException(
                        409, f"merge target {target} is {states[target]}")
            else:
                target = None
            self.decisions[cluster_id] = {"action": action, "target": target}
            self._append({"op": "decision", "cluster": cluster_id,
                          "action": action, "target": target})
        return {"id": cluster_id, "action": action, "target": target}

    # -- aggregation jobs ----------------------------------------------------

    def submit_aggregate(self) -> dict:
        with self._state_lock:
            self._job_counter += 1
            job_id = f"job-{self._job_counter:04d}"
            self.jobs[job_id] = {"id": job_id, "status": "queued"}
            snapshot = dict(self.jobs[job_id])
        self._executor.submit(self._run_aggregate, job_id)
        return snapshot

    def _effective_annotation_sets(self, model_id: str):
        merged = self.model_annotations(model_id)
        return [
            RawAnnotationSet(model_id, rec["annotator"],
                             np.asarray(rec["keypoints"], dtype=np.float64))
            for rec in merged["annotators"] if rec["keypoints"]
        ]

    def _run_aggregate(self, job_id: str) -> None:
        with self._state_lock:
            self.jobs[job_id]["status"] = "running"
        try:
            ids = sorted(self.entries)
            clouds = [
                load_cloud(os.path.join(self.data_dir, self.entries[mid].path))
                for mid in ids
            ]
            annotations = {mid: self._effective_annotation_sets(mid) for mid in ids}
            acfg = self.cfg.aggregate_config(stage_seed(self.cfg.seed, "aggregate"))
            _, diagnostics = aggregate_run(clouds, annotations, acfg)
            last = max(int(k.split(":")[1]) for k in diagnostics if k.startswith("clustering:"))
            diag = diagnostics[f"clustering:{last}"]
            payload = {
                "candidates": diag["candidates"],
                "sizes": {int(k): int(v) for k, v in diag["sizes"].items()},
            }
            with self._state_lock:
                self.clusters = payload
                self.decisions = {}
                self.jobs[job_id].update(
                    status="done",
                    summary={"clusters": diag["clusters"], "noise": diag["noise"],
                             "candidates": diag["n_candidates"]},
                )
            self._append({"op": "aggregate", "job": job_id,
                          "candidates": payload["candidates"],
                          "sizes": {str(k): v for k, v in payload["sizes"].items()}})
        except (SemkpError, ValueError) as exc:
            with self._state_lock:
                self.jobs[job_id].update(status="failed", error=str(exc))


def _validate_annotation_body(payload) -> tuple:
    if not isinstance(payload, dict):
        raise HTTPException(400, "body must be a JSON object")
    annotator = payload.get("annotator")
    if not isinstance(annotator, str) or not annotator:
        raise HTTPException(400, "'annotator' must be a non-empty string")
    keypoints = payload.get("keypoints")
    if not isinstance(keypoints, list):
        raise HTTPException(400, "'keypoints' must be a list of [x, y, z]")
    if len(keypoints) > MAX_KEYPOINTS_PER_ANNOTATOR:
        raise HTTPException(
            422,
            f"{len(keypoints)} keypoints exceed the limit of "
            f"{MAX_KEYPOINTS_PER_ANNOTATOR} per annotator",
        )
    clean = []
    for row in keypoints:
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            raise HTTPException(400, "each keypoint must be [x, y, z]")
        try:
            vals = [float(v) for v in row]
        except (TypeError, ValueError):
            raise HTTPException(400, "keypoint coordinates must be numbers")
        if not all(np.isfinite(v) for v in vals):
            raise HTTPException(400, "keypoint coordinates must be finite")
        clean.append(vals)
    return annotator, clean


def create_app(data_dir: str, cfg: PipelineConfig | None = None) -> FastAPI:
    state = ServerState(data_dir, cfg)
    app = FastAPI(title="semkp review API")
    app.state.semkp = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def entry_or_404(model_id: str):
        if model_id not in state.entries:
            raise HTTPException(404, f"no model {model_id}")
        return state.entries[model_id]

    @app.get("/models")
    def list_models():
        return [
            {"id": e.model_id, "category": e.category, "split": e.split}
            for e in state.manifest.entries
        ]

    @app.get("/models/{model_id}/cloud")
    def get_cloud(model_id: str):
        entry = entry_or_404(model_id)
        return _read_file_json(os.path.join(state.data_dir, entry.path))

    @app.get("/models/{model_id}/annotations")
    def get_annotations(model_id: str):
        entry_or_404(model_id)
        return state.model_annotations(model_id)

    @app.post("/models/{model_id}/annotations")
    def post_annotation(model_id: str, payload=Body(...)):
        entry_or_404(model_id)
        annotator, keypoints = _validate_annotation_body(payload)
        state.put_annotation(model_id, annotator, keypoints)
        return {"model_id": model_id, "annotator": annotator, "n": len(keypoints)}

    @app.get("/clusters")
    def list_clusters():
        return state.effective_clusters()

    @app.get("/clusters/{cluster_id}")
    def get_cluster(cluster_id: int):
        states = state.cluster_states()
        if cluster_id not in states:
            raise HTTPException(404, f"no cluster {cluster_id}")
        members = [
            c for c in state.clusters["candidates"] if c["label"] == cluster_id
        ]
        dec = state.decisions.get(cluster_id)
        return {
            "id": cluster_id,
            "state": states[cluster_id],
            "target": dec["target"] if dec else None,
            "members": members,
        }

    @app.post("/clusters/{cluster_id}/decision")
    def post_decision(cluster_id: int, payload=Body(...)):
        if not isinstance(payload, dict):
            raise HTTPException(400, "body must be a JSON object")
        action = payload.get("action")
        if action not in ("accept", "reject", "merge"):
            raise HTTPException(400, "'action' must be accept, reject, or merge")
        return state.decide(cluster_id, action, payload.get("target"))

    @app.post("/jobs/aggregate")
    def start_aggregate():
        return state.submit_aggregate()

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        with state._state_lock:
            record = state.jobs.get(job_id)
            if record is None:
                raise HTTPException(404, f"no job {job_id}")
            return dict(record)

    return app
