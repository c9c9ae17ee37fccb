"""On-disk formats and exact round-trip serialization.

All files are JSON with sorted keys.  Float arrays travel as base64-encoded
little-endian 64-bit blobs so that read(write(v)) reproduces v bit for bit;
scalar floats embedded in JSON rely on repr round-tripping, which Python
guarantees for float64.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np

from .core import (
    CLOUD_SIZE,
    AggregatedKeypointSet,
    DatasetManifest,
    ManifestEntry,
    ModelCloud,
    RawAnnotationSet,
    SymmetryGroup,
)
from .errors import IoError, MissingFile, SchemaError


def _dump(obj, path: str) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _load(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingFile(f"no such file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IoError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise IoError(f"{path}: expected a JSON object at top level")
    return obj


def encode_floats(arr: np.ndarray) -> str:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return base64.b64encode(data).decode("ascii")


def decode_floats(blob: str, count: int, context: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.encode("ascii"), validate=True)
    except Exception as exc:
        raise IoError(f"{context}: bad base64 payload ({exc})") from exc
    if len(raw) != count * 8:
        raise IoError(
            f"{context}: payload holds {len(raw)} bytes, expected {count * 8}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_cloud(cloud: ModelCloud, path: str) -> None:
    _dump(
        {
            "id": cloud.model_id,
            "category": cloud.category,
            "n": cloud.n_points,
            "xyz": encode_floats(cloud.points),
        },
        path,
    )


def load_cloud(path: str) -> ModelCloud:
    obj = _load(path)
    try:
        n = int(obj["n"])
        if n != CLOUD_SIZE:
            raise IoError(f"{path}: cloud declares n={n}, expected {CLOUD_SIZE}")
        xyz = decode_floats(obj["xyz"], n * 3, path).reshape(n, 3)
        return ModelCloud(str(obj["id"]), str(obj["category"]), xyz)
    except KeyError as exc:
        raise IoError(f"{path}: missing cloud field {exc}") from exc


def save_annotations(sets: list[RawAnnotationSet], path: str) -> None:
    if not sets:
        raise SchemaError("cannot save an empty annotation list")
    model_id = sets[0].model_id
    for s in sets:
        if s.model_id != model_id:
            raise SchemaError("all annotation sets in one file must share a model")
    _dump(
        {
            "model_id": model_id,
            "annotators": [
                {
                    "annotator": s.annotator_id,
                    "keypoints": [[float(v) for v in row] for row in s.positions],
                }
                for s in sets
            ],
        },
        path,
    )


def load_annotations(path: str) -> list[RawAnnotationSet]:
    obj = _load(path)
    try:
        model_id = str(obj["model_id"])
        out = []
        for rec in obj["annotators"]:
            out.append(
                RawAnnotationSet(
                    model_id,
                    str(rec["annotator"]),
                    np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 3),
                )
            )
        return out
    except (KeyError, TypeError, ValueError) as exc:
        raise IoError(f"{path}: malformed annotation file ({exc})") from exc


def symmetry_to_json(sym: SymmetryGroup) -> dict:
    obj = {"kind": sym.kind, "members": [list(p) if isinstance(p, tuple) else p for p in sym.members]}
    if sym.kind == "reflection-pair":
        obj["normal"] = list(sym.normal)
        obj["offset"] = sym.offset
    else:
        obj["axis"] = list(sym.axis)
        obj["center"] = list(sym.center)
        obj["order"] = sym.order
    return obj


def symmetry_from_json(obj: dict) -> SymmetryGroup:
    kind = obj["kind"]
    if kind == "reflection-pair":
        return SymmetryGroup(
            kind=kind,
            members=tuple(tuple(p) for p in obj["members"]),
            normal=tuple(obj["normal"]),
            offset=float(obj["offset"]),
        )
    return SymmetryGroup(
        kind=kind,
        members=tuple(obj["members"]),
        axis=tuple(obj["axis"]),
        center=tuple(obj["center"]),
        order=int(obj.get("order", 0)),
    )


def save_aggregated(kps: AggregatedKeypointSet, path: str) -> None:
    _dump(
        {
            "model_id": kps.model_id,
            "keypoints": [
                {"point_index": int(pi), "semantic_index": int(si)}
                for pi, si in zip(kps.vertex_indices, kps.semantics)
            ],
            "fidelities": encode_floats(kps.fidelities),
            "symmetries": [symmetry_to_json(s) for s in kps.symmetries],
        },
        path,
    )


def load_aggregated(path: str) -> AggregatedKeypointSet:
    obj = _load(path)
    try:
        kp = obj["keypoints"]
        vi = np.array([int(rec["point_index"]) for rec in kp], dtype=np.int64)
        se = np.array([int(rec["semantic_index"]) for rec in kp], dtype=np.int64)
        if "fidelities" in obj:
            fid = decode_floats(obj["fidelities"], len(kp), path)
        else:
            fid = np.zeros(len(kp))
        syms = tuple(symmetry_from_json(s) for s in obj.get("symmetries", []))
        return AggregatedKeypointSet(str(obj["model_id"]), vi, se, fid, syms)
    except (KeyError, TypeError, ValueError) as exc:
        raise IoError(f"{path}: malformed aggregated file ({exc})") from exc


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    _dump(
        {
            "models": [
                {
                    "id": e.model_id,
                    "category": e.category,
                    "split": e.split,
                    "path": e.path,
                }
                for e in manifest.entries
            ],
            "ratios": list(manifest.ratios),
        },
        path,
    )


def load_manifest(path: str) -> DatasetManifest:
    obj = _load(path)
    if "models" not in obj or not isinstance(obj["models"], list):
        raise SchemaError(f"{path}: manifest must hold a 'models' list")
    entries = []
    for rec in obj["models"]:
        if not isinstance(rec, dict) or not {"id", "category", "split"} <= rec.keys():
            raise SchemaError(f"{path}: malformed manifest entry {rec!r}")
        if "path" not in rec or not rec["path"]:
            raise MissingFile(f"{path}: entry {rec.get('id')!r} lacks a file path")
        entries.append(
            ManifestEntry(
                str(rec["id"]), str(rec["category"]), str(rec["split"]), str(rec["path"])
            )
        )
    ratios = tuple(obj.get("ratios", (7, 1, 2)))
    return DatasetManifest(tuple(entries), ratios)
