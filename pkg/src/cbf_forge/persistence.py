"""Versioned, hashed JSON artifacts.

Every file is an envelope

    {"schema_tag", "kind", "tool_version", "seed_chain", "payload", "hash"}

written as canonical JSON: sorted keys, no whitespace, floats with 17
significant digits. The hash is sha256 over the canonical form of everything
except the hash itself, so identical inputs give identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dynamics import system_from_config
from .safe_sets import BoundaryPartition, BoundarySample, SafeSetFunction, safe_set_from_spec

SCHEMA_TAG = "pinn-cbf/v1"

KIND_SAFE_SET = "safe-set"
KIND_PARTITION = "partition"
KIND_DESIGN = "designed-gradient"
KIND_MODEL = "pinn-model"
KIND_MANIFEST = "filter-manifest"
KIND_TRACE = "trace"
KIND_REPORT = "inactivity-report"
KIND_METRICS = "metrics"


class ArtifactError(Exception):
    """Base class for artifact load failures."""


class SchemaMismatchError(ArtifactError):
    pass


class HashMismatchError(ArtifactError):
    pass


class MalformedArtifactError(ArtifactError):
    pass


def _float(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    s = format(v, ".17g")
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


def _encode(obj: Any, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise TypeError(f"artifact keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for i, item in enumerate(seq):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj: Any) -> str:
    out: list[str] = []
    _encode(obj, out)
    return "".join(out)


def content_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("ascii")).hexdigest()


@dataclass(frozen=True)
class ArtifactEnvelope:
    kind: str
    payload: Any
    hash: str
    schema_tag: str = SCHEMA_TAG
    tool_version: str = __version__
    seed_chain: tuple = ()

    def body(self) -> dict:
        return {
            "schema_tag": self.schema_tag,
            "kind": self.kind,
            "tool_version": self.tool_version,
            "seed_chain": list(self.seed_chain),
            "payload": self.payload,
        }


def envelope(kind: str, payload: Any, seed_chain=()) -> ArtifactEnvelope:
    # normalize through the canonical form so the in-memory payload equals what load() returns
    payload = json.loads(canonical_json(payload))
    body = {"schema_tag": SCHEMA_TAG, "kind": kind, "tool_version": __version__,
            "seed_chain": list(seed_chain), "payload": payload}
    return ArtifactEnvelope(kind, payload, content_hash(body), SCHEMA_TAG, __version__, tuple(seed_chain))


# ---------------------------------------------------------------------------
# object <-> payload


def partition_to_dict(part: BoundaryPartition) -> dict:
    return {
        "segments": [{"points": s.points, "normals": s.normals, "closed": bool(s.closed)} for s in part.segments],
        "provenance": list(part.provenance),
        "indices": [np.asarray(i).astype(int).tolist() for i in part.indices],
        "margin": float(part.margin),
    }


def partition_from_dict(d: dict) -> BoundaryPartition:
    segs = [BoundarySample(np.asarray(s["points"], dtype=float), np.asarray(s["normals"], dtype=float),
                           bool(s["closed"])) for s in d["segments"]]
    return BoundaryPartition(segs, list(d["provenance"]), [np.asarray(i, dtype=int) for i in d["indices"]],
                             float(d["margin"]))


def trace_to_dict(trace) -> dict:
    return {
        "t": trace.t, "x": trace.x, "u_nominal": trace.u_nominal, "u_filtered": trace.u_filtered,
        "status": list(trace.status), "active": [list(a) for a in trace.active],
        "h_desired": trace.h_desired, "h": trace.h, "escaped": bool(trace.escaped), "labels": list(trace.labels),
    }


def trace_from_dict(d: dict):
    from .sim import SimulationTrace

    n_rows = len(d["t"])
    return SimulationTrace(
        t=np.asarray(d["t"], dtype=float), x=np.asarray(d["x"], dtype=float),
        u_nominal=np.asarray(d["u_nominal"], dtype=float), u_filtered=np.asarray(d["u_filtered"], dtype=float),
        status=list(d["status"]), active=[tuple(a) for a in d["active"]],
        h_desired=np.asarray(d["h_desired"], dtype=float),
        h=np.asarray(d["h"], dtype=float).reshape(n_rows, -1), escaped=bool(d["escaped"]),
        labels=list(d.get("labels", [])),
    )


def _to_payload(artifact) -> tuple[str, Any]:
    from .gradient_design import DesignedGradient
    from .pinn import PinnModel
    from .relative_degree import InactivityReport
    from .sim import SimulationTrace

    if isinstance(artifact, PinnModel):
        return KIND_MODEL, artifact.to_dict()
    if isinstance(artifact, DesignedGradient):
        return KIND_DESIGN, artifact.to_dict()
    if isinstance(artifact, SafeSetFunction):
        return KIND_SAFE_SET, artifact.spec
    if isinstance(artifact, BoundaryPartition):
        return KIND_PARTITION, partition_to_dict(artifact)
    if isinstance(artifact, SimulationTrace):
        return KIND_TRACE, trace_to_dict(artifact)
    if isinstance(artifact, InactivityReport):
        return KIND_REPORT, artifact.to_dict()
    raise TypeError(f"no artifact kind for {type(artifact).__name__}; pass kind= with a plain payload")


def save(artifact, path, kind: str | None = None, seed_chain=()) -> str:
    """Write ``artifact`` (a known object, or a plain payload with ``kind``) and return its hash."""
    if kind is None:
        kind, payload = _to_payload(artifact)
    else:
        payload = artifact
    env = envelope(kind, payload, seed_chain)
    doc = dict(env.body(), hash=env.hash)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(canonical_json(doc) + "\n", encoding="ascii")
    os.replace(tmp, path)
    return env.hash


def load(path, expected_kind: str | None = None) -> ArtifactEnvelope:
    """Read and verify an envelope; raises a distinct ArtifactError subclass per failure."""
    try:
        text = Path(path).read_text(encoding="ascii")
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedArtifactError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MalformedArtifactError(f"{path}: top level must be an object")
    missing = {"schema_tag", "kind", "tool_version", "seed_chain", "payload", "hash"} - set(doc)
    if missing:
        raise MalformedArtifactError(f"{path}: missing fields {sorted(missing)}")
    if doc["schema_tag"] != SCHEMA_TAG:
        raise SchemaMismatchError(f"{path}: schema {doc['schema_tag']!r}, this reader handles {SCHEMA_TAG!r}")
    body = {k: doc[k] for k in ("schema_tag", "kind", "tool_version", "seed_chain", "payload")}
    digest = content_hash(body)
    if digest != doc["hash"]:
        raise HashMismatchError(f"{path}: content hash {digest} does not match recorded {doc['hash']}")
    if expected_kind is not None and doc["kind"] != expected_kind:
        raise MalformedArtifactError(f"{path}: expected a {expected_kind} artifact, found {doc['kind']}")
    return ArtifactEnvelope(doc["kind"], doc["payload"], doc["hash"], doc["schema_tag"], doc["tool_version"],
                            tuple(doc["seed_chain"]))


def load_object(path):
    """Load and rebuild the object stored at ``path`` (plain payload for untyped kinds)."""
    from .gradient_design import DesignedGradient
    from .pinn import PinnModel

    env = load(path)
    builders = {
        KIND_MODEL: PinnModel.from_dict,
        KIND_DESIGN: DesignedGradient.from_dict,
        KIND_SAFE_SET: safe_set_from_spec,
        KIND_PARTITION: partition_from_dict,
        KIND_TRACE: trace_from_dict,
    }
    try:
        build = builders.get(env.kind)
        return build(env.payload) if build else env.payload
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedArtifactError(f"{path}: payload does not describe a {env.kind}: {exc}") from exc


def load_filter(manifest_path, policy: str | None = None):
    """Assemble a MultiCbfFilter from a manifest, checking every model file's hash.

    Returns (filter, desired_set, manifest_payload).
    """
    from .pinn import PinnModel
    from .safety_filter import CbfModel, ClassKappa, MultiCbfFilter

    manifest_path = Path(manifest_path)
    env = load(manifest_path, KIND_MANIFEST)
    man = env.payload
    try:
        system = system_from_config(man["system"])
        desired = safe_set_from_spec(man["desired_set"])
        cbfs = []
        for entry in man["models"]:
            model_env = load(manifest_path.parent / entry["file"], KIND_MODEL)
            if model_env.hash != entry["hash"]:
                raise HashMismatchError(f"{entry['file']}: hash differs from the manifest entry")
            cbfs.append(CbfModel(PinnModel.from_dict(model_env.payload), ClassKappa(float(entry["kappa"])),
                                 entry.get("label", "h")))
        flt = MultiCbfFilter(tuple(cbfs), system, policy or man.get("infeasible_policy", "hold-last"))
    except (KeyError, TypeError) as exc:
        raise MalformedArtifactError(f"{manifest_path}: incomplete manifest ({exc})") from exc
    return flt, desired, man
