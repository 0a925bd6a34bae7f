"""On-disk dataset: ``manifest.jsonl`` plus raw binary blobs per record.

Blob encodings (all row-major, little-endian):

* ``rgb``: uint8, (H, W, 3)
* ``depth``: float32, (H, W)
* ``mask``: uint8, (H, W), 1 = target object
* ``hand``: float64, (21, 3)
* ``tracks``: float64, (n, 6) rows ``id, u_pre, v_pre, u_contact, v_contact, visible``
* ``object_points``: float64, (n, 3)
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from ..contact_extract import FingerRegion
from ..errors import CorruptManifest, MissingBlob, SizeMismatch
from ..geometry import CameraIntrinsics, DepthMap, PixelPoint, PoseCenteredAffordance, Quaternion
from ..grip_mapping import HandKeypoints
from .records import Intermediates, Provenance, RgbdFrame, SampleRecord, TrackSet, validate_record

MANIFEST = "manifest.jsonl"
BLOB_DIR = "blobs"
_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")

_DTYPES = {
    "rgb": np.dtype("u1"),
    "depth": np.dtype("<f4"),
    "mask": np.dtype("u1"),
    "hand": np.dtype("<f8"),
    "tracks": np.dtype("<f8"),
    "object_points": np.dtype("<f8"),
}


def _affordance_json(a: PoseCenteredAffordance | None):
    if a is None:
        return None
    return {"u": a.contact_point.u, "v": a.contact_point.v, "quaternion": list(a.orientation.as_array().tolist())}


def _affordance_from(obj) -> PoseCenteredAffordance | None:
    if obj is None:
        return None
    q = [float(c) for c in obj["quaternion"]]
    if len(q) != 4:
        raise ValueError("quaternion needs four components")
    return PoseCenteredAffordance(PixelPoint(float(obj["u"]), float(obj["v"])), Quaternion(*q))


def _write_blob(root: Path, rel: str, arr: np.ndarray, kind: str) -> None:
    (root / rel).write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes())


def record_to_json(r: SampleRecord, blobs: dict) -> dict:
    k = r.intrinsics
    entry = {
        "id": r.id,
        "width": r.width,
        "height": r.height,
        "instruction_id": int(r.instruction_id),
        "provenance": Provenance(r.provenance).value,
        "gt": _affordance_json(r.gt),
        "curated": _affordance_json(r.curated),
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "rgb": blobs["rgb"],
        "depth": blobs["depth"],
        "mask": blobs["mask"],
        "intermediates": None,
        "meta": r.meta,
    }
    inter = r.intermediates
    if inter is not None:
        entry["intermediates"] = {
            "hand": blobs["hand"],
            "tracks": blobs["tracks"],
            "n_tracks": len(inter.tracks),
            "object_points": blobs["object_points"],
            "n_object_points": int(len(inter.object_points)),
            "region": {"vertices": [list(p) for p in inter.region.vertices], "dilation": inter.region.dilation},
        }
    return entry


def write_dataset(records, directory) -> Path:
    """Write ``records`` under ``directory``; each record is validated first."""
    root = Path(directory)
    (root / BLOB_DIR).mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = []
    for r in records:
        if not _SAFE_ID.match(r.id):
            raise ValueError(f"record id {r.id!r} is not filename-safe")
        if r.id in seen:
            raise ValueError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        validate_record(r)
        blobs = {kind: f"{BLOB_DIR}/{r.id}.{kind}" for kind in ("rgb", "depth", "mask")}
        _write_blob(root, blobs["rgb"], r.frame.rgb, "rgb")
        _write_blob(root, blobs["depth"], r.frame.depth.values, "depth")
        _write_blob(root, blobs["mask"], r.mask, "mask")
        if r.intermediates is not None:
            inter = r.intermediates
            for kind, arr in (("hand", inter.hand.joints), ("tracks", inter.tracks.rows()),
                              ("object_points", inter.object_points)):
                blobs[kind] = f"{BLOB_DIR}/{r.id}.{kind}"
                _write_blob(root, blobs[kind], arr, kind)
        lines.append(json.dumps(record_to_json(r, blobs), sort_keys=True))
    (root / MANIFEST).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return root


def _read_blob(root: Path, rel, kind: str, shape: tuple) -> np.ndarray:
    if not isinstance(rel, str):
        raise ValueError(f"{kind} blob path must be a string")
    path = root / rel
    if not path.is_file():
        raise MissingBlob(path)
    raw = path.read_bytes()
    dt = _DTYPES[kind]
    want = int(np.prod(shape)) * dt.itemsize
    if len(raw) != want:
        raise SizeMismatch(f"{path}: expected {want} bytes for {kind} {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def record_from_json(entry: dict, root: Path) -> SampleRecord:
    w, h = int(entry["width"]), int(entry["height"])
    rgb = _read_blob(root, entry["rgb"], "rgb", (h, w, 3))
    depth = _read_blob(root, entry["depth"], "depth", (h, w))
    mask = _read_blob(root, entry["mask"], "mask", (h, w))
    ki = entry["intrinsics"]
    k = CameraIntrinsics(float(ki["fx"]), float(ki["fy"]), float(ki["cx"]), float(ki["cy"]), w, h)
    inter = None
    ij = entry.get("intermediates")
    if ij is not None:
        hand = _read_blob(root, ij["hand"], "hand", (21, 3))
        tracks = _read_blob(root, ij["tracks"], "tracks", (int(ij["n_tracks"]), 6))
        obj = _read_blob(root, ij["object_points"], "object_points", (int(ij["n_object_points"]), 3))
        region = FingerRegion(tuple(tuple(p) for p in ij["region"]["vertices"]), float(ij["region"]["dilation"]))
        inter = Intermediates(HandKeypoints(hand), TrackSet.from_rows(tracks), region, obj)
    return SampleRecord(
        id=str(entry["id"]),
        frame=RgbdFrame(rgb, DepthMap(depth)),
        mask=mask,
        instruction_id=int(entry["instruction_id"]),
        gt=_affordance_from(entry["gt"]),
        intrinsics=k,
        provenance=Provenance(entry["provenance"]),
        intermediates=inter,
        curated=_affordance_from(entry.get("curated")),
        meta=dict(entry.get("meta") or {}),
    )


def read_dataset(directory) -> list[SampleRecord]:
    """Load and re-validate every record listed in the manifest."""
    root = Path(directory)
    path = root / MANIFEST
    if not path.is_file():
        raise MissingBlob(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptManifest(lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(entry, dict):
                raise CorruptManifest(lineno, "entry is not a JSON object")
            try:
                rec = record_from_json(entry, root)
                validate_record(rec)
            except (MissingBlob, SizeMismatch):
                raise
            except KeyError as exc:
                raise CorruptManifest(lineno, f"missing field {exc.args[0]!r}") from exc
            except (TypeError, ValueError) as exc:
                raise CorruptManifest(lineno, str(exc)) from exc
            records.append(rec)
    return records


def update_labels(directory, labels: dict) -> None:
    """Rewrite the manifest with ``curated`` labels replaced for the given record ids."""
    root = Path(directory)
    path = root / MANIFEST
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        if entry["id"] in labels:
            entry["curated"] = _affordance_json(labels[entry["id"]])
        out.append(json.dumps(entry, sort_keys=True))
    path.write_text("".join(line + "\n" for line in out), encoding="utf-8")
