import json
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError
from .shapedata import LabelVolume, MultiStructureSample, PointCloud

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"NPCLOUD1"
CLOUD_HEADER = struct.Struct("<8sQ")  # magic + point count, 16 bytes
FLOAT_FMT = "%.9g"


def _volume_paths(path: str):
    stem = path[:-5] if path.endswith(".json") else (path[:-4] if path.endswith(".raw") else path)
    return stem + ".json", stem + ".raw"


def write_label_volume(vol: LabelVolume, path: str) -> str:
    header_path, raw_path = _volume_paths(path)
    os.makedirs(os.path.dirname(header_path) or ".", exist_ok=True)
    header = {"dims": list(vol.dims), "spacing": list(vol.spacing), "origin": list(vol.origin), "dtype": "u16"}
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2)
    with open(raw_path, "wb") as fh:
        fh.write(vol.labels.astype("<u2").tobytes())
    return header_path


def read_label_volume(path: str) -> LabelVolume:
    """Reads a `<name>.json` header + `<name>.raw` little-endian u16 label pair."""
    header_path, raw_path = _volume_paths(path)
    for p in (header_path, raw_path):
        if not os.path.isfile(p):
            raise DataError(f"Label volume file not found: {p}")
    with open(header_path, "r", encoding="utf-8") as fh:
        header = json.load(fh)
    missing = {"dims", "spacing", "origin"} - set(header)
    if missing:
        raise DataError(f"{header_path}: header is missing keys {sorted(missing)}")
    if header.get("dtype", "u16") != "u16":
        raise DataError(f"{header_path}: unsupported dtype '{header['dtype']}', expected 'u16'")
    labels = np.fromfile(raw_path, dtype="<u2")
    return LabelVolume(header["dims"], header["spacing"], header["origin"], labels)


# ── Point clouds ──────────────────────────────────────────────────────────

def write_cloud(cloud: PointCloud, path: str) -> str:
    """ASCII `x y z` per line, 9 significant digits; `.bin` paths use the binary variant."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if path.endswith(".bin"):
        with open(path, "wb") as fh:
            fh.write(CLOUD_HEADER.pack(CLOUD_MAGIC, len(cloud)))
            fh.write(cloud.points.astype("<f8").tobytes())
    else:
        np.savetxt(path, cloud.points, fmt=FLOAT_FMT, delimiter=" ")
    return path


def read_cloud(path: str, structure_id: int = 0) -> PointCloud:
    if not os.path.isfile(path):
        raise DataError(f"Point cloud file not found: {path}")
    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            head = fh.read(CLOUD_HEADER.size)
            if len(head) != CLOUD_HEADER.size:
                raise DataError(f"{path}: truncated header")
            magic, count = CLOUD_HEADER.unpack(head)
            if magic != CLOUD_MAGIC:
                raise DataError(f"{path}: bad magic {magic!r}")
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != 3 * count:
            raise DataError(f"{path}: header says {count} points, file holds {data.size // 3}")
        points = data.reshape(count, 3)
    else:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if points.shape[1:] != (3,):
            raise DataError(f"{path}: expected 3 columns, got {points.shape[1]}")
    return PointCloud(points, structure_id)


# ── Dataset manifest ──────────────────────────────────────────────────────

def write_manifest(entries: Sequence[Dict], path: str) -> str:
    """Manifest is a JSON list of {subject_id, target, clouds: [paths relative to the manifest]}."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(list(entries), fh, indent=2)
    return path


def write_dataset(
    samples: Sequence[MultiStructureSample],
    out_dir: str,
    manifest_name: str = "manifest.json",
    binary: bool = False,
) -> str:
    ext = "bin" if binary else "txt"
    entries = []
    for s in samples:
        rel_paths = []
        for j, cloud in enumerate(s.clouds):
            rel = os.path.join("clouds", f"{s.subject_id}_s{j}.{ext}")
            write_cloud(cloud, os.path.join(out_dir, rel))
            rel_paths.append(rel)
        entry = {
            "subject_id": s.subject_id,
            "target": _json_target(s.target),
            "clouds": rel_paths,
            "structure_ids": [c.structure_id for c in s.clouds],
        }
        if "class" in s.annotations:
            entry["class"] = int(s.annotations["class"])
        entries.append(entry)
    path = write_manifest(entries, os.path.join(out_dir, manifest_name))
    logger.info(f"dataset: {len(samples)} subjects written to {out_dir}")
    return path


def read_manifest(path: str) -> List[Dict]:
    if not os.path.isfile(path):
        raise DataError(f"Manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})")
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    for i, e in enumerate(entries):
        missing = {"subject_id", "target", "clouds"} - set(e)
        if missing:
            raise DataError(f"{path}: entry {i} is missing keys {sorted(missing)}")
    return entries


def load_dataset(path: str, subject_ids: Optional[Sequence[str]] = None) -> List[MultiStructureSample]:
    base = os.path.dirname(os.path.abspath(path))
    wanted = set(subject_ids) if subject_ids is not None else None
    samples = []
    for e in read_manifest(path):
        if wanted is not None and e["subject_id"] not in wanted:
            continue
        ids = e.get("structure_ids") or list(range(len(e["clouds"])))
        clouds = [read_cloud(os.path.join(base, p), sid) for p, sid in zip(e["clouds"], ids)]
        annotations = {"class": int(e["class"])} if "class" in e else {}
        samples.append(MultiStructureSample(str(e["subject_id"]), clouds, e["target"], annotations))
    return samples


def _json_target(target):
    if target is None:
        return None
    if isinstance(target, (int, np.integer)):
        return int(target)
    return float(target)
