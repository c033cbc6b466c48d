"""
Checkpoints: `<name>.json` manifest + `<name>.bin` little-endian float64 blob.

The blob holds every array in model order (branch -> stage -> layer; within a
layer weight, bias, then batch-norm gamma, beta, running mean, running var),
back to back. The manifest records the architecture config, the entry names and
shapes, and any extra metadata the caller passes (task, preprocessing).
"""
import json
import os
from typing import Dict, Optional, Tuple

import numpy as np

from .diffcore import Tensor
from .errors import DataError
from .mspnet import ModelConfig, PointCloudModel, build_model

FORMAT = "neuropoints-checkpoint"
VERSION = 1


def _paths(path: str):
    stem = path[:-5] if path.endswith(".json") else (path[:-4] if path.endswith(".bin") else path)
    return stem + ".json", stem + ".bin"


def _array(owner, attr: str) -> np.ndarray:
    value = getattr(owner, attr)
    return value.values if isinstance(value, Tensor) else value


def save_checkpoint(model: PointCloudModel, path: str, extra: Optional[Dict] = None) -> str:
    manifest_path, blob_path = _paths(path)
    os.makedirs(os.path.dirname(manifest_path) or ".", exist_ok=True)
    entries = []
    with open(blob_path, "wb") as fh:
        for name, owner, attr in model.checkpoint_entries():
            arr = _array(owner, attr)
            entries.append({"name": name, "shape": list(arr.shape)})
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model": model.config.to_dict(),
        "blob": os.path.basename(blob_path),
        "dtype": "<f8",
        "entries": entries,
        "extra": extra or {},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest_path


def load_checkpoint(path: str) -> Tuple[PointCloudModel, Dict]:
    manifest_path, blob_path = _paths(path)
    if not os.path.isfile(manifest_path):
        raise DataError(f"Checkpoint manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise DataError(f"{manifest_path}: not a {FORMAT} manifest")
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest.get("blob", os.path.basename(blob_path)))
    blob = np.fromfile(blob_path, dtype="<f8")

    model = build_model(ModelConfig.from_dict(manifest["model"]))
    model_entries = model.checkpoint_entries()
    if len(model_entries) != len(manifest["entries"]):
        raise DataError(f"{manifest_path}: {len(manifest['entries'])} entries, model expects {len(model_entries)}")

    offset = 0
    for (name, owner, attr), saved in zip(model_entries, manifest["entries"]):
        current = _array(owner, attr)
        if saved["name"] != name or tuple(saved["shape"]) != current.shape:
            raise DataError(f"{manifest_path}: entry '{saved['name']}' {saved['shape']} does not match '{name}' {list(current.shape)}")
        size = current.size
        if offset + size > blob.size:
            raise DataError(f"{blob_path}: blob is truncated")
        values = blob[offset:offset + size].reshape(current.shape).astype(np.float64)
        value = getattr(owner, attr)
        if isinstance(value, Tensor):
            value.values[...] = values
        else:
            setattr(owner, attr, values)
        offset += size
    if offset != blob.size:
        raise DataError(f"{blob_path}: {blob.size - offset} trailing values")
    return model, manifest.get("extra", {})
