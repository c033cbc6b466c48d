"""
Occlusion-based point importance.

For every point i of one structure, the point and its K nearest neighbours are
moved to the origin and the sample is re-run in infer mode. The importance of i
is the change of the reference-class logit:

    importance_i = logit_c(occluded at {i} ∪ knn(i, K)) - logit_c(full)

Positive values mean occluding the neighbourhood raises the class evidence.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataError, ParameterError, UnsupportedTaskError
from .mspnet import PointCloudModel
from .shapedata import MultiStructureSample, PointCloud

logger = logging.getLogger(__name__)

DEFAULT_K = 32


@dataclass
class ImportanceMap:
    structure: int
    importance: np.ndarray
    reference_class: int
    k: int
    reference_logit: float

    def __len__(self) -> int:
        return self.importance.size


def _rank_neighbours(sq_dist: np.ndarray, i: int, k: int) -> np.ndarray:
    # distance first, lower index on ties
    order = np.lexsort((np.arange(sq_dist.size), sq_dist))
    return order[order != i][:k]


def knn(cloud: PointCloud, i: int, K: int) -> np.ndarray:
    """Indices of the K nearest points to point i (excluding i), nearest first."""
    n = len(cloud)
    if not 0 <= i < n:
        raise ParameterError(f"point index {i} out of range for {n} points")
    if not 0 <= K < n:
        raise ParameterError(f"K must satisfy 0 <= K < n ({n}), got {K}")
    sq_dist = ((cloud.points - cloud.points[i]) ** 2).sum(axis=1)
    return _rank_neighbours(sq_dist, i, K)


def occlude(cloud: PointCloud, indices: Sequence[int]) -> PointCloud:
    """Copy of the cloud with the listed points set to (0, 0, 0)."""
    idx = np.asarray(list(indices), dtype=np.int64)
    n = len(cloud)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ParameterError(f"occlusion index out of range for {n} points: {idx.tolist()}")
    points = cloud.points.copy()
    points[idx] = 0.0
    return PointCloud(points, cloud.structure_id)


def _logits(model: PointCloudModel, sample: MultiStructureSample) -> np.ndarray:
    clouds = [c.points[None, :, :] for c in sample.clouds]
    return model(clouds, "infer").prediction.values[0]


def _check_model(model: PointCloudModel) -> None:
    if model.config.task != "classification":
        raise UnsupportedTaskError("point importance needs a classification model (class logits), got a regression model")


def occlusion_response(
    model: PointCloudModel,
    sample: MultiStructureSample,
    structure: int,
    indices: Sequence[int],
    reference_class: int,
    reference_logit: Optional[float] = None,
) -> float:
    """Change of the reference-class logit when `indices` of one structure are occluded."""
    _check_model(model)
    if reference_logit is None:
        reference_logit = float(_logits(model, sample)[reference_class])
    clouds = list(sample.clouds)
    clouds[structure] = occlude(clouds[structure], indices)
    return float(_logits(model, sample.with_clouds(clouds))[reference_class]) - reference_logit


def importance_map(
    model: PointCloudModel,
    sample: MultiStructureSample,
    structure: int,
    K: int = DEFAULT_K,
    reference_class: Optional[int] = None,
    threads: int = 1,
) -> ImportanceMap:
    """
    Per-point importance for one structure. The reference class is the model's
    prediction on the full sample unless given.
    """
    _check_model(model)
    if not 0 <= structure < sample.num_structures:
        raise ParameterError(f"structure {structure} out of range for {sample.num_structures} structures")
    cloud = sample.clouds[structure]
    n = len(cloud)
    if not 0 <= K < n:
        raise ParameterError(f"K must satisfy 0 <= K < n ({n}), got {K}")

    full = _logits(model, sample)
    if reference_class is None:
        reference_class = int(np.argmax(full))
    elif not 0 <= reference_class < full.size:
        raise ParameterError(f"reference class {reference_class} out of range for {full.size} classes")
    reference_logit = float(full[reference_class])

    def _point(i: int) -> float:
        region = np.concatenate([[i], knn(cloud, i, K)])
        return occlusion_response(model, sample, structure, region, reference_class, reference_logit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            values = list(ex.map(_point, range(n)))
    else:
        values = [_point(i) for i in range(n)]

    logger.info(f"importance: subject {sample.subject_id} structure {structure}, {n} points, K={K}, class {reference_class}")
    return ImportanceMap(structure, np.asarray(values), reference_class, K, reference_logit)


# ── Export ────────────────────────────────────────────────────────────────

def diverging_colors(importance: np.ndarray) -> np.ndarray:
    """
    Red-white-blue, symmetric about zero and scaled by max |importance|:
    +max -> (255, 0, 0), 0 -> (255, 255, 255), -max -> (0, 0, 255).
    """
    importance = np.asarray(importance, dtype=np.float64)
    peak = np.abs(importance).max(initial=0.0)
    v = importance / peak if peak > 0 else np.zeros_like(importance)
    fade = np.rint(255.0 * (1.0 - np.abs(v))).astype(np.int64)
    colors = np.full((v.size, 3), 255, dtype=np.int64)
    pos, neg = v > 0, v < 0
    colors[pos, 1] = fade[pos]
    colors[pos, 2] = fade[pos]
    colors[neg, 0] = fade[neg]
    colors[neg, 1] = fade[neg]
    return colors.astype(np.uint8)


def _export_paths(path: str) -> Tuple[str, str]:
    stem, ext = os.path.splitext(path)
    if ext.lower() not in (".csv", ".ply"):
        stem = path
    return stem + ".csv", stem + ".ply"


def export_importance(imap: ImportanceMap, cloud: PointCloud, path: str) -> List[str]:
    """Writes `<path>.csv` (x,y,z,importance) and `<path>.ply` (ASCII, per-vertex colors)."""
    if len(imap) != len(cloud):
        raise DataError(f"importance map has {len(imap)} values, cloud has {len(cloud)} points")
    csv_path, ply_path = _export_paths(path)
    try:
        os.makedirs(os.path.dirname(csv_path) or ".", exist_ok=True)
        frame = pd.DataFrame(cloud.points, columns=["x", "y", "z"])
        frame["importance"] = imap.importance
        frame.to_csv(csv_path, index=False, float_format="%.9g")

        colors = diverging_colors(imap.importance)
        xyz = cloud.points.astype(np.float32)
        with open(ply_path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"comment importance structure {imap.structure} class {imap.reference_class} K {imap.k}\n")
            fh.write(f"element vertex {len(cloud)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write("end_header\n")
            for (x, y, z), (r, g, b) in zip(xyz, colors):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n")
    except OSError as exc:
        raise DataError(f"cannot write importance map to {path}: {exc}")
    return [csv_path, ply_path]


def read_ply_colors(path: str) -> np.ndarray:
    """Vertex colors of an ASCII PLY written by export_importance."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    body = lines[lines.index("end_header") + 1:]
    return np.array([[int(v) for v in line.split()[3:6]] for line in body if line.strip()], dtype=np.int64)
