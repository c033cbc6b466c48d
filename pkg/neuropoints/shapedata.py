"""
Point clouds for multi-structure shape analysis.

Label volumes are turned into per-structure boundary clouds, subsampled to a
fixed size, normalized per subject and augmented with rigid transforms. A
synthetic corpus of ellipsoids (optionally dented) stands in for segmented
scans when real data is not at hand.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import ndimage

from .errors import DataError, ParameterError
from .rng import RngState

logger = logging.getLogger(__name__)

NORMALIZE_MODES = ("joint", "per_structure", "center", "none")
SYNTH_TASKS = ("classification", "regression")
SYNTH_ORDERS = ("polar", "random")
SYNTH_SAMPLINGS = ("lattice", "random")
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

Target = Union[int, float, None]


# ── Types ─────────────────────────────────────────────────────────────────

@dataclass
class LabelVolume:
    """Integer label grid; `labels` is flat with x varying fastest."""
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    labels: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise DataError(f"volume dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"voxel spacing must be strictly positive, got {self.spacing}")
        self.labels = np.asarray(self.labels, dtype=np.uint16).reshape(-1)
        expected = self.dims[0] * self.dims[1] * self.dims[2]
        if self.labels.size != expected:
            raise DataError(f"volume {self.dims} needs {expected} labels, got {self.labels.size}")

    @property
    def grid(self) -> np.ndarray:
        """Labels as a [dz, dy, dx] array (C order matches the x-fastest layout)."""
        dx, dy, dz = self.dims
        return self.labels.reshape(dz, dy, dx)

    @classmethod
    def from_grid(cls, grid: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "LabelVolume":
        grid = np.asarray(grid)
        dz, dy, dx = grid.shape
        return cls((dx, dy, dz), spacing, origin, grid.reshape(-1))

    def to_world(self, xyz_index: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(xyz_index, dtype=np.float64) * np.asarray(self.spacing)


@dataclass
class PointCloud:
    points: np.ndarray
    structure_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise DataError(f"point cloud for structure {self.structure_id} is empty")
        if not np.all(np.isfinite(self.points)):
            raise DataError(f"point cloud for structure {self.structure_id} has non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class MultiStructureSample:
    subject_id: str
    clouds: List[PointCloud]
    target: Target = None
    annotations: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_structures(self) -> int:
        return len(self.clouds)

    @property
    def num_points(self) -> int:
        return len(self.clouds[0])

    def arrays(self) -> List[np.ndarray]:
        return [c.points for c in self.clouds]

    def with_clouds(self, clouds: List[PointCloud]) -> "MultiStructureSample":
        return MultiStructureSample(self.subject_id, clouds, self.target, self.annotations)


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ParameterError("rotation must be orthogonal with determinant +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self ∘ inner: p -> R_self (R_inner p + t_inner) + t_self."""
        return RigidTransform(self.rotation @ inner.rotation, self.rotation @ inner.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass
class NormalizationRecord:
    """Per-structure centroid and scale; joint mode repeats one value for all structures."""
    mode: str
    centroids: np.ndarray
    scales: np.ndarray

    def denormalize(self, points: np.ndarray, structure: int) -> np.ndarray:
        return np.asarray(points) * self.scales[structure] + self.centroids[structure]

    def to_dict(self) -> Dict:
        return {"mode": self.mode, "centroids": self.centroids.tolist(), "scales": self.scales.tolist()}


def check_uniform_shape(samples: Sequence[MultiStructureSample]) -> Tuple[int, int]:
    """Every sample must have the same structure count and per-structure point count."""
    if not samples:
        raise DataError("dataset is empty")
    m = samples[0].num_structures
    n = samples[0].num_points
    for s in samples:
        if s.num_structures != m or any(len(c) != n for c in s.clouds):
            raise DataError(
                f"subject {s.subject_id}: expected {m} structures of {n} points, "
                f"got {[len(c) for c in s.clouds]}"
            )
    return m, n


# ── Extraction and sampling ───────────────────────────────────────────────

def extract_boundary(vol: LabelVolume, label: int) -> PointCloud:
    """
    World-space centers of the voxels of `label` that have a 6-connected
    neighbour with another value or touch the volume border, in ascending
    linear-index order.
    """
    mask = vol.grid == label
    if not mask.any():
        raise DataError(f"label {label} does not occur in the volume (empty structure)")
    six = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=six, border_value=0)
    z, y, x = np.nonzero(mask & ~interior)
    return PointCloud(vol.to_world(np.stack([x, y, z], axis=1)), structure_id=int(label))


def sample_uniform(cloud: PointCloud, n: int, rng: RngState) -> PointCloud:
    """n points without replacement when the cloud is large enough, with replacement otherwise."""
    if n < 1:
        raise ParameterError(f"sample size must be >= 1, got {n}")
    total = len(cloud)
    idx = rng.choice(total, n, replace=total < n)
    return PointCloud(cloud.points[idx], cloud.structure_id)


def normalize_subject(sample: MultiStructureSample, mode: str = "joint") -> Tuple[MultiStructureSample, NormalizationRecord]:
    """
    joint: subtract the centroid of all points and divide by the largest radius,
    keeping the structures' relative placement. per_structure: each cloud on its own.
    center: subtract the joint centroid only, so absolute sizes survive.
    """
    if mode not in NORMALIZE_MODES:
        raise ParameterError(f"Unknown normalization '{mode}'. Valid options: {list(NORMALIZE_MODES)}")
    m = sample.num_structures
    if mode == "none":
        return sample, NormalizationRecord(mode, np.zeros((m, 3)), np.ones(m))

    if mode in ("joint", "center"):
        allpts = np.concatenate(sample.arrays(), axis=0)
        centroid = allpts.mean(axis=0)
        radius = np.linalg.norm(allpts - centroid, axis=1).max()
        centroids = np.repeat(centroid[None, :], m, axis=0)
        if radius <= 1e-12:
            raise DataError(f"subject {sample.subject_id}: degenerate sample (all points identical)")
        scales = np.full(m, radius if mode == "joint" else 1.0)
    else:
        centroids = np.stack([c.points.mean(axis=0) for c in sample.clouds])
        scales = np.array([np.linalg.norm(c.points - ctr, axis=1).max() for c, ctr in zip(sample.clouds, centroids)])

    if np.any(scales <= 1e-12):
        raise DataError(f"subject {sample.subject_id}: degenerate sample (all points identical)")
    clouds = [
        PointCloud((c.points - centroids[j]) / scales[j], c.structure_id)
        for j, c in enumerate(sample.clouds)
    ]
    return sample.with_clouds(clouds), NormalizationRecord(mode, centroids, scales)


# ── Rigid augmentation ────────────────────────────────────────────────────

def _quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rigid(rng: RngState, max_translation: float, max_angle: Optional[float] = None) -> RigidTransform:
    """
    Rotation uniform over SO(3) (normalized Gaussian quaternion); with max_angle
    (radians) a uniform axis and an angle uniform in [0, max_angle] instead.
    Translation uniform in [-max_translation, max_translation]^3.
    """
    if max_translation < 0:
        raise ParameterError(f"max_translation must be >= 0, got {max_translation}")
    if max_angle is None:
        q = rng.normal(size=4)
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        half = 0.5 * rng.uniform(0.0, max_angle)
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(_quaternion_to_matrix(q), translation)


def apply_rigid(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.structure_id)


def augment_sample(
    sample: MultiStructureSample,
    rng: RngState,
    max_translation: float,
    max_angle: Optional[float] = None,
    per_structure: bool = False,
) -> MultiStructureSample:
    """A rigidly moved copy; one transform for the whole subject unless per_structure."""
    t = random_rigid(rng, max_translation, max_angle)
    clouds = []
    for c in sample.clouds:
        clouds.append(apply_rigid(c, t))
        if per_structure:
            t = random_rigid(rng, max_translation, max_angle)
    return sample.with_clouds(clouds)


# ── Synthetic corpus ──────────────────────────────────────────────────────

@dataclass
class SynthSpec:
    n_subjects: int = 100
    num_structures: int = 2
    num_points: int = 256
    task: str = "classification"
    dent_depth: float = 0.3
    dent_width: float = 0.8
    jitter: float = 0.01
    axis_range: Tuple[float, float] = (0.7, 1.3)
    scale_range: Tuple[float, float] = (0.6, 1.4)
    age_range: Tuple[float, float] = (60.0, 90.0)
    placement_offset: float = 0.2
    structure_spacing: float = 2.5
    order: str = "polar"
    sampling: str = "lattice"
    mixed_classes: bool = False
    seed: int = 0

    def __post_init__(self):
        self.axis_range = tuple(float(v) for v in self.axis_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.age_range = tuple(float(v) for v in self.age_range)
        if self.task not in SYNTH_TASKS:
            raise ParameterError(f"Unknown task '{self.task}'. Valid options: {list(SYNTH_TASKS)}")
        if self.order not in SYNTH_ORDERS:
            raise ParameterError(f"Unknown point order '{self.order}'. Valid options: {list(SYNTH_ORDERS)}")
        if self.sampling not in SYNTH_SAMPLINGS:
            raise ParameterError(f"Unknown surface sampling '{self.sampling}'. Valid options: {list(SYNTH_SAMPLINGS)}")
        if self.n_subjects < 1 or self.num_structures < 1 or self.num_points < 1:
            raise ParameterError("n_subjects, num_structures and num_points must be >= 1")
        if not 0.0 <= self.dent_depth < 1.0:
            raise ParameterError(f"dent_depth must be in [0, 1), got {self.dent_depth}")
        if not 0.0 < self.dent_width <= np.pi:
            raise ParameterError(f"dent_width must be in (0, pi], got {self.dent_width}")
        if self.jitter < 0:
            raise ParameterError(f"jitter must be >= 0, got {self.jitter}")
        for name in ("axis_range", "scale_range", "age_range"):
            lo, hi = getattr(self, name)
            if not lo < hi or (name != "age_range" and lo <= 0):
                raise ParameterError(f"{name} must be an increasing positive pair, got {(lo, hi)}")

    def to_dict(self) -> Dict:
        d = asdict(self)
        for name in ("axis_range", "scale_range", "age_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "SynthSpec":
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ParameterError(f"Unknown synth spec keys {sorted(unknown)}. Valid keys: {sorted(valid)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str) -> "SynthSpec":
        with open(path, "r") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def scale_to_age(scale: float, spec: SynthSpec) -> float:
    s_lo, s_hi = spec.scale_range
    a_lo, a_hi = spec.age_range
    return a_lo + (scale - s_lo) / (s_hi - s_lo) * (a_hi - a_lo)


def _unit_directions(rng: RngState, n: int, sampling: str) -> np.ndarray:
    if sampling == "lattice":
        # golden-angle spiral around the local +x axis, already in polar order
        x = 1.0 - (2.0 * np.arange(n) + 1.0) / n
        ring = np.sqrt(1.0 - x * x)
        phi = GOLDEN_ANGLE * np.arange(n)
        return np.stack([x, ring * np.cos(phi), ring * np.sin(phi)], axis=1)
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _ellipsoid_points(
    rng: RngState,
    center: np.ndarray,
    axes: np.ndarray,
    n: int,
    dent_depth: float,
    dent_width: float,
    jitter: float,
    order: str,
    sampling: str = "lattice",
) -> Tuple[np.ndarray, np.ndarray]:
    u = _unit_directions(rng, n, sampling)
    # polar angle from the local +x axis; the dent sits around it
    theta = np.arccos(np.clip(u[:, 0], -1.0, 1.0))
    in_cap = theta < dent_width
    radial = np.ones(n)
    if dent_depth > 0:
        radial[in_cap] = 1.0 - dent_depth * 0.5 * (1.0 + np.cos(np.pi * theta[in_cap] / dent_width))
    points = center + axes * u * radial[:, None] + rng.normal(0.0, jitter, size=(n, 3))
    idx = np.argsort(theta, kind="stable") if order == "polar" else rng.permutation(n)
    return points[idx], in_cap[idx]


def _synth_subject(index: int, spec: SynthSpec, rng: RngState) -> MultiStructureSample:
    m = spec.num_structures
    centers = np.zeros((m, 3))
    centers[:, 0] = np.arange(m) * spec.structure_spacing
    centers += rng.uniform(-spec.placement_offset, spec.placement_offset, size=(m, 3))
    axes = rng.uniform(spec.axis_range[0], spec.axis_range[1], size=(m, 3))

    label = index % 2
    if spec.task == "classification":
        target: Target = label
        dented = label == 1
    else:
        scale = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
        axes[0] = scale
        target = scale_to_age(scale, spec)
        dented = spec.mixed_classes and label == 1

    clouds, dent_mask = [], None
    for j in range(m):
        depth = spec.dent_depth if (dented and j == 0) else 0.0
        pts, cap = _ellipsoid_points(
            rng, centers[j], axes[j], spec.num_points, depth, spec.dent_width, spec.jitter, spec.order, spec.sampling,
        )
        clouds.append(PointCloud(pts, structure_id=j))
        if j == 0:
            dent_mask = cap

    annotations = {"dent_mask": dent_mask, "centers": centers, "axes": axes, "class": np.array(label)}
    return MultiStructureSample(f"subj{index:04d}", clouds, target, annotations)


def synth_dataset(spec: SynthSpec, rng: Optional[RngState] = None, threads: int = 1) -> List[MultiStructureSample]:
    """
    classification: even-indexed subjects are smooth (class 0), odd-indexed ones
    carry a radial dent on structure 0 (class 1).
    regression: structure 0 is a sphere of radius s ~ U(scale_range) and the
    target is s mapped linearly onto age_range.
    Subject i draws from rng.spawn(i), so the corpus does not depend on threads.
    """
    rng = rng if rng is not None else RngState(spec.seed)
    work = [(i, rng.spawn(i)) for i in range(spec.n_subjects)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            samples = list(ex.map(lambda args: _synth_subject(args[0], spec, args[1]), work))
    else:
        samples = [_synth_subject(i, spec, r) for i, r in work]
    logger.info(f"synth: {len(samples)} subjects, {spec.num_structures} structures x {spec.num_points} points ({spec.task})")
    return samples


def dent_statistic(points: np.ndarray, percentile: float = 2.0) -> float:
    """
    Low percentile of the normalized radius after a least-squares axis-aligned
    ellipsoid fit. Smooth ellipsoids sit near 1; dented ones fall well below.
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    design = np.stack([x * x, y * y, z * z, x, y, z], axis=1)
    coef, *_ = np.linalg.lstsq(design, np.ones(len(points)), rcond=None)
    a, b, c, d, e, f = coef
    if min(a, b, c) <= 0:
        raise DataError("ellipsoid fit is not positive definite")
    center = np.array([-d / (2 * a), -e / (2 * b), -f / (2 * c)])
    level = 1.0 + d * d / (4 * a) + e * e / (4 * b) + f * f / (4 * c)
    q = a * (x - center[0]) ** 2 + b * (y - center[1]) ** 2 + c * (z - center[2]) ** 2
    radius = np.sqrt(np.maximum(q, 0.0) / level)
    return float(np.percentile(radius, percentile))
