from .errors import DataError, DimensionError, NeuroPointsError, NumericError, ParameterError, UnsupportedTaskError
from .rng import RngState
from .diffcore import Tensor, backward, directional_check, gradient_check, ortho_regularizer

# ── Models ────────────────────────────────────────────────────────────────
from .mspnet import ModelConfig, ModelOutput, MSPNet, PointNet, build_model, mspnet_forward, pointnet_forward
from .checkpoint import load_checkpoint, save_checkpoint

# ── Shape data ────────────────────────────────────────────────────────────
from .shapedata import (
    LabelVolume, MultiStructureSample, PointCloud, SynthSpec, augment_sample, extract_boundary, normalize_subject,
    random_rigid, sample_uniform, synth_dataset,
)
from .formats import load_dataset, read_cloud, read_label_volume, write_cloud, write_dataset, write_label_volume

# ── Training and evaluation ───────────────────────────────────────────────
from .training import TrainConfig, TrainResult, evaluate, split_by_subject, total_loss, train
from .metrics import Metrics, classification_metrics, confusion_matrix, regression_metrics
from .occlusion import ImportanceMap, export_importance, importance_map, knn, occlude

# ── Pipeline service ──────────────────────────────────────────────────────
from .run_config import RunConfig
from .service import ShapeAnalysisService
from .summary import generate_report, generate_summary, print_summary, save_summary

__all__ = [
    # ── core ──
    "NeuroPointsError",
    "DimensionError",
    "ParameterError",
    "DataError",
    "UnsupportedTaskError",
    "NumericError",
    "RngState",
    "Tensor",
    "backward",
    "directional_check",
    "gradient_check",
    "ortho_regularizer",
    # ── models ──
    "ModelConfig",
    "ModelOutput",
    "MSPNet",
    "PointNet",
    "build_model",
    "mspnet_forward",
    "pointnet_forward",
    "save_checkpoint",
    "load_checkpoint",
    # ── shape data ──
    "LabelVolume",
    "PointCloud",
    "MultiStructureSample",
    "SynthSpec",
    "extract_boundary",
    "sample_uniform",
    "normalize_subject",
    "random_rigid",
    "augment_sample",
    "synth_dataset",
    "read_label_volume",
    "write_label_volume",
    "read_cloud",
    "write_cloud",
    "write_dataset",
    "load_dataset",
    # ── training and evaluation ──
    "TrainConfig",
    "TrainResult",
    "split_by_subject",
    "total_loss",
    "train",
    "evaluate",
    "Metrics",
    "confusion_matrix",
    "classification_metrics",
    "regression_metrics",
    "ImportanceMap",
    "knn",
    "occlude",
    "importance_map",
    "export_importance",
    # ── pipeline service ──
    "RunConfig",
    "ShapeAnalysisService",
    "generate_report",
    "generate_summary",
    "save_summary",
    "print_summary",
]
