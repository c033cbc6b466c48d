import logging
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .errors import DataError
from .occlusion import ImportanceMap
from .shapedata import PointCloud

logger = logging.getLogger(__name__)


def _finish(fig, output_path: Optional[str]):
    plt.tight_layout()
    if output_path:
        fig.savefig(output_path, dpi=120)
        plt.close(fig)
        logger.info(f"plot saved: {output_path}")
        return output_path
    return fig


def plot_importance(
    cloud: PointCloud,
    imap: ImportanceMap,
    output_path: Optional[str] = None,
    title: Optional[str] = None,
    point_size: float = 6.0,
):
    """
    3D scatter of one structure colored by occlusion importance.

    The color scale is red-white-blue and symmetric about zero, so red points
    raise the reference-class logit when occluded and blue points lower it.

    Parameters:
        cloud (PointCloud): The inspected structure.
        imap (ImportanceMap): Importance values for the same points.
        output_path (str, optional): PNG path. When omitted the figure is returned.
        title (str, optional): Plot title.
        point_size (float): Marker size.
    """
    if len(imap) != len(cloud):
        raise DataError(f"importance map has {len(imap)} values, cloud has {len(cloud)} points")
    peak = float(np.abs(imap.importance).max(initial=0.0)) or 1.0
    pts = cloud.points

    fig = plt.figure(figsize=(8, 7))
    ax = fig.add_subplot(111, projection="3d")
    sc = ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], c=imap.importance, cmap="bwr",
                    vmin=-peak, vmax=peak, s=point_size, edgecolors="none")
    fig.colorbar(sc, ax=ax, shrink=0.7, label=f"Δ logit (class {imap.reference_class})")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    ax.set_title(title or f"structure {imap.structure} importance (K={imap.k})")
    return _finish(fig, output_path)


def plot_training_log(log_path: str, output_path: Optional[str] = None, metric_label: str = "val metric"):
    """Loss curves and the validation metric from an epoch-log CSV."""
    log = pd.read_csv(log_path)
    missing = {"epoch", "train_loss", "val_loss", "val_metric"} - set(log.columns)
    if missing:
        raise DataError(f"{log_path}: epoch log is missing columns {sorted(missing)}")

    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(12, 4.5))
    ax_loss.plot(log["epoch"], log["train_loss"], marker="o", markersize=2, label="train")
    ax_loss.plot(log["epoch"], log["val_loss"], marker="o", markersize=2, label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.grid(True, alpha=0.3)
    ax_loss.legend()

    ax_metric.plot(log["epoch"], log["val_metric"], marker="o", markersize=2, color="tab:green")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel(metric_label)
    ax_metric.grid(True, alpha=0.3)
    return _finish(fig, output_path)


def plot_regression(
    y_true: Sequence[float],
    y_pred: Sequence[float],
    output_path: Optional[str] = None,
    label: str = "age",
):
    """Predicted against true targets with the identity line and the MAE in the title."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise DataError(f"need matching non-empty target arrays, got {y_true.shape} and {y_pred.shape}")
    mae = float(np.abs(y_pred - y_true).mean())
    lo = float(min(y_true.min(), y_pred.min()))
    hi = float(max(y_true.max(), y_pred.max()))

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(y_true, y_pred, s=12, alpha=0.7)
    ax.plot([lo, hi], [lo, hi], color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel(f"true {label}")
    ax.set_ylabel(f"predicted {label}")
    ax.set_title(f"MAE {mae:.2f}")
    ax.grid(True, alpha=0.3)
    return _finish(fig, output_path)
