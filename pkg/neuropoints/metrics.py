from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class Metrics:
    task: str
    n_samples: int
    confusion: Optional[np.ndarray] = None
    precision: Optional[np.ndarray] = None
    recall: Optional[np.ndarray] = None
    f1: Optional[np.ndarray] = None
    support: Optional[np.ndarray] = None
    mae: Optional[float] = None
    abs_errors: List[float] = field(default_factory=list)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.confusion.sum(), 1))

    def weighted(self, values: np.ndarray) -> float:
        total = self.support.sum()
        return float((values * self.support).sum() / total) if total else 0.0

    @property
    def headline(self) -> float:
        """Model-selection score: macro F1 (higher is better) or MAE (lower is better)."""
        return self.macro_f1 if self.task == "classification" else float(self.mae)

    def to_dict(self) -> Dict:
        if self.task == "regression":
            return {"task": self.task, "n_samples": self.n_samples, "mae": self.mae, "abs_errors": list(self.abs_errors)}
        return {
            "task": self.task,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "confusion_matrix": self.confusion.tolist(),
            "per_class": {
                "precision": self.precision.tolist(),
                "recall": self.recall.tolist(),
                "f1": self.f1.tolist(),
                "support": self.support.tolist(),
            },
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "weighted": {
                "precision": self.weighted(self.precision),
                "recall": self.weighted(self.recall),
                "f1": self.weighted(self.f1),
            },
        }


def classification_metrics(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(
        task="classification",
        n_samples=int(cm.sum()),
        confusion=cm,
        precision=precision,
        recall=recall,
        f1=f1,
        support=cm.sum(axis=1),
    )


def regression_metrics(y_true: Sequence[float], y_pred: Sequence[float]) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0:
        raise DataError("cannot compute MAE on an empty split")
    errors = np.abs(y_pred - y_true)
    return Metrics(task="regression", n_samples=int(y_true.size), mae=float(errors.mean()), abs_errors=errors.tolist())
