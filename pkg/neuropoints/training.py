import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from .diffcore import Tensor, backward, mse, ortho_regularizer, scale, softmax_cross_entropy
from .errors import DataError, NumericError, ParameterError
from .metrics import Metrics, classification_metrics, confusion_matrix, regression_metrics
from .mspnet import ModelOutput, PointCloudModel
from .rng import RngState
from .shapedata import (
    NORMALIZE_MODES, MultiStructureSample, augment_sample, check_uniform_shape, normalize_subject,
)

logger = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "val_metric"]
FLOAT_FMT = "%.9g"


@dataclass
class TrainConfig:
    task: str = "classification"
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    reg_weight: float = 0.001
    split_ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    augment: bool = True
    max_translation: float = 0.1
    # radians; None draws rotations uniformly over SO(3)
    max_angle: Optional[float] = 0.1
    augment_per_structure: bool = False
    # None picks joint for classification and center for regression
    normalize: Optional[str] = None
    standardize_targets: bool = True
    eval_batch_size: int = 32
    regression_classes: Optional[List[int]] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.task not in ("classification", "regression"):
            raise ParameterError(f"Unknown task '{self.task}'. Valid options: ['classification', 'regression']")
        if self.normalize is None:
            self.normalize = "joint" if self.task == "classification" else "center"
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ParameterError(f"split_ratios must be three non-negative values summing to 1, got {self.split_ratios}")
        if self.reg_weight < 0:
            raise ParameterError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.epochs < 0 or self.batch_size < 2 or self.eval_batch_size < 1:
            raise ParameterError("epochs must be >= 0, batch_size >= 2 and eval_batch_size >= 1")
        if self.learning_rate < 0 or self.max_translation < 0:
            raise ParameterError("learning_rate and max_translation must be >= 0")
        if self.max_angle is not None and self.max_angle < 0:
            raise ParameterError(f"max_angle must be >= 0 or None, got {self.max_angle}")
        if self.normalize not in NORMALIZE_MODES:
            raise ParameterError(f"Unknown normalization '{self.normalize}'. Valid options: {list(NORMALIZE_MODES)}")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ParameterError(f"Unknown train config keys {sorted(unknown)}. Valid keys: {sorted(valid)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str) -> "TrainConfig":
        with open(path, "r") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class TrainResult:
    model: PointCloudModel
    log: pd.DataFrame
    best_epoch: int
    best_metric: float
    splits: Dict[str, List[str]] = field(default_factory=dict)


# ── Data handling ─────────────────────────────────────────────────────────

def split_by_subject(
    dataset: Sequence[MultiStructureSample],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> Tuple[List[MultiStructureSample], List[MultiStructureSample], List[MultiStructureSample]]:
    """Shuffle subjects (not samples) and cut them into train/val/test by ratios."""
    if not dataset:
        raise DataError("cannot split an empty dataset")
    subjects = sorted({s.subject_id for s in dataset})
    order = RngState(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n_train = int(round(ratios[0] * len(subjects)))
    n_val = int(round(ratios[1] * len(subjects)))
    n_val = min(n_val, len(subjects) - n_train)
    assignment = {}
    for rank, sid in enumerate(shuffled):
        assignment[sid] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    parts: Tuple[List, List, List] = ([], [], [])
    for s in dataset:
        parts[assignment[s.subject_id]].append(s)
    return parts


def prepare_samples(samples: Sequence[MultiStructureSample], mode: str) -> List[MultiStructureSample]:
    return [normalize_subject(s, mode)[0] for s in samples]


def stack_batch(samples: Sequence[MultiStructureSample], task: str):
    """Clouds as m arrays of [B, n, 3] plus the target vector."""
    m = samples[0].num_structures
    clouds = [np.stack([s.clouds[j].points for s in samples]) for j in range(m)]
    if any(s.target is None for s in samples):
        raise DataError("samples without a target cannot be used for training or evaluation")
    dtype = np.int64 if task == "classification" else np.float64
    return clouds, np.array([s.target for s in samples], dtype=dtype)


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm needs two rows in train mode
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


# ── Loss and optimizer ────────────────────────────────────────────────────

def regularization(output: ModelOutput) -> Optional[Tensor]:
    reg = None
    for T in output.transforms:
        term = ortho_regularizer(T)
        reg = term if reg is None else reg + term
    return reg


def total_loss(output: ModelOutput, target, reg_weight: float, task: Optional[str] = None) -> Tensor:
    """Task loss (cross-entropy or MSE) + λ · Σ_branches ||I - T Tᵀ||²_F."""
    if task is None:
        task = "classification" if output.prediction.ndim == 2 else "regression"
    if task == "classification":
        loss = softmax_cross_entropy(output.prediction, target)
    else:
        loss = mse(output.prediction, target)
    reg = regularization(output)
    if reg_weight > 0 and reg is not None:
        loss = loss + scale(reg, reg_weight)
    return loss


class Adam:
    """Adam with bias-corrected moments; updates run in place on preallocated buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self._buf = [np.empty_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / c1
        for p, m, v, buf in zip(self.params, self.m, self.v, self._buf):
            g = p.grad
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            # buf <- step_size * m / (sqrt(v / c2) + eps)
            np.divide(v, c2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= step_size
            p.values -= buf


# ── Inference and evaluation ──────────────────────────────────────────────

def _filter_classes(samples: Sequence[MultiStructureSample], classes: Optional[Sequence[int]]) -> List[MultiStructureSample]:
    if classes is None:
        return list(samples)
    keep = set(int(c) for c in classes)
    return [s for s in samples if "class" in s.annotations and int(s.annotations["class"]) in keep]


def predict(model: PointCloudModel, samples: Sequence[MultiStructureSample], batch_size: int = 32, reg_weight: float = 0.0):
    """Infer-mode predictions (logits or values) and the mean total loss."""
    task = model.config.task
    outputs, loss_sum = [], 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        clouds, targets = stack_batch(chunk, task)
        out = model(clouds, "infer")
        loss_sum += total_loss(out, targets, reg_weight, task).item() * len(chunk)
        outputs.append(out.prediction.values)
    return np.concatenate(outputs, axis=0), loss_sum / len(samples)


def _score(model: PointCloudModel, samples: Sequence[MultiStructureSample], preds: np.ndarray) -> Metrics:
    task = model.config.task
    _, targets = stack_batch(samples, task)
    if task == "classification":
        return classification_metrics(confusion_matrix(targets, preds.argmax(axis=1), model.config.num_classes))
    return regression_metrics(targets, preds)


def evaluate(model: PointCloudModel, split: Sequence[MultiStructureSample], task: Optional[str] = None, batch_size: int = 32) -> Metrics:
    """Infer-mode metrics: confusion matrix with per-class/macro/weighted P, R, F1, or MAE."""
    task = task or model.config.task
    if task != model.config.task:
        raise ParameterError(f"model was built for {model.config.task}, asked to evaluate {task}")
    if not split:
        raise DataError("cannot evaluate an empty split")
    preds, _ = predict(model, split, batch_size)
    return _score(model, split, preds)


# ── Training loop ─────────────────────────────────────────────────────────

def _snapshot(model: PointCloudModel) -> List[np.ndarray]:
    out = []
    for _, owner, attr in model.checkpoint_entries():
        value = getattr(owner, attr)
        out.append((value.values if isinstance(value, Tensor) else value).copy())
    return out


def _restore(model: PointCloudModel, snapshot: List[np.ndarray]) -> None:
    for (_, owner, attr), arr in zip(model.checkpoint_entries(), snapshot):
        value = getattr(owner, attr)
        if isinstance(value, Tensor):
            value.values[...] = arr
        else:
            setattr(owner, attr, arr.copy())


def _fit_target_scaling(model: PointCloudModel, train_set: Sequence[MultiStructureSample]) -> None:
    """The network then regresses standardized targets; the model config keeps the mapping back."""
    _, y = stack_batch(train_set, "regression")
    spread = float(y.std())
    model.config.target_offset = float(y.mean())
    model.config.target_scale = spread if spread > 0 else 1.0
    logger.info(f"regression targets: offset {model.config.target_offset:.4f}, scale {model.config.target_scale:.4f}")


def _is_better(task: str, metric: float, best: Optional[float]) -> bool:
    if best is None or np.isnan(best):
        return True
    return metric > best if task == "classification" else metric < best


def train(
    model: PointCloudModel,
    dataset: Sequence[MultiStructureSample],
    config: TrainConfig,
    splits: Optional[Tuple[Sequence[MultiStructureSample], Sequence[MultiStructureSample], Sequence[MultiStructureSample]]] = None,
) -> TrainResult:
    """
    Adam on total_loss over shuffled mini-batches. Each epoch logs train loss,
    validation loss and the validation metric (macro F1 or MAE); the parameters
    of the best validation epoch are restored at the end.
    """
    if config.task != model.config.task:
        raise ParameterError(f"model was built for {model.config.task}, config asks for {config.task}")
    check_uniform_shape(dataset)
    if splits is None:
        splits = split_by_subject(dataset, config.split_ratios, config.seed)
    train_set, val_set, test_set = (prepare_samples(part, config.normalize) for part in splits)
    if len(train_set) < 2:
        raise DataError(f"training needs at least 2 samples in the train split, got {len(train_set)}")
    val_eval = _filter_classes(val_set, config.regression_classes) if config.task == "regression" else val_set
    if config.task == "regression" and config.standardize_targets:
        _fit_target_scaling(model, train_set)

    root = RngState(config.seed)
    shuffle_rng, augment_rng, dropout_rng = root.spawn(1), root.spawn(2), root.spawn(3)
    optimizer = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    rows, best_metric, best_epoch, best_state = [], None, 0, None
    logger.info(f"train: {len(train_set)} train / {len(val_set)} val / {len(test_set)} test samples, {config.epochs} epochs")

    for epoch in range(1, config.epochs + 1):
        loss_sum = 0.0
        for idx in _batches(shuffle_rng.permutation(len(train_set)), config.batch_size):
            batch = [train_set[i] for i in idx]
            if config.augment:
                batch = [
                    augment_sample(s, augment_rng, config.max_translation, config.max_angle, config.augment_per_structure)
                    for s in batch
                ]
            clouds, targets = stack_batch(batch, config.task)
            optimizer.zero_grad()
            loss = total_loss(model(clouds, "train", dropout_rng), targets, config.reg_weight, config.task)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"epoch {epoch}: non-finite loss {value} on subjects {[s.subject_id for s in batch]}")
            backward(loss)
            optimizer.step()
            loss_sum += value * len(batch)
        train_loss = loss_sum / len(train_set)

        if val_eval:
            val_preds, val_loss = predict(model, val_eval, config.eval_batch_size, config.reg_weight)
            val_metric = _score(model, val_eval, val_preds).headline
        else:
            val_loss = val_metric = float("nan")
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_metric": val_metric})
        logger.info(f"epoch {epoch}: train_loss {train_loss:.4f} val_loss {val_loss:.4f} val_metric {val_metric:.4f}")

        if np.isnan(val_metric) or _is_better(config.task, val_metric, best_metric):
            best_metric, best_epoch, best_state = val_metric, epoch, _snapshot(model)

    if best_state is not None:
        _restore(model, best_state)
    log = pd.DataFrame(rows, columns=EPOCH_LOG_COLUMNS)
    split_ids = {name: sorted({s.subject_id for s in part}) for name, part in zip(("train", "val", "test"), splits)}
    return TrainResult(model, log, best_epoch, float("nan") if best_metric is None else best_metric, split_ids)


def save_epoch_log(log: pd.DataFrame, path: str) -> str:
    log.to_csv(path, index=False, float_format=FLOAT_FMT, columns=EPOCH_LOG_COLUMNS)
    return path
