import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, ParameterError
from .formats import load_dataset, read_label_volume, write_dataset
from .metrics import Metrics
from .mspnet import build_model
from .occlusion import ImportanceMap, export_importance, importance_map
from .rng import RngState
from .run_config import RunConfig
from .shapedata import (
    MultiStructureSample, PointCloud, check_uniform_shape, extract_boundary, normalize_subject, sample_uniform,
    synth_dataset,
)
from .summary import generate_report, generate_summary, print_summary, save_report, save_summary
from .training import (
    _filter_classes, evaluate, predict, prepare_samples, save_epoch_log, split_by_subject, train,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "all")
RUN_LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


@dataclass
class ExtractResult:
    manifest_path: str
    samples: List[MultiStructureSample] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    summary_path: Optional[str] = None


@dataclass
class SynthResult:
    manifest_path: str
    samples: List[MultiStructureSample] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    summary_path: Optional[str] = None


@dataclass
class TrainRunResult:
    checkpoint_path: str
    log_path: str
    splits_path: str
    metrics_path: Optional[str]
    best_epoch: int
    best_metric: float
    test_metrics: Optional[Metrics] = None
    plot_paths: List[str] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    summary_path: Optional[str] = None
    errors: List[str] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return not self.errors


@dataclass
class EvalResult:
    metrics: Metrics
    metrics_path: str
    subject_ids: List[str] = field(default_factory=list)
    predictions: Optional[np.ndarray] = None
    plot_paths: List[str] = field(default_factory=list)


@dataclass
class ExplainResult:
    importance: ImportanceMap
    csv_path: str
    ply_path: str
    plot_paths: List[str] = field(default_factory=list)


def _subject_id(volume_path: str) -> str:
    name = os.path.basename(volume_path)
    for ext in (".json", ".raw"):
        if name.endswith(ext):
            return name[:-len(ext)]
    return name


def read_targets(path: str) -> Dict[str, object]:
    """`subject_id,target` CSV; integer columns become class labels, anything else ages."""
    if not os.path.isfile(path):
        raise DataError(f"Targets file not found: {path}")
    table = pd.read_csv(path, dtype={"subject_id": str})
    missing = {"subject_id", "target"} - set(table.columns)
    if missing:
        raise DataError(f"{path}: targets table is missing columns {sorted(missing)}")
    cast = int if pd.api.types.is_integer_dtype(table["target"]) else float
    return {sid: cast(t) for sid, t in zip(table["subject_id"], table["target"])}


class ShapeAnalysisService:

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or RunConfig()

    # ── extract ──

    def extract(
        self,
        volume_paths: Sequence[str],
        out_dir: str,
        labels: Optional[Sequence[int]] = None,
        num_points: Optional[int] = None,
        targets_path: Optional[str] = None,
    ) -> ExtractResult:
        opts = self.config.extract
        labels = list(labels) if labels else list(opts.labels)
        n = num_points or opts.num_points
        if not labels:
            raise ParameterError("extract needs at least one structure label")
        if not volume_paths:
            raise ParameterError("extract needs at least one label volume")
        targets = read_targets(targets_path) if targets_path else {}

        root = RngState(opts.seed)
        samples = []
        for v, path in enumerate(volume_paths):
            vol = read_label_volume(path)
            sid = _subject_id(path)
            clouds = []
            for j, label in enumerate(labels):
                try:
                    boundary = extract_boundary(vol, label)
                except DataError as exc:
                    raise DataError(f"{path}: label {label}: {exc}")
                clouds.append(sample_uniform(boundary, n, root.spawn(v).spawn(j)))
                logger.info(f"extract {sid} label {label}: {len(boundary)} boundary voxels")
            samples.append(MultiStructureSample(sid, clouds, targets.get(sid)))

        manifest_path = write_dataset(samples, out_dir, binary=opts.binary)
        summary = generate_summary(
            command="extract",
            inputs={"volumes": len(volume_paths), "labels": labels, "points": n},
            output_files=[manifest_path],
            seed=opts.seed,
        )
        summary_path = save_summary(summary, out_dir)
        print_summary(summary)
        return ExtractResult(manifest_path, samples, summary, summary_path)

    # ── synth ──

    def synth(self, out_dir: str) -> SynthResult:
        spec = self.config.synth
        samples = synth_dataset(spec, threads=self.config.threads)
        manifest_path = write_dataset(samples, out_dir)
        with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        summary = generate_summary(
            command="synth",
            inputs={"subjects": spec.n_subjects, "structures": spec.num_structures, "points": spec.num_points, "task": spec.task},
            output_files=[manifest_path],
            seed=spec.seed,
        )
        summary_path = save_summary(summary, out_dir)
        print_summary(summary)
        return SynthResult(manifest_path, samples, summary, summary_path)

    # ── train ──

    def train(self, manifest_path: str, out_dir: str, plot: bool = False) -> TrainRunResult:
        os.makedirs(out_dir, exist_ok=True)
        handler = self._open_run_log(os.path.join(out_dir, "run.log"))
        try:
            return self._train(manifest_path, out_dir, plot)
        finally:
            logging.getLogger("neuropoints").removeHandler(handler)
            handler.close()

    def _open_run_log(self, path: str) -> logging.Handler:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# run started {datetime.now(timezone.utc).isoformat()}\n")
        handler = logging.FileHandler(path, mode="a", encoding="utf-8")
        handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
        pkg_logger = logging.getLogger("neuropoints")
        pkg_logger.addHandler(handler)
        if pkg_logger.getEffectiveLevel() > logging.INFO:
            pkg_logger.setLevel(logging.INFO)
        return handler

    def _train(self, manifest_path: str, out_dir: str, plot: bool) -> TrainRunResult:
        cfg = self.config.train
        dataset = load_dataset(manifest_path)
        m, n = check_uniform_shape(dataset)
        model_cfg = replace(self.config.model, num_structures=m, num_points=n)
        model = build_model(model_cfg)
        logger.info(f"model: {model_cfg.architecture} ({model_cfg.task}), {m} structures x {n} points, "
                    f"{sum(p.values.size for p in model.parameters())} parameters")

        splits = split_by_subject(dataset, cfg.split_ratios, cfg.seed)
        result = train(model, dataset, cfg, splits)

        log_path = save_epoch_log(result.log, os.path.join(out_dir, "epochs.csv"))
        splits_path = os.path.join(out_dir, "splits.json")
        with open(splits_path, "w", encoding="utf-8") as fh:
            json.dump(result.splits, fh, indent=2, sort_keys=True)
        extra = {
            "task": cfg.task,
            "normalize": cfg.normalize,
            "regression_classes": cfg.regression_classes,
            "splits": result.splits,
            "best_epoch": result.best_epoch,
            "train": cfg.to_dict(),
        }
        checkpoint_path = save_checkpoint(model, os.path.join(out_dir, "model.json"), extra)

        errors, test_metrics, metrics_path = [], None, None
        test_set = self._eval_samples(splits[2], cfg.normalize, cfg.task, cfg.regression_classes)
        if test_set:
            test_metrics = evaluate(model, test_set, cfg.task, cfg.eval_batch_size)
            metrics_path = save_report(
                generate_report(test_metrics, "test", {"best_epoch": result.best_epoch}),
                os.path.join(out_dir, "metrics_test.json"),
            )
        else:
            errors.append("test split is empty, no test metrics written")

        plot_paths = []
        if plot:
            from .visualizer import plot_training_log
            label = "val macro F1" if cfg.task == "classification" else "val MAE"
            plot_paths.append(plot_training_log(log_path, os.path.join(out_dir, "epochs.png"), label))

        results = {"best_epoch": result.best_epoch, "best_val_metric": result.best_metric}
        if test_metrics is not None:
            if cfg.task == "classification":
                results.update({"macro_f1": test_metrics.macro_f1, "accuracy": test_metrics.accuracy})
            else:
                results["mae"] = test_metrics.mae
        summary = generate_summary(
            command="train",
            inputs={"manifest": manifest_path, "model": model_cfg.architecture, "task": cfg.task, "epochs": cfg.epochs},
            output_files=[checkpoint_path, log_path, splits_path] + ([metrics_path] if metrics_path else []),
            seed=cfg.seed,
            errors=errors,
            results=results,
        )
        summary_path = save_summary(summary, out_dir)
        print_summary(summary)
        return TrainRunResult(
            checkpoint_path=checkpoint_path,
            log_path=log_path,
            splits_path=splits_path,
            metrics_path=metrics_path,
            best_epoch=result.best_epoch,
            best_metric=result.best_metric,
            test_metrics=test_metrics,
            plot_paths=plot_paths,
            summary=summary,
            summary_path=summary_path,
            errors=errors,
        )

    @staticmethod
    def _eval_samples(samples, normalize: str, task: str, classes) -> List[MultiStructureSample]:
        prepared = prepare_samples(samples, normalize)
        return _filter_classes(prepared, classes) if task == "regression" else prepared

    # ── eval ──

    def evaluate(
        self,
        checkpoint_path: str,
        manifest_path: str,
        out_path: str,
        split: str = "test",
        plot: bool = False,
    ) -> EvalResult:
        if split not in SPLITS:
            raise ParameterError(f"Unknown split '{split}'. Valid options: {list(SPLITS)}")
        model, extra = load_checkpoint(checkpoint_path)
        task = model.config.task
        subject_ids = None
        if split != "all":
            saved = extra.get("splits") or {}
            if split not in saved:
                raise DataError(f"{checkpoint_path}: checkpoint records no '{split}' split; use --split all")
            subject_ids = saved[split]
        samples = load_dataset(manifest_path, subject_ids)
        samples = self._eval_samples(samples, extra.get("normalize", "joint"), task, extra.get("regression_classes"))
        if not samples:
            raise DataError(f"{manifest_path}: no subjects of the '{split}' split found")

        metrics = evaluate(model, samples, task)
        preds, _ = predict(model, samples)
        path = save_report(generate_report(metrics, split), out_path)
        logger.info(f"eval: {len(samples)} subjects ({split}), headline {metrics.headline:.4f}")

        plot_paths = []
        if plot and task == "regression":
            from .visualizer import plot_regression
            targets = [s.target for s in samples]
            plot_paths.append(plot_regression(targets, preds, os.path.splitext(path)[0] + ".png"))
        return EvalResult(metrics, path, [s.subject_id for s in samples], preds, plot_paths)

    # ── explain ──

    def explain(
        self,
        checkpoint_path: str,
        manifest_path: str,
        out_path: str,
        subject_id: Optional[str] = None,
        structure: Optional[int] = None,
        K: Optional[int] = None,
        reference_class: Optional[int] = None,
        plot: bool = False,
    ) -> ExplainResult:
        opts = self.config.explain
        subject_id = subject_id or opts.subject_id
        structure = opts.structure if structure is None else structure
        K = opts.K if K is None else K
        reference_class = opts.reference_class if reference_class is None else reference_class
        if not subject_id:
            raise ParameterError("explain needs a subject id")

        model, extra = load_checkpoint(checkpoint_path)
        found = load_dataset(manifest_path, [subject_id])
        if not found:
            raise DataError(f"{manifest_path}: subject '{subject_id}' not found")
        sample, record = normalize_subject(found[0], extra.get("normalize", "joint"))

        imap = importance_map(model, sample, structure, K, reference_class, self.config.threads)
        cloud = sample.clouds[structure]
        original = PointCloud(record.denormalize(cloud.points, structure), cloud.structure_id)
        csv_path, ply_path = export_importance(imap, original, out_path)

        plot_paths = []
        if plot:
            from .visualizer import plot_importance
            plot_paths.append(plot_importance(original, imap, os.path.splitext(csv_path)[0] + ".png",
                                              title=f"{subject_id} structure {structure}"))
        return ExplainResult(imap, csv_path, ply_path, plot_paths)

    def run_from_yaml(self, command: str, yaml_path: str, **kwargs):
        self.config = RunConfig.from_file(yaml_path)
        handlers = {
            "extract": self.extract,
            "synth": self.synth,
            "train": self.train,
            "eval": self.evaluate,
            "explain": self.explain,
        }
        if command not in handlers:
            raise ParameterError(f"Unknown command '{command}'. Valid options: {sorted(handlers)}")
        return handlers[command](**kwargs)
