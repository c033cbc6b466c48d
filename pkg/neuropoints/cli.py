"""
Command-line entry point: `python -m neuropoints <command> ...`.

    extract   label volumes -> boundary point clouds + manifest
    synth     synthetic ellipsoid corpus -> point clouds + manifest
    train     manifest -> checkpoint, epoch log, splits, test metrics
    eval      checkpoint + manifest -> metrics JSON
    explain   checkpoint + subject -> occlusion importance CSV + PLY

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from .errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, NeuroPointsError
from .run_config import RunConfig, load_config_file
from .service import SPLITS, ShapeAnalysisService

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for data errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run config (flags override it)")
    p.add_argument("--seed", type=int, help="Base seed for every stochastic step")
    p.add_argument("--threads", type=int, help="Worker cap (default 1, bit-reproducible at any value)")
    p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    p.add_argument("--log-file", help="Also write the log to this file")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="neuropoints", description="Multi-structure point-cloud shape analysis")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("extract", help="Boundary point clouds from label volumes")
    _common(p)
    p.add_argument("volumes", nargs="+", help="Label volumes (<name>.json header + <name>.raw)")
    p.add_argument("-l", "--labels", type=int, nargs="+", help="Structure labels, one branch each")
    p.add_argument("-n", "--num-points", type=int, help="Points sampled per structure")
    p.add_argument("-o", "--out", required=True, help="Output directory")
    p.add_argument("--targets", help="CSV with subject_id,target columns")
    p.add_argument("--binary", action="store_true", default=None, help="Write binary clouds")

    p = sub.add_parser("synth", help="Synthetic ellipsoid corpus")
    _common(p)
    p.add_argument("--spec", help="YAML or JSON synth spec")
    p.add_argument("-o", "--out", required=True, help="Output directory")
    p.add_argument("--subjects", type=int, help="Number of subjects")
    p.add_argument("--structures", type=int, help="Structures per subject")
    p.add_argument("-n", "--num-points", type=int, help="Points per structure")
    p.add_argument("--task", choices=["classification", "regression"])

    p = sub.add_parser("train", help="Train a model on a manifest")
    _common(p)
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True, help="Run directory")
    p.add_argument("--model", choices=["mspnet", "pointnet"], help="Architecture")
    p.add_argument("--task", choices=["classification", "regression"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--reg-weight", type=float, help="Weight of the transform regularizer")
    p.add_argument("--no-tnets", action="store_true", help="Run without transformer networks")
    p.add_argument("--plot", action="store_true", help="Also write epochs.png")

    p = sub.add_parser("eval", help="Metrics of a checkpoint on a split")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True, help="Metrics JSON path")
    p.add_argument("--split", choices=list(SPLITS), default="test")
    p.add_argument("--plot", action="store_true", help="Predicted-vs-true plot (regression)")

    p = sub.add_parser("explain", help="Occlusion importance for one subject and structure")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("-s", "--subject", help="Subject id")
    p.add_argument("--structure", type=int, help="Structure (branch) index")
    p.add_argument("-K", type=int, dest="K", help="Neighbours occluded with each point")
    p.add_argument("--class", type=int, dest="reference_class", help="Reference class (default: predicted)")
    p.add_argument("-o", "--out", required=True, help="Output stem (.csv and .ply are written)")
    p.add_argument("--plot", action="store_true", help="Also write a PNG scatter")
    return parser


def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)


def _overrides(args: argparse.Namespace) -> Dict:
    get = lambda name: getattr(args, name, None)
    return {
        "seed": get("seed"),
        "threads": get("threads"),
        "task": get("task"),
        "extract.labels": get("labels"),
        "extract.num_points": get("num_points") if args.command == "extract" else None,
        "extract.binary": get("binary"),
        "synth.n_subjects": get("subjects"),
        "synth.num_structures": get("structures"),
        "synth.num_points": get("num_points") if args.command == "synth" else None,
        "model.architecture": get("model"),
        "model.use_tnets": False if get("no_tnets") else None,
        "train.epochs": get("epochs"),
        "train.batch_size": get("batch_size"),
        "train.learning_rate": get("lr"),
        "train.reg_weight": get("reg_weight"),
        "explain.subject_id": get("subject"),
        "explain.structure": get("structure"),
        "explain.K": get("K"),
        "explain.reference_class": get("reference_class"),
    }


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config_file(args.config) if args.config else {}
    if getattr(args, "spec", None):
        cfg.setdefault("synth", {})
        cfg["synth"] = {**(cfg["synth"] or {}), **load_config_file(args.spec)}
    return RunConfig.from_dict(cfg, _overrides(args))


def run(args: argparse.Namespace) -> None:
    service = ShapeAnalysisService(load_run_config(args))
    if args.command == "extract":
        service.extract(args.volumes, args.out, targets_path=args.targets)
    elif args.command == "synth":
        service.synth(args.out)
    elif args.command == "train":
        service.train(args.manifest, args.out, plot=args.plot)
    elif args.command == "eval":
        res = service.evaluate(args.checkpoint, args.manifest, args.out, split=args.split, plot=args.plot)
        print(f"{res.metrics.task}: {len(res.subject_ids)} subjects, headline {res.metrics.headline:.4f} -> {res.metrics_path}")
    elif args.command == "explain":
        res = service.explain(args.checkpoint, args.manifest, args.out, plot=args.plot)
        print(f"importance: class {res.importance.reference_class}, K={res.importance.k} -> {res.csv_path}, {res.ply_path}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.log_file)
    try:
        run(args)
    except NeuroPointsError as exc:
        logger.error(str(exc))
        return exc.exit_code
    except OSError as exc:
        logger.error(str(exc))
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
