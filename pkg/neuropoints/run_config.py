"""
Run configuration for the command-line pipeline.

A config file (YAML, or JSON which YAML reads unchanged) holds optional
sections mirroring the module configs:

    seed: 7
    threads: 1
    task: classification
    model:   {architecture: mspnet, head: [512, 256], ...}   # ModelConfig
    train:   {epochs: 50, batch_size: 16, ...}               # TrainConfig
    synth:   {n_subjects: 500, num_structures: 4, ...}       # SynthSpec
    extract: {labels: [17, 53], num_points: 512}
    explain: {subject_id: subj0001, structure: 0, K: 32}

Precedence is command-line flags > config file > dataclass defaults. The
top-level seed and task are copied into every section that does not set its
own; a seed given on the command line replaces all of them.
"""
import copy
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import yaml

from .errors import DataError, ParameterError
from .mspnet import ModelConfig
from .occlusion import DEFAULT_K
from .shapedata import SynthSpec
from .training import TrainConfig

SECTIONS = ("model", "train", "synth", "extract", "explain")
TOP_LEVEL = ("seed", "threads", "task")


def _check_keys(cls, d: Dict, what: str) -> None:
    valid = {f.name for f in fields(cls)}
    unknown = set(d) - valid
    if unknown:
        raise ParameterError(f"Unknown {what} keys {sorted(unknown)}. Valid keys: {sorted(valid)}")


@dataclass
class ExtractOptions:
    labels: List[int] = field(default_factory=list)
    num_points: int = 512
    binary: bool = False
    seed: int = 0

    def __post_init__(self):
        self.labels = [int(v) for v in self.labels]
        if self.num_points < 1:
            raise ParameterError(f"num_points must be >= 1, got {self.num_points}")


@dataclass
class ExplainOptions:
    subject_id: Optional[str] = None
    structure: int = 0
    K: int = DEFAULT_K
    reference_class: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.structure < 0 or self.K < 0:
            raise ParameterError(f"structure and K must be >= 0, got {self.structure} and {self.K}")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    extract: ExtractOptions = field(default_factory=ExtractOptions)
    explain: ExplainOptions = field(default_factory=ExplainOptions)

    def __post_init__(self):
        if self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_dict(cls, d: Optional[Dict] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Build from a parsed config file plus flag overrides. Override keys are
        either top-level (`seed`, `threads`, `task`) or dotted (`train.epochs`);
        None values mean "flag not given".
        """
        d = copy.deepcopy(d or {})
        if not isinstance(d, dict):
            raise ParameterError("config file must hold a mapping at the top level")
        unknown = set(d) - set(SECTIONS) - set(TOP_LEVEL)
        if unknown:
            raise ParameterError(f"Unknown config keys {sorted(unknown)}. Valid keys: {sorted(SECTIONS + TOP_LEVEL)}")

        sections = {name: dict(d.get(name) or {}) for name in SECTIONS}
        top = {k: d[k] for k in TOP_LEVEL if k in d}
        explicit_seed = False
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise ParameterError(f"Unknown config section '{section}' in override '{key}'")
                sections[section][name] = value
            elif key in TOP_LEVEL:
                top[key] = value
                explicit_seed = explicit_seed or key == "seed"
            else:
                raise ParameterError(f"Unknown override '{key}'")

        seed = int(top.get("seed", 0))
        for name, section in sections.items():
            if explicit_seed:
                section["seed"] = seed
            else:
                section.setdefault("seed", seed)
        task = top.get("task") or sections["model"].get("task") or sections["train"].get("task")
        if task:
            for name in ("model", "train", "synth"):
                if "task" in top or "task" not in sections[name]:
                    sections[name]["task"] = task
        if sections["model"].get("task", "classification") != sections["train"].get("task", "classification"):
            raise ParameterError(
                f"model task '{sections['model']['task']}' and train task '{sections['train']['task']}' disagree"
            )

        _check_keys(ExtractOptions, sections["extract"], "extract")
        _check_keys(ExplainOptions, sections["explain"], "explain")
        return cls(
            seed=seed,
            threads=int(top.get("threads", 1)),
            model=ModelConfig.from_dict(sections["model"]),
            train=TrainConfig.from_dict(sections["train"]),
            synth=SynthSpec.from_dict(sections["synth"]),
            extract=ExtractOptions(**sections["extract"]),
            explain=ExplainOptions(**sections["explain"]),
        )

    @classmethod
    def from_file(cls, path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        return cls.from_dict(load_config_file(path) if path else {}, overrides)

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "extract": asdict(self.extract),
            "explain": asdict(self.explain),
        }


def load_config_file(path: str) -> Dict:
    if not os.path.isfile(path):
        raise DataError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ParameterError(f"{path}: cannot parse config ({exc})")
    return cfg or {}
