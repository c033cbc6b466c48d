import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd
import pytest

from neuropoints.mspnet import ModelConfig, PointCloudModel, build_model
from neuropoints.rng import RngState
from neuropoints.run_config import RunConfig
from neuropoints.shapedata import MultiStructureSample, SynthSpec, synth_dataset
from neuropoints.training import prepare_samples, split_by_subject, train

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
BENCHMARK_BUDGET_S = 15 * 60


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long synthetic training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def toy_config(**overrides) -> ModelConfig:
    params = dict(
        architecture="mspnet",
        task="classification",
        num_structures=2,
        num_points=16,
        num_classes=2,
        tnet_mlp=[8, 16],
        tnet_fc=[8],
        feature_mlp=[8, 8],
        post_mlp=[8, 8],
        head=[32, 16],
        seed=0,
    )
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def model_config() -> ModelConfig:
    return toy_config()


@pytest.fixture
def toy_clouds():
    rng = RngState(11)
    return [rng.normal(size=(4, 16, 3)) for _ in range(2)]


@pytest.fixture
def small_spec() -> SynthSpec:
    return SynthSpec(n_subjects=20, num_structures=2, num_points=16, seed=3)


@pytest.fixture
def small_dataset(small_spec):
    return synth_dataset(small_spec)


def randomize_tnets(model, seed: int = 5, scale: float = 0.1) -> None:
    """Fresh T-Nets output the identity; give their last layers random weights."""
    rng = RngState(seed)
    branches = model.branches if hasattr(model, "branches") else [model.branch]
    for b in branches:
        for tnet in (b.input_tnet, b.feature_tnet):
            tnet.final.weight.values[...] = rng.normal(0.0, scale, tnet.final.weight.shape)


def random_orthogonal(k: int, rng: RngState) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(k, k)))
    return q * np.sign(np.diag(r))


def jitter_offsets(model, seed: int = 7, scale: float = 0.1) -> None:
    """Move biases, batch-norm shifts and running statistics off their fresh values."""
    rng = RngState(seed)
    for p in model.parameters():
        if p.name and p.name.endswith(("bias", "beta")):
            p.values += rng.uniform(-scale, scale, p.shape)
    for _, owner, attr in model.checkpoint_entries():
        if attr == "running_mean":
            owner.running_mean = rng.normal(0.0, scale, owner.running_mean.shape)
        elif attr == "running_var":
            owner.running_var = rng.uniform(0.5, 1.5, owner.running_var.shape)


@dataclass
class BenchmarkRun:
    model: PointCloudModel
    log: pd.DataFrame
    test_set: List[MultiStructureSample]
    seconds: float


def run_benchmark(config_name: str, **model_overrides) -> BenchmarkRun:
    """Synthesize, split and train one of the configs/ recipes; seconds covers all of it."""
    start = time.perf_counter()
    cfg = RunConfig.from_file(str(CONFIG_DIR / config_name))
    data = synth_dataset(cfg.synth)
    model = build_model(replace(cfg.model, **model_overrides))
    splits = split_by_subject(data, cfg.train.split_ratios, cfg.train.seed)
    result = train(model, data, cfg.train, splits)
    seconds = time.perf_counter() - start
    return BenchmarkRun(model, result.log, prepare_samples(splits[2], cfg.train.normalize), seconds)


@pytest.fixture(scope="session")
def dent_benchmark() -> BenchmarkRun:
    return run_benchmark("dent_benchmark.yml")
