"""
Multi-structure point networks.

MSPNet runs one branch per structure:

    points -> input T-Net (3x3) -> feature MLP -> feature T-Net (k x k)
           -> post MLP -> per-point dropout (keep 0.3)

and concatenates the flattened per-point features of all branches into a final
MLP (dropout keep 0.7 between hidden layers, linear output). The PointNet
baseline concatenates all structures into one cloud, runs a single branch and
max-pools over points before the same kind of head.

All forward functions take clouds batched as [B, n, 3] (a single [n, 3] cloud
is promoted to B = 1) and a mode, "train" or "infer".
"""
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .diffcore import (
    Tensor, as_tensor, concat, dropout, flatten, matmul, max_over_points, reshape, scale,
)
from .errors import DimensionError, ParameterError, shape_str
from .layers import (
    CheckpointEntry, Dense, MLPLayer, MLPStack, SharedMLP, collect_entries, collect_parameters,
)
from .rng import RngState

ARCHITECTURES = ("mspnet", "pointnet")
TASKS = ("classification", "regression")

CloudInput = Union[Tensor, np.ndarray]


@dataclass
class ModelConfig:
    architecture: str = "mspnet"
    task: str = "classification"
    num_structures: int = 4
    num_points: int = 512
    num_classes: int = 2
    tnet_mlp: List[int] = field(default_factory=lambda: [64, 128, 256])
    tnet_fc: List[int] = field(default_factory=lambda: [128, 64])
    feature_mlp: List[int] = field(default_factory=lambda: [64, 64])
    post_mlp: List[int] = field(default_factory=lambda: [64, 128])
    head: List[int] = field(default_factory=lambda: [512, 256])
    point_keep: float = 0.3
    head_keep: float = 0.7
    use_tnets: bool = True
    # regression outputs are target_offset + target_scale · raw
    target_offset: float = 0.0
    target_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"Unknown architecture '{self.architecture}'. Valid options: {list(ARCHITECTURES)}")
        if self.task not in TASKS:
            raise ParameterError(f"Unknown task '{self.task}'. Valid options: {list(TASKS)}")
        if self.num_structures < 1 or self.num_points < 1:
            raise ParameterError("num_structures and num_points must be >= 1")
        if self.task == "classification" and self.num_classes < 2:
            raise ParameterError(f"classification needs num_classes >= 2, got {self.num_classes}")
        for name in ("tnet_mlp", "tnet_fc", "feature_mlp", "post_mlp"):
            if not getattr(self, name):
                raise ParameterError(f"{name} needs at least one layer width")
        for name in ("point_keep", "head_keep"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ParameterError(f"{name} must be in (0, 1], got {value}")
        if not self.target_scale > 0:
            raise ParameterError(f"target_scale must be > 0, got {self.target_scale}")

    @property
    def out_features(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    @property
    def feature_dim(self) -> int:
        return self.feature_mlp[-1]

    @property
    def point_feature_dim(self) -> int:
        return self.post_mlp[-1]

    @property
    def head_widths(self) -> List[int]:
        return list(self.head) + [self.out_features]

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ParameterError(f"Unknown model config keys {sorted(unknown)}. Valid keys: {sorted(valid)}")
        return cls(**d)


@dataclass
class ModelOutput:
    prediction: Tensor
    transforms: List[Tensor]
    point_features: List[Tensor]


# ── T-Net ─────────────────────────────────────────────────────────────────

class TNetParams:
    """
    Shared MLP -> max pool -> FC layers -> k_out x k_out matrix.
    The last layer starts at zero weights and identity bias, so a fresh T-Net
    outputs the identity for any input.
    """

    def __init__(self, k_out: int, mlp_widths: Sequence[int], fc_widths: Sequence[int], rng: RngState, name: str):
        self.k_out = k_out
        self.mlp = SharedMLP(k_out, mlp_widths, rng, f"{name}.mlp")
        self.fc = MLPStack(self.mlp.out_features, fc_widths, rng, f"{name}.fc")
        self.final = Dense(self.fc.out_features, k_out * k_out, rng, f"{name}.final")
        self.final.weight.values[...] = 0.0
        self.final.bias.values[...] = np.eye(k_out).reshape(-1)

    def parameters(self) -> List[Tensor]:
        return collect_parameters(self.mlp, self.fc, self.final)

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return collect_entries(self.mlp, self.fc, self.final)


def _batched(x: CloudInput) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"expected a cloud [n, d] or batch [B, n, d], got {shape_str(x.shape)}")
    return x


def tnet_forward(x: CloudInput, params: TNetParams, mode: str = "infer") -> Tensor:
    """[n, d] -> [d, d]; [B, n, d] -> [B, d, d]."""
    single = as_tensor(x).ndim == 2
    x = _batched(x)
    if x.shape[-1] != params.k_out:
        raise DimensionError(f"T-Net built for d={params.k_out}, got input {shape_str(x.shape)}")
    pooled = max_over_points(params.mlp(x, mode))
    matrix = params.final(params.fc(pooled, mode))
    d = params.k_out
    return reshape(matrix, (d, d) if single else (x.shape[0], d, d))


# ── Branch ────────────────────────────────────────────────────────────────

class BranchParams:

    def __init__(self, config: ModelConfig, rng: RngState, name: str):
        self.name = name
        self.point_keep = config.point_keep
        self.input_tnet = TNetParams(3, config.tnet_mlp, config.tnet_fc, rng, f"{name}.input_tnet")
        self.feature_mlp = SharedMLP(3, config.feature_mlp, rng, f"{name}.feature_mlp")
        k = self.feature_mlp.out_features
        self.feature_tnet = TNetParams(k, config.tnet_mlp, config.tnet_fc, rng, f"{name}.feature_tnet")
        self.post_mlp = SharedMLP(k, config.post_mlp, rng, f"{name}.post_mlp")

    def parameters(self) -> List[Tensor]:
        return collect_parameters(self.input_tnet, self.feature_mlp, self.feature_tnet, self.post_mlp)

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return collect_entries(self.input_tnet, self.feature_mlp, self.feature_tnet, self.post_mlp)


def branch_forward(
    P: CloudInput,
    params: BranchParams,
    mode: str = "infer",
    rng: Optional[RngState] = None,
    use_tnets: bool = True,
    point_dropout: bool = True,
):
    """
    Returns (features [B, n, k2], T_feat [B, k, k]). Without T-Nets, T_feat is None.
    """
    P = _batched(P)
    if P.shape[1] < 1 or P.shape[2] != 3:
        raise DimensionError(f"{params.name}: expected [B, n>=1, 3] points, got {shape_str(P.shape)}")
    T_feat = None
    if use_tnets:
        P = matmul(P, tnet_forward(P, params.input_tnet, mode))
    features = params.feature_mlp(P, mode)
    if use_tnets:
        T_feat = tnet_forward(features, params.feature_tnet, mode)
        features = matmul(features, T_feat)
    features = params.post_mlp(features, mode)
    if point_dropout:
        features = dropout(features, params.point_keep, mode, rng)
    return features, T_feat


# ── Head ──────────────────────────────────────────────────────────────────

class HeadParams:

    def __init__(self, in_features: int, widths: Sequence[int], keep: float, rng: RngState, name: str):
        self.keep = keep
        self.hidden: List[MLPLayer] = []
        for i, width in enumerate(widths[:-1]):
            self.hidden.append(MLPLayer(in_features, width, rng, f"{name}.{i}"))
            in_features = width
        self.out = Dense(in_features, widths[-1], rng, f"{name}.out")

    def parameters(self) -> List[Tensor]:
        return collect_parameters(*self.hidden, self.out)

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return collect_entries(*self.hidden, self.out)


def head_forward(x: Tensor, params: HeadParams, mode: str, rng: Optional[RngState]) -> Tensor:
    for layer in params.hidden:
        x = dropout(layer(x, mode), params.keep, mode, rng)
    return params.out(x)


# ── Models ────────────────────────────────────────────────────────────────

class PointCloudModel:
    """Common plumbing: config, parameter listing, checkpoint order, input checks."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def forward(self, clouds: Sequence[CloudInput], mode: str = "infer", rng: Optional[RngState] = None) -> ModelOutput:
        raise NotImplementedError

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        return collect_parameters(*self._blocks())

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return collect_entries(*self._blocks())

    def _blocks(self) -> list:
        raise NotImplementedError

    def _check_inputs(self, clouds: Sequence[CloudInput]) -> List[Tensor]:
        m = self.config.num_structures
        if len(clouds) != m:
            raise DimensionError(f"model has {m} branches, got {len(clouds)} clouds")
        batched = [_batched(c) for c in clouds]
        shapes = {c.shape[:2] for c in batched}
        if len(shapes) != 1:
            raise DimensionError(f"all structures need the same batch and point count, got {sorted(shapes)}")
        return batched

    def _finish(self, prediction: Tensor) -> Tensor:
        if self.config.task == "regression":
            values = reshape(prediction, (prediction.shape[0],))
            if self.config.target_scale != 1.0 or self.config.target_offset != 0.0:
                values = scale(values, self.config.target_scale) + self.config.target_offset
            return values
        return prediction


class MSPNet(PointCloudModel):

    def __init__(self, config: ModelConfig, rng: Optional[RngState] = None):
        super().__init__(config)
        rng = rng if rng is not None else RngState(config.seed)
        self.branches = [BranchParams(config, rng, f"branch{j}") for j in range(config.num_structures)]
        head_in = config.num_structures * config.num_points * config.point_feature_dim
        self.head = HeadParams(head_in, config.head_widths, config.head_keep, rng, "head")

    def _blocks(self) -> list:
        return self.branches + [self.head]

    def forward(self, clouds, mode="infer", rng=None) -> ModelOutput:
        return mspnet_forward(clouds, self, mode, rng)

    __call__ = forward


class PointNet(PointCloudModel):

    def __init__(self, config: ModelConfig, rng: Optional[RngState] = None):
        super().__init__(config)
        rng = rng if rng is not None else RngState(config.seed)
        self.branch = BranchParams(config, rng, "branch0")
        self.head = HeadParams(config.point_feature_dim, config.head_widths, config.head_keep, rng, "head")

    def _blocks(self) -> list:
        return [self.branch, self.head]

    def forward(self, clouds, mode="infer", rng=None) -> ModelOutput:
        return pointnet_forward(clouds, self, mode, rng)

    __call__ = forward


def mspnet_forward(S: Sequence[CloudInput], params: MSPNet, mode: str = "infer", rng: Optional[RngState] = None) -> ModelOutput:
    clouds = params._check_inputs(S)
    if clouds[0].shape[1] != params.config.num_points:
        raise DimensionError(f"MSPNet built for n={params.config.num_points} points, got {clouds[0].shape[1]}")
    features, transforms = [], []
    for cloud, branch in zip(clouds, params.branches):
        f, T = branch_forward(cloud, branch, mode, rng, use_tnets=params.config.use_tnets)
        features.append(f)
        if T is not None:
            transforms.append(T)
    merged = concat([flatten(f) for f in features], axis=1)
    prediction = head_forward(merged, params.head, mode, rng)
    return ModelOutput(params._finish(prediction), transforms, features)


def pointnet_forward(S: Sequence[CloudInput], params: PointNet, mode: str = "infer", rng: Optional[RngState] = None) -> ModelOutput:
    clouds = params._check_inputs(S)
    merged = concat(clouds, axis=1)
    f, T = branch_forward(merged, params.branch, mode, rng, use_tnets=params.config.use_tnets, point_dropout=False)
    prediction = head_forward(max_over_points(f), params.head, mode, rng)
    return ModelOutput(params._finish(prediction), [T] if T is not None else [], [f])


def build_model(config: ModelConfig, rng: Optional[RngState] = None) -> PointCloudModel:
    if config.architecture == "pointnet":
        return PointNet(config, rng)
    return MSPNet(config, rng)
