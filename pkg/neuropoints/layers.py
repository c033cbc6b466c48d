"""
Parameterized building blocks shared by the point-cloud networks.

A layer owns its Tensors and exposes them two ways: `parameters()` for the
optimizer and `checkpoint_entries()` for serialization. Checkpoint order within
a layer is weight, bias, then batch-norm gamma, beta, running mean, running var.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import BatchNormState, Tensor, add, batch_norm, matmul, relu, reshape
from .errors import DimensionError, shape_str
from .rng import RngState

# (name, owner, attribute); getattr(owner, attribute) is a Tensor or an ndarray
CheckpointEntry = Tuple[str, object, str]


class Dense:

    def __init__(self, in_features: int, out_features: int, rng: RngState, name: str):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        # He initialization for ReLU stacks
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"{self.name}: expected {self.in_features} input features, got {shape_str(x.shape)}")
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return [(self.weight.name, self, "weight"), (self.bias.name, self, "bias")]


class MLPLayer:
    """Dense -> batch norm -> ReLU on a [rows, features] tensor."""

    def __init__(self, in_features: int, out_features: int, rng: RngState, name: str):
        self.name = name
        self.dense = Dense(in_features, out_features, rng, f"{name}.dense")
        self.bn = BatchNormState(out_features)
        self.bn.gamma.name = f"{name}.bn.gamma"
        self.bn.beta.name = f"{name}.bn.beta"

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return relu(batch_norm(self.dense(x), self.bn, mode))

    def parameters(self) -> List[Tensor]:
        return self.dense.parameters() + [self.bn.gamma, self.bn.beta]

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return self.dense.checkpoint_entries() + [
            (self.bn.gamma.name, self.bn, "gamma"),
            (self.bn.beta.name, self.bn, "beta"),
            (f"{self.name}.bn.running_mean", self.bn, "running_mean"),
            (f"{self.name}.bn.running_var", self.bn, "running_var"),
        ]


class MLPStack:
    """Consecutive MLPLayers on [batch, features] rows."""

    def __init__(self, in_features: int, widths: Sequence[int], rng: RngState, name: str):
        self.name = name
        self.layers: List[MLPLayer] = []
        for i, width in enumerate(widths):
            self.layers.append(MLPLayer(in_features, width, rng, f"{name}.{i}"))
            in_features = width
        self.out_features = in_features

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def checkpoint_entries(self) -> List[CheckpointEntry]:
        return [e for layer in self.layers for e in layer.checkpoint_entries()]


class SharedMLP(MLPStack):
    """
    The same MLP applied to every point of a [B, n, d] cloud.

    Points of all samples are pooled into one [B·n, d] batch, so batch-norm
    statistics are per feature across points and samples.
    """

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if x.ndim != 3:
            raise DimensionError(f"{self.name}: expected [B, n, d], got {shape_str(x.shape)}")
        batch, n, d = x.shape
        rows = super().__call__(reshape(x, (batch * n, d)), mode)
        return reshape(rows, (batch, n, self.out_features))


def collect_parameters(*blocks: Optional[object]) -> List[Tensor]:
    return [p for b in blocks if b is not None for p in b.parameters()]


def collect_entries(*blocks: Optional[object]) -> List[CheckpointEntry]:
    return [e for b in blocks if b is not None for e in b.checkpoint_entries()]
