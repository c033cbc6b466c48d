"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the point-cloud networks need are provided. Every op builds
a node holding its parents and a gradient function; `backward` walks the graph
in reverse topological order and sums the contributions each node receives.
Inputs with requires_grad=False are never written to.
"""
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, DimensionError, ParameterError, shape_str
from .rng import RngState

MODES = ("train", "infer")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

ArrayLike = Union[np.ndarray, Sequence, float, int]


class Tensor:

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={shape_str(self.shape)}, requires_grad={self.requires_grad})"


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: Tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got '{mode}'")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ── Core ops ──────────────────────────────────────────────────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [r, s]·[s, t], or batched [B, r, s]·[B, s, t]."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(
            f"matmul shape mismatch: {shape_str(a.shape)} and {shape_str(b.shape)}"
        )

    def grad_fn(g):
        return g @ _swap(b.values), _swap(a.values) @ g

    return _node(a.values @ b.values, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may broadcast over a's leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"add shape mismatch: {shape_str(a.shape)} and {shape_str(b.shape)}")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.values + b.values, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {shape_str(a.shape)} and {shape_str(b.shape)}")

    def grad_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _node(a.values * b.values, (a, b), grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _node(x.values * factor, (x,), lambda g: (g * factor,))


def reduce_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {shape_str(x.shape)} into {tuple(shape)}")
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Keep the leading (batch) axis, flatten the rest row-major."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(shape_str(t.shape) for t in tensors)
        raise DimensionError(f"concat shape mismatch along axis {axis}: {shapes}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tensors, grad_fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # gradient at exactly 0 is 0
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


@dataclass(eq=False)
class BatchNormState:
    """Per-feature affine parameters plus running statistics."""
    features: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    gamma: Tensor = field(init=False)
    beta: Tensor = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gamma = Tensor(np.ones(self.features), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(self.features), requires_grad=True, name="beta")
        self.running_mean = np.zeros(self.features)
        self.running_var = np.ones(self.features)


def batch_norm(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """
    Batch normalization over axis 0 of a [batch, features] tensor.

    train: normalizes with the biased batch variance and folds the batch
    statistics into the running ones (running = momentum·running + (1-momentum)·batch).
    infer: normalizes with the running statistics.
    """
    x = as_tensor(x)
    _check_mode(mode)
    if x.ndim != 2 or x.shape[1] != state.features:
        raise DimensionError(
            f"batch_norm expects [batch, {state.features}], got {shape_str(x.shape)}"
        )
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise DimensionError("batch_norm in train mode needs a batch of at least 2 (variance undefined)")
        mean = x.values.mean(axis=0)
        var = x.values.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.values - mean) * inv_std
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var

        def grad_fn(g):
            dxhat = g * gamma.values
            dx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.values - state.running_mean) * inv_std

        def grad_fn(g):
            return g * gamma.values * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gamma.values + beta.values, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, keep_prob: float, mode: str, rng: Optional[RngState]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/keep_prob, infer mode is identity."""
    x = as_tensor(x)
    _check_mode(mode)
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode == "infer" or keep_prob == 1.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs an RngState")
    mask = (rng.uniform(size=x.shape) < keep_prob) / keep_prob
    return _node(x.values * mask, (x,), lambda g: (g * mask,))


def max_over_points(x: Tensor) -> Tensor:
    """
    Column-wise maximum over the point axis: [n, k] -> [k], [B, n, k] -> [B, k].
    The gradient goes to the first row holding the maximum.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise DimensionError(f"max_over_points expects [n, k] or [B, n, k], got {shape_str(x.shape)}")
    if x.shape[-2] == 0:
        raise DataError("max_over_points on an empty point set")
    idx = np.argmax(x.values, axis=-2)
    out = np.take_along_axis(x.values, idx[..., None, :], axis=-2)[..., 0, :]

    def grad_fn(g):
        dx = np.zeros_like(x.values)
        np.put_along_axis(dx, idx[..., None, :], g[..., None, :], axis=-2)
        return (dx,)

    return _node(out, (x,), grad_fn)


# ── Losses ────────────────────────────────────────────────────────────────

def softmax_cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {shape_str(logits.shape)} vs labels {shape_str(labels.shape)}"
        )
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(f"labels must be in [0, {n_classes}), got {labels.tolist()}")
    batch = logits.shape[0]
    rows = np.arange(batch)
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(log_norm - shifted[rows, labels])
    probs = np.exp(shifted - log_norm[:, None])

    def grad_fn(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / batch),)

    return _node(np.asarray(loss), (logits,), grad_fn)


def mse(pred: Tensor, target: ArrayLike) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse length mismatch: pred {shape_str(pred.shape)} vs target {shape_str(target.shape)}")
    diff = pred.values - target
    batch = max(diff.size, 1)
    return _node(np.asarray(np.mean(diff ** 2)), (pred,), lambda g: (2.0 * diff / batch * g,))


def ortho_regularizer(T: Tensor) -> Tensor:
    """
    ||I - T·Tᵀ||²_F for a [k, k] matrix; the batch mean for a [B, k, k] stack.
    Gradient is 4·(T·Tᵀ - I)·T.
    """
    T = as_tensor(T)
    if T.ndim not in (2, 3) or T.shape[-1] != T.shape[-2]:
        raise DimensionError(f"ortho_regularizer needs square matrices, got {shape_str(T.shape)}")
    k = T.shape[-1]
    gram = T.values @ _swap(T.values) - np.eye(k)
    per_matrix = (gram ** 2).sum(axis=(-2, -1))
    batch = per_matrix.size

    def grad_fn(g):
        return (4.0 * (gram @ T.values) * (g / batch),)

    return _node(np.asarray(per_matrix.mean()), (T,), grad_fn)


# ── Graph traversal ───────────────────────────────────────────────────────

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """
    Propagate d(root)/d(node) through the graph.

    Leaves accumulate into .grad across calls; intermediate nodes hold the
    gradient of the latest call. A tensor consumed twice receives the sum.
    """
    if root.values.size != 1:
        raise DimensionError(f"backward needs a scalar root, got {shape_str(root.shape)}")
    pending = {id(root): np.ones_like(root.values)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ── Finite-difference verification ────────────────────────────────────────

def numerical_gradient(
    loss_fn: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of loss_fn w.r.t. tensor, entry by entry (in place, restored)."""
    flat = tensor.values.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn()
        flat[i] = orig - h
        minus = loss_fn()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _steps(h: Union[float, Sequence[float]]) -> Tuple[float, ...]:
    return (float(h),) if np.isscalar(h) else tuple(float(s) for s in h)


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: Union[float, Sequence[float]] = 1e-5,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    rng: Optional[RngState] = None,
    recheck_above: float = 1e-6,
) -> float:
    """
    Worst relative error between backward() and central differences over params.

    build_loss must rebuild the graph from the current parameter values on
    every call. With max_entries, each parameter is checked at that many
    randomly chosen entries instead of all of them. h may be a sequence of
    step sizes: entries whose error exceeds recheck_above at one step are
    recomputed at the next and keep the smaller error.
    """
    steps = _steps(h)
    for p in params:
        p.zero_grad()
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        size = p.values.size
        if max_entries is not None and size > max_entries:
            picker = rng if rng is not None else RngState(0)
            idx = np.sort(picker.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        expected = a.reshape(-1)[idx]
        err = np.full(idx.size, np.inf)
        todo = np.arange(idx.size)
        for step in steps:
            numeric = numerical_gradient(lambda: build_loss().item(), p, h=step, indices=idx[todo])
            err[todo] = np.minimum(err[todo], relative_error(expected[todo], numeric.reshape(-1)[idx[todo]], floor))
            todo = todo[err[todo] > recheck_above]
            if todo.size == 0:
                break
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def directional_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: Union[float, Sequence[float]] = 1e-5,
    floor: float = 1e-8,
    directions: int = 2,
    rng: Optional[RngState] = None,
    recheck_above: float = 1e-6,
) -> float:
    """
    Worst relative error between the analytic and the central-difference
    derivative along random unit directions, one parameter tensor at a time.
    Every entry of every tensor moves in each evaluation, at a cost of
    2 * directions losses per tensor. Step sizes behave as in gradient_check.
    """
    steps = _steps(h)
    rng = rng if rng is not None else RngState(0)
    for p in params:
        p.zero_grad()
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        base = p.values.copy()
        for _ in range(directions):
            v = rng.normal(size=p.shape)
            v /= np.linalg.norm(v)
            expected = np.array([np.sum(a * v)])
            err = np.inf
            for step in steps:
                p.values[...] = base + step * v
                plus = build_loss().item()
                p.values[...] = base - step * v
                minus = build_loss().item()
                p.values[...] = base
                numeric = np.array([(plus - minus) / (2.0 * step)])
                err = min(err, float(relative_error(expected, numeric, floor)[0]))
                if err <= recheck_above:
                    break
            worst = max(worst, err)
    return worst
