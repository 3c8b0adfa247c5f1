"""Per-grid scoring ConvNets and the energy built on top of them.

A model at one grid is the exponential tilting of a reference density by a
bottom-up ConvNet score ``f``.  With a Gaussian reference of width ``sigma``
the energy is ``|Y|^2 / (2 sigma^2) - f(Y)``; with a uniform reference it is
just ``-f(Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .tensor import Node, RunningStats, ShapeError, Tape

INIT_STD = 0.01


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None  # None -> kernel // 2

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_features: int = 1


@dataclass(frozen=True)
class SumHead:
    """Parameter-free head that sums every activation of an example."""


Layer = Union[Conv, BatchNorm, ReLU, FullyConnected, SumHead]


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)

    def shape_chain(self) -> list[tuple]:
        """Activation shape after every layer, validating the whole stack."""
        if not self.layers:
            raise SpecError("empty layer list")
        shape = tuple(self.input_shape)
        chain = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv after a flattening layer")
                c, h, w = shape
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: input {h}x{w} too small for {layer}")
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, FullyConnected):
                shape = (layer.out_features,)
            elif isinstance(layer, SumHead):
                shape = (1,)
            elif isinstance(layer, BatchNorm) and len(shape) != 3:
                raise SpecError(f"layer {i}: batchnorm needs a (C, H, W) activation")
            chain.append(shape)
        if chain[-1] != (1,):
            raise SpecError(f"network must end in a scalar score, ends in {chain[-1]}")
        return chain

    @property
    def head_index(self) -> int:
        """Index of the final scoring layer (features are taken just before it)."""
        return len(self.layers) - 1

    def feature_shape(self) -> tuple:
        chain = self.shape_chain()
        return chain[-2] if len(chain) > 1 else tuple(self.input_shape)


_PRESETS = {
    1: [(96, 5, 2), (128, 3, 1), (256, 3, 1)],
    2: [(96, 5, 2), (128, 3, 1), (256, 3, 1), (512, 3, 1)],
    3: [(96, 5, 2), (128, 3, 2), (256, 3, 1)],
}


def preset_spec(grid: int, input_size: tuple, channel_scale: float = 1.0) -> NetworkSpec:
    """Architecture for grid 1, 2 or 3: conv-BN-ReLU blocks plus a 1-output FC layer."""
    if grid not in _PRESETS:
        raise SpecError(f"no preset for grid {grid}; expected 1, 2 or 3")
    layers = []
    for channels, k, s in _PRESETS[grid]:
        layers += [Conv(max(1, int(round(channels * channel_scale))), k, s), BatchNorm(), ReLU()]
    layers.append(FullyConnected(1))
    spec = NetworkSpec(tuple(layers), tuple(input_size))
    spec.shape_chain()
    return spec


@dataclass
class ParamSet:
    """Learnable tensors of one grid's network, keyed ``"<layer>.<name>"``."""

    spec: NetworkSpec
    grid: int = 0
    tensors: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)  # layer index -> RunningStats

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, self.grid,
                        {k: v.copy() for k, v in self.tensors.items()},
                        {k: RunningStats(s.mean.copy(), s.var.copy()) for k, s in self.stats.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.spec, self.grid,
                        {k: v.astype(dtype) for k, v in self.tensors.items()},
                        {k: RunningStats(s.mean.astype(dtype), s.var.astype(dtype))
                         for k, s in self.stats.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype if self.tensors else np.float32

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(spec: NetworkSpec, seed=0, grid: int = 0, dtype=np.float32) -> ParamSet:
    """Weights ~ N(0, 0.01^2) truncated at two standard deviations; biases 0, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    chain = spec.shape_chain()
    shape = tuple(spec.input_shape)
    tensors, stats = {}, {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            wshape = (layer.out_channels, shape[0], layer.kernel, layer.kernel)
            tensors[f"{i}.weight"] = _truncated_normal(rng, wshape, dtype)
            tensors[f"{i}.bias"] = np.zeros(layer.out_channels, dtype=dtype)
        elif isinstance(layer, FullyConnected):
            d = int(np.prod(shape))
            tensors[f"{i}.weight"] = _truncated_normal(rng, (d, layer.out_features), dtype)
            tensors[f"{i}.bias"] = np.zeros(layer.out_features, dtype=dtype)
        elif isinstance(layer, BatchNorm):
            c = shape[0]
            tensors[f"{i}.gamma"] = np.ones(c, dtype=dtype)
            tensors[f"{i}.beta"] = np.zeros(c, dtype=dtype)
            stats[i] = RunningStats.fresh(c, dtype)
        shape = chain[i]
    return ParamSet(spec, grid, tensors, stats)


def _truncated_normal(rng, shape, dtype):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(x) > 2
    return (INIT_STD * x).astype(dtype)


@dataclass(frozen=True)
class ReferenceDistribution:
    kind: str = "gaussian"
    sigma: float = 1.0
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kind == "uniform" and not self.low < self.high:
            raise ValueError("uniform bounds must be ordered")

    def log_density_term(self, Y: np.ndarray) -> np.ndarray:
        """Per-example ``-log p0(Y)`` up to a constant."""
        if self.kind == "uniform":
            return np.zeros(Y.shape[0], dtype=Y.dtype)
        flat = Y.reshape(Y.shape[0], -1)
        return (flat * flat).sum(axis=1) / (2 * self.sigma ** 2)

    def grad_term(self, Y: np.ndarray) -> np.ndarray:
        if self.kind == "uniform":
            return np.zeros_like(Y)
        return Y / self.sigma ** 2


GAUSSIAN = ReferenceDistribution()


# -- forward ----------------------------------------------------------------


def forward(params: ParamSet, tape: Tape, x: Node, mode: str = "eval",
            update_stats: bool = False, param_nodes: dict | None = None,
            upto: int | None = None) -> Node:
    """Record the network on ``tape``; returns the (N, 1) score node.

    ``param_nodes`` maps tensor keys to existing nodes (e.g. variables whose
    gradient is wanted); missing keys are added as constants.  ``upto`` stops
    before that layer index, which is how feature maps are read out.
    """
    spec = params.spec
    if tuple(x.value.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.value.shape[1:]} does not match network input {spec.input_shape}")
    nodes = param_nodes if param_nodes is not None else {}

    def p(key):
        if key not in nodes:
            nodes[key] = tape.constant(params.tensors[key])
        return nodes[key]

    h = x
    stop = len(spec.layers) if upto is None else upto
    for i, layer in enumerate(spec.layers[:stop]):
        if isinstance(layer, Conv):
            h = tape.conv2d(h, p(f"{i}.weight"), p(f"{i}.bias"), layer.stride, layer.pad)
        elif isinstance(layer, BatchNorm):
            h = tape.batchnorm(h, p(f"{i}.gamma"), p(f"{i}.beta"), params.stats[i],
                               mode=mode, update_stats=update_stats)
        elif isinstance(layer, ReLU):
            h = tape.relu(h)
        elif isinstance(layer, FullyConnected):
            h = tape.fully_connected(h, p(f"{i}.weight"), p(f"{i}.bias"))
        elif isinstance(layer, SumHead):
            h = tape.sum_per_example(h)
    return h


def _check_batch(params: ParamSet, Y: np.ndarray):
    Y = np.asarray(Y)
    if Y.ndim != 4 or tuple(Y.shape[1:]) != tuple(params.spec.input_shape):
        raise ShapeError(f"batch shape {Y.shape} does not match network input (N,)+{params.spec.input_shape}")
    if Y.shape[0] == 0:
        raise ShapeError("empty batch")
    return Y


def score(params: ParamSet, Y: np.ndarray, mode: str = "eval") -> np.ndarray:
    """f(Y_i) for every example in the batch."""
    Y = _check_batch(params, Y)
    tape = Tape()
    return forward(params, tape, tape.constant(Y), mode=mode).value[:, 0].copy()


def features(params: ParamSet, Y: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Activation entering the final scoring layer, shape (N,) + feature_shape."""
    Y = _check_batch(params, Y)
    tape = Tape()
    return forward(params, tape, tape.constant(Y), mode=mode, upto=params.spec.head_index).value.copy()


def update_running_stats(params: ParamSet, Y: np.ndarray) -> None:
    """One train-mode forward pass whose only effect is the running-statistics update."""
    Y = _check_batch(params, Y)
    tape = Tape()
    forward(params, tape, tape.constant(Y), mode="train", update_stats=True)


def energy(params: ParamSet | None, ref: ReferenceDistribution, Y: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Per-example energy; ``params=None`` means f == 0."""
    Y = np.asarray(Y)
    f = 0.0 if params is None else score(params, Y, mode)
    return ref.log_density_term(Y) - f


def grad_input(params: ParamSet | None, ref: ReferenceDistribution, Y: np.ndarray,
               mode: str = "train") -> np.ndarray:
    """dE/dY for the batch; in train mode the batch-norm coupling between examples is included."""
    Y = np.asarray(Y)
    ref_grad = ref.grad_term(Y)
    if params is None:
        return ref_grad
    _check_batch(params, Y)
    tape = Tape()
    x = tape.variable(Y)
    out = forward(params, tape, x, mode=mode)
    total = tape.dot(out, np.ones_like(out.value))
    df = tape.backward(total, [x])[x]
    return ref_grad - df


@dataclass
class ParamGradient:
    """Ascent direction mean df/dθ(obs) - mean df/dθ(syn), plus the scores seen on the way."""

    grads: dict
    obs_scores: np.ndarray
    syn_scores: np.ndarray

    def l1_norm(self) -> float:
        return float(sum(np.abs(g).sum() for g in self.grads.values()))


def mean_score_gradient(params: ParamSet, Y: np.ndarray, mode: str = "train",
                        update_stats: bool = False) -> tuple[dict, np.ndarray]:
    """Gradient of mean_i f(Y_i) for every parameter tensor, and the scores themselves."""
    Y = _check_batch(params, Y)
    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in params.tensors.items()}
    f = forward(params, tape, tape.constant(Y), mode=mode, update_stats=update_stats, param_nodes=nodes)
    mean = tape.dot(f, np.full_like(f.value, 1.0 / len(Y)))
    g = tape.backward(mean, list(nodes.values()))
    grads = {k: g[n].astype(params.tensors[k].dtype, copy=False) for k, n in nodes.items()}
    return grads, f.value[:, 0].copy()


def grad_params(params: ParamSet, Y_obs: np.ndarray, Y_syn: np.ndarray, mode: str = "train",
                update_stats: bool = False) -> ParamGradient:
    """Monte Carlo learning gradient for one grid: mean df/dθ over observed minus over synthesized.

    The two batches go through separate forward passes, each with its own batch
    statistics in train mode. Running statistics, if updated, only see the observed batch.
    """
    g_obs, f_obs = mean_score_gradient(params, Y_obs, mode, update_stats)
    g_syn, f_syn = mean_score_gradient(params, Y_syn, mode)
    return ParamGradient({k: g_obs[k] - g_syn[k] for k in g_obs}, f_obs, f_syn)
