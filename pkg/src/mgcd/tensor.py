"""Minimal reverse-mode differentiation for the layer types used by the energy networks.

Values are plain ``numpy`` arrays in (N, C, H, W) layout.  A :class:`Tape`
records each primitive as it is evaluated; :meth:`Tape.backward` replays the
records in reverse to produce gradients for any node that was created with
``requires_grad=True``.

    tape = Tape()
    x = tape.variable(images)
    w = tape.variable(weight)
    out = tape.conv2d(x, w, tape.constant(bias), stride=2, padding=2)
    s = tape.dot(out, np.ones_like(out.value))
    grads = tape.backward(s, [x, w])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """A node is used with a tape that did not record it."""


class DegenerateStatisticsError(ValueError):
    """Batch statistics cannot be computed from a single element."""


class Node:
    __slots__ = ("value", "requires_grad", "tape", "index")

    def __init__(self, value: np.ndarray, requires_grad: bool, tape: "Tape", index: int):
        self.value = value
        self.requires_grad = requires_grad
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Node
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class Tape:
    records: list = field(default_factory=list)
    _count: int = 0

    # -- leaves -------------------------------------------------------------

    def _node(self, value, requires_grad):
        node = Node(value, requires_grad, self, self._count)
        self._count += 1
        return node

    def variable(self, value: np.ndarray) -> Node:
        return self._node(np.asarray(value), True)

    def constant(self, value: np.ndarray) -> Node:
        return self._node(np.asarray(value), False)

    def _check(self, *nodes: Node):
        for n in nodes:
            if not isinstance(n, Node) or n.tape is not self:
                raise TapeError("node was not recorded on this tape")

    def _record(self, value, inputs, backward) -> Node:
        self._check(*inputs)
        out = self._node(value, any(n.requires_grad for n in inputs))
        if out.requires_grad:
            self.records.append(_Record(out, tuple(inputs), backward))
        return out

    # -- primitives ---------------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0) -> Node:
        """Cross-correlation with zero padding; ``w`` is (outC, inC, kH, kW)."""
        xv, wv, bv = x.value, w.value, b.value
        if xv.ndim != 4 or wv.ndim != 4:
            raise ShapeError(f"conv2d expects rank-4 input and weight, got {xv.shape} and {wv.shape}")
        n, c, h, wd = xv.shape
        oc, ic, kh, kw = wv.shape
        if c != ic:
            raise ShapeError(f"conv2d channel mismatch: input C={c} vs weight inC={ic}")
        if bv.shape != (oc,):
            raise ShapeError(f"conv2d bias shape {bv.shape} does not match outC={oc}")
        if stride < 1 or padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output H/W would be {ho}x{wo} for input {h}x{wd}, kernel {kh}x{kw}")

        # im2col over a channels-last copy: rows are output positions, columns (kH, kW, C)
        xh = np.ascontiguousarray(xv.transpose(0, 2, 3, 1))
        if padding:
            xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
        wmat = wv.transpose(0, 2, 3, 1).reshape(oc, -1)
        out = (cols @ wmat.T + bv).reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out, dtype=np.result_type(xv, wv))

        def backward(g):
            gx = gw = gb = None
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, oc)
            if w.requires_grad:
                gw = (g2.T @ cols).reshape(oc, kh, kw, c).transpose(0, 3, 1, 2)
            if b.requires_grad:
                gb = g2.sum(axis=0)
            if x.requires_grad:
                dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
                gxh = np.zeros(xh.shape, dtype=out.dtype)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for p in range(kh):
                    for q in range(kw):
                        gxh[:, p:p + hs:stride, q:q + ws:stride] += dcols[:, :, :, p, q]
                gx = np.ascontiguousarray(gxh[:, padding:padding + h, padding:padding + wd].transpose(0, 3, 1, 2))
            return gx, gw, gb

        return self._record(out, (x, w, b), backward)

    def relu(self, x: Node) -> Node:
        active = x.value > 0
        out = np.maximum(x.value, 0)
        return self._record(out, (x,), lambda g: (g * active,))

    def batchnorm(self, x: Node, gamma: Node, beta: Node, stats: RunningStats | None = None,
                  mode: str = "train", eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                  update_stats: bool = False) -> Node:
        """Per-channel batch normalization over (N, H, W).

        In train mode the batch mean/variance are used (and, if ``update_stats``,
        folded into ``stats`` by exponential moving average).  In eval mode the
        running statistics are used and the layer is affine in ``x``.
        """
        xv = x.value
        n, c, h, w = xv.shape
        if gamma.value.shape != (c,) or beta.value.shape != (c,):
            raise ShapeError(f"batchnorm gamma/beta must have shape ({c},)")
        axes = (0, 2, 3)
        gv = gamma.value[None, :, None, None]
        if mode == "eval":
            if stats is None:
                raise ValueError("eval mode needs running statistics")
            inv = (1.0 / np.sqrt(stats.var + eps)).astype(xv.dtype)
            xhat = (xv - stats.mean[None, :, None, None]) * inv[None, :, None, None]
            out = gv * xhat + beta.value[None, :, None, None]

            def backward(g):
                gx = g * (gv * inv[None, :, None, None]) if x.requires_grad else None
                ggam = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
                gbet = g.sum(axis=axes) if beta.requires_grad else None
                return gx, ggam, gbet

            return self._record(out.astype(xv.dtype, copy=False), (x, gamma, beta), backward)

        if mode != "train":
            raise ValueError(f"unknown batchnorm mode {mode!r}")
        m = n * h * w
        if m < 2:
            raise DegenerateStatisticsError(
                f"train-mode batchnorm needs at least 2 values per channel, got N*H*W={m}")
        mu = xv.mean(axis=axes)
        xc = xv - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        out = gv * xhat + beta.value[None, :, None, None]
        if update_stats and stats is not None:
            stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
            stats.var[...] = (1 - momentum) * stats.var + momentum * var * (m / (m - 1))

        def backward(g):
            gx = ggam = gbet = None
            if gamma.requires_grad:
                ggam = (g * xhat).sum(axis=axes)
            if beta.requires_grad:
                gbet = g.sum(axis=axes)
            if x.requires_grad:
                dxhat = g * gv
                s1 = dxhat.sum(axis=axes)[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return gx, ggam, gbet

        return self._record(out.astype(xv.dtype, copy=False), (x, gamma, beta), backward)

    def fully_connected(self, x: Node, w: Node, b: Node) -> Node:
        """Affine map of the flattened input: (N, D) @ (D, K) + b -> (N, K)."""
        xv = x.value
        flat = xv.reshape(xv.shape[0], -1)
        d, k = w.value.shape
        if flat.shape[1] != d:
            raise ShapeError(f"fully_connected expects {d} input features, got {flat.shape[1]}")
        if b.value.shape != (k,):
            raise ShapeError(f"fully_connected bias shape {b.value.shape} does not match K={k}")
        out = flat @ w.value + b.value

        def backward(g):
            gx = (g @ w.value.T).reshape(xv.shape) if x.requires_grad else None
            gw = flat.T @ g if w.requires_grad else None
            gb = g.sum(axis=0) if b.requires_grad else None
            return gx, gw, gb

        return self._record(out, (x, w, b), backward)

    def concat_flat(self, xs: list) -> Node:
        """Flatten each input per example and concatenate: (N, D1 + D2 + ...)."""
        n = xs[0].value.shape[0]
        if any(x.value.shape[0] != n for x in xs):
            raise ShapeError("concat_flat inputs disagree on batch size")
        flats = [x.value.reshape(n, -1) for x in xs]
        bounds = np.cumsum([0] + [f.shape[1] for f in flats])
        out = np.concatenate(flats, axis=1)

        def backward(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]].reshape(x.value.shape) if x.requires_grad else None
                         for i, x in enumerate(xs))

        return self._record(out, tuple(xs), backward)

    def sum_per_example(self, x: Node) -> Node:
        """Sum every non-batch axis: (N, ...) -> (N, 1)."""
        shape = x.value.shape
        out = x.value.reshape(shape[0], -1).sum(axis=1, keepdims=True)
        return self._record(out, (x,), lambda g: (np.broadcast_to(g.reshape((shape[0],) + (1,) * (len(shape) - 1)), shape).copy(),))

    def dot(self, x: Node, weights: np.ndarray) -> Node:
        """Scalar sum(x * weights) with a constant weight array, as a 1x1 node."""
        weights = np.asarray(weights, dtype=x.value.dtype)
        if weights.shape != x.value.shape:
            raise ShapeError(f"dot weights {weights.shape} vs node {x.value.shape}")
        out = np.array([[np.sum(x.value * weights)]], dtype=x.value.dtype)
        return self._record(out, (x,), lambda g: (g.reshape(()) * weights,))

    def combine(self, a: Node, b: Node, alpha: float = 1.0, beta: float = 1.0) -> Node:
        """alpha*a + beta*b for same-shaped nodes."""
        if a.value.shape != b.value.shape:
            raise ShapeError(f"combine shapes {a.value.shape} vs {b.value.shape}")
        out = alpha * a.value + beta * b.value
        return self._record(out, (a, b), lambda g: (alpha * g, beta * g))

    # -- reverse pass -------------------------------------------------------

    def backward(self, output: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
        """Gradients of a scalar (1x1) ``output`` for each node in ``wrt``.

        With ``wrt=None`` every leaf variable that influenced ``output`` is returned.
        Nodes that do not influence the output get a zero gradient.
        """
        self._check(output)
        if output.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.value.shape}")
        if not output.requires_grad:
            raise TapeError("output does not depend on any variable recorded on this tape")
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        produced = set()
        for rec in reversed(self.records):
            g = grads.get(rec.output.index)
            if g is None:
                continue
            produced.add(rec.output.index)
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not node.requires_grad:
                    continue
                prev = grads.get(node.index)
                grads[node.index] = gi if prev is None else prev + gi
        if wrt is None:
            leaves = {n.index: n for rec in self.records for n in rec.inputs
                      if n.requires_grad and n.index not in produced}
            return {node: grads[i] for i, node in leaves.items() if i in grads}
        result = {}
        for node in wrt:
            self._check(node)
            g = grads.get(node.index)
            result[node] = np.zeros_like(node.value) if g is None else g
        return result
