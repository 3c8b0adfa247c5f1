"""Finite-difference checks of every tape primitive and of whole scoring networks.

All checks run in float64 with central differences of step ``h``.  An analytic
component passes when its relative error is below ``rel_tol`` (for components
larger than ``small``) or its absolute error is below ``abs_tol`` otherwise.
A central difference across a ReLU kink says nothing about the analytic
gradient, so coordinates whose +-h perturbation flips the sign of any ReLU
input are retried with the smaller steps in ``KINK_STEPS``; only those that
still cross a kink are skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .network import (GAUSSIAN, BatchNorm, Conv, FullyConnected, NetworkSpec, ReferenceDistribution, ReLU,
                      SumHead, forward, init_params)
from .tensor import RunningStats, Tape

H = 1e-3
REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL = 1e-6
MAX_SKIP_FRACTION = 0.01
KINK_STEPS = (1e-4, 1e-5)
BATCH = 6
# Train-mode batch norm has third derivatives of order 1 / var^(3/2); channels with
# near-zero batch variance make an h = 1e-3 central difference meaningless, so such
# random test points are redrawn (and the architecture too, if that keeps failing).
MIN_BN_VARIANCE = 0.25
MAX_REDRAWS = 50


class _SignTape(Tape):
    """Tape that remembers the sign pattern of every ReLU input."""

    def __init__(self):
        super().__init__()
        self.signs = []

    def relu(self, x):
        self.signs.append(x.value > 0)
        return super().relu(x)


def _same_signs(a: list, b: list) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class CheckResult:
    name: str
    max_rel: float
    max_abs_small: float
    checked: int
    skipped: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        ok = self.max_rel < REL_TOL and self.max_abs_small < ABS_TOL
        return ok and self.checked > 0 and self.skipped <= MAX_SKIP_FRACTION * (self.checked + self.skipped)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel {self.max_rel:.2e}, max abs (small) {self.max_abs_small:.2e}, "
                f"{self.checked} checked, {self.skipped} skipped, {self.seconds:.2f}s")


def compare(fn, arrays: dict, analytic: dict, name: str, h: float = H) -> CheckResult:
    """Check ``analytic[k]`` against central differences of ``fn()`` in every coordinate of ``arrays[k]``.

    ``fn`` reads the arrays in place and returns (value, relu sign pattern).
    """
    start = time.perf_counter()
    _, base_signs = fn()
    max_rel = max_abs = 0.0
    checked = skipped = 0

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        fp, sp = fn()
        flat[i] = old - step
        fm, sm = fn()
        flat[i] = old
        smooth = _same_signs(sp, base_signs) and _same_signs(sm, base_signs)
        return (fp - fm) / (2 * step), smooth

    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[key], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            num, smooth = central(flat, i, h)
            for step in KINK_STEPS:
                if smooth:
                    break
                num, smooth = central(flat, i, step)
            if not smooth:
                skipped += 1
                continue
            a = grad[i]
            checked += 1
            if abs(a) > SMALL:
                max_rel = max(max_rel, abs(a - num) / abs(a))
            else:
                max_abs = max(max_abs, abs(a - num))
    return CheckResult(name, max_rel, max_abs, checked, skipped, time.perf_counter() - start)


# -- primitives -------------------------------------------------------------


def _primitive(name: str, build, arrays: dict, weights: np.ndarray | None = None) -> CheckResult:
    """``build(tape, nodes)`` returns an output node; the checked scalar is sum(weights * output)."""

    def value():
        tape = _SignTape()
        out = build(tape, {k: tape.constant(v) for k, v in arrays.items()})
        return float(np.sum(out.value * w)), tape.signs

    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in arrays.items()}
    out = build(tape, nodes)
    w = weights if weights is not None else np.random.default_rng(len(name)).standard_normal(out.value.shape)
    g = tape.backward(tape.dot(out, w), list(nodes.values()))
    return compare(value, arrays, {k: g[n] for k, n in nodes.items()}, name)


def primitive_checks(rng: np.random.Generator) -> list:
    r = lambda *s: rng.standard_normal(s)
    results = []
    for stride, pad, k in ((1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 2, 5), (1, 0, 1)):
        arrays = {"x": r(2, 3, 7, 7), "w": r(4, 3, k, k) * 0.3, "b": r(4)}
        results.append(_primitive(f"conv2d k{k} s{stride} p{pad}",
                                  lambda t, n, s=stride, p=pad: t.conv2d(n["x"], n["w"], n["b"], s, p), arrays))
    x = r(3, 2, 4, 4)
    x[np.abs(x) < 0.01] = 0.5  # keep every input clear of the kink
    results.append(_primitive("relu", lambda t, n: t.relu(n["x"]), {"x": x}))
    stats = RunningStats(r(3), 0.5 + rng.random(3))
    for mode in ("train", "eval"):
        arrays = {"x": r(4, 3, 3, 3) * 2 + 1, "gamma": 1 + 0.3 * r(3), "beta": r(3)}
        results.append(_primitive(f"batchnorm {mode}", lambda t, n, m=mode: t.batchnorm(
            n["x"], n["gamma"], n["beta"], stats, mode=m, update_stats=False), arrays))
    arrays = {"x": r(3, 2, 2, 3), "w": r(12, 4), "b": r(4)}
    results.append(_primitive("fully_connected", lambda t, n: t.fully_connected(n["x"], n["w"], n["b"]), arrays))
    arrays = {"a": r(2, 3, 2, 2), "b": r(2, 5)}
    results.append(_primitive("concat_flat", lambda t, n: t.concat_flat([n["a"], n["b"]]), arrays))
    results.append(_primitive("sum_per_example", lambda t, n: t.sum_per_example(n["x"]), {"x": r(3, 2, 2, 2)}))
    arrays = {"a": r(2, 3), "b": r(2, 3)}
    results.append(_primitive("combine", lambda t, n: t.combine(n["a"], n["b"], 0.7, -1.3), arrays))
    return results


# -- whole networks ---------------------------------------------------------


def random_spec(rng: np.random.Generator) -> tuple[NetworkSpec, str]:
    """A small random conv stack, with or without batch norm, ending in an FC or sum head."""
    c = int(rng.integers(1, 4))
    side = int(rng.choice([4, 6, 8]))
    layers, cur = [], side
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2])) if cur >= 4 else 1
        layers.append(Conv(int(rng.integers(2, 5)), k, stride))
        cur = (cur + 2 * (k // 2) - k) // stride + 1
        if rng.random() < 0.7:
            layers.append(BatchNorm())
        layers.append(ReLU())
    layers.append(FullyConnected() if rng.random() < 0.8 else SumHead())
    mode = "train" if rng.random() < 0.7 else "eval"
    return NetworkSpec(tuple(layers), (c, side, side)), mode


def _draw_point(params, spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Fresh random parameters (in place) and a random input batch."""
    for k, v in params.tensors.items():
        if k.endswith("weight"):
            # unit scale: batch norm makes f invariant to the scale of the weights feeding it, and
            # the central-difference truncation error grows like (h / |w|)^2
            v[...] = rng.standard_normal(v.shape)
        elif k.endswith("gamma"):
            v[...] = 1 + 0.2 * rng.standard_normal(v.shape)
        else:
            v[...] = 0.1 * rng.standard_normal(v.shape)
    for st in params.stats.values():
        st.mean[...] = 0.1 * rng.standard_normal(st.mean.shape)
        st.var[...] = 0.5 + rng.random(st.var.shape)
    return rng.standard_normal((BATCH,) + tuple(spec.input_shape))


class _VarianceTape(Tape):
    def __init__(self):
        super().__init__()
        self.variances = []

    def batchnorm(self, x, *args, **kw):
        self.variances.append(x.value.var(axis=(0, 2, 3)))
        return super().batchnorm(x, *args, **kw)


def _min_bn_variance(params, Y) -> float:
    tape = _VarianceTape()
    forward(params, tape, tape.constant(Y), mode="train")
    return min((float(v.min()) for v in tape.variances), default=np.inf)


def network_check(spec: NetworkSpec, mode: str, rng: np.random.Generator, name: str,
                  ref: ReferenceDistribution = GAUSSIAN) -> CheckResult | None:
    """Parameter gradients of sum_i w_i f(Y_i) and input gradients of the energy, together.

    Returns None when no well-conditioned test point was found for this architecture.
    """
    params = init_params(spec, rng.integers(1 << 31), dtype=np.float64)
    for _ in range(MAX_REDRAWS):
        Y = _draw_point(params, spec, rng)
        if mode == "eval" or _min_bn_variance(params, Y) >= MIN_BN_VARIANCE:
            break
    else:
        return None
    w = rng.standard_normal((len(Y), 1))

    def value():
        tape = _SignTape()
        f = forward(params, tape, tape.constant(Y), mode=mode)
        return float((f.value * w).sum() - (ref.log_density_term(Y) * w[:, 0]).sum()), tape.signs

    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in params.tensors.items()}
    x = tape.variable(Y)
    f = forward(params, tape, x, mode=mode, param_nodes=nodes)
    g = tape.backward(tape.dot(f, w), list(nodes.values()) + [x])
    analytic = {k: g[n] for k, n in nodes.items()}
    analytic["input"] = g[x] - ref.grad_term(Y) * w[:, :, None, None]
    arrays = dict(params.tensors)
    arrays["input"] = Y
    return compare(value, arrays, analytic, name)


def run_suite(n_configs: int = 24, seed: int = 0, verbose=None) -> list:
    """Primitive checks plus ``n_configs`` random networks; ``verbose`` is an optional line printer."""
    rng = np.random.default_rng(seed)
    results = primitive_checks(rng)
    i = 0
    while i < n_configs:
        spec, mode = random_spec(rng)
        desc = "-".join(f"c{l.out_channels}k{l.kernel}s{l.stride}" if isinstance(l, Conv) else
                        {BatchNorm: "bn", ReLU: "relu", FullyConnected: "fc", SumHead: "sum"}[type(l)]
                        for l in spec.layers)
        res = network_check(spec, mode, rng, f"net{i:02d} {mode} in{spec.input_shape} {desc}")
        if res is not None:
            results.append(res)
            i += 1
    if verbose:
        for res in results:
            verbose(res.line())
    return results
