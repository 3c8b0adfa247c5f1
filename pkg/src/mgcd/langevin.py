"""Langevin dynamics on a single grid, the coarse-to-fine multi-grid sweep, and masked chains.

One step is

    Y <- Y - (delta^2 / 2) * dE/dY + delta * U,    U ~ N(0, I)

with ``dE/dY = Y / sigma^2 - df/dY`` for the Gaussian reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .network import GAUSSIAN, ParamSet, ReferenceDistribution, grad_input
from .pyramid import upscale


class SamplerDivergence(RuntimeError):
    def __init__(self, step: int, max_abs: float):
        super().__init__(f"Langevin chain diverged at step {step} (max |value| = {max_abs:.3g})")
        self.step = step
        self.max_abs = max_abs


@dataclass(frozen=True)
class LangevinConfig:
    steps: int = 30
    step_size: float = 0.3
    clamp: tuple | None = None  # (low, high) applied after every step
    seed: int = 0
    bn_mode: str = "train"  # batch statistics over the chain batch, or "eval"
    zero_noise: bool = False  # test hook: U = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("Langevin steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("Langevin step size must be positive")


@dataclass
class ChainState:
    images: np.ndarray
    grid: int = 0
    step: int = 0


def _clamp_for(ref: ReferenceDistribution, config: LangevinConfig):
    if config.clamp is not None:
        return config.clamp
    if ref.kind == "uniform":
        return (ref.low, ref.high)
    return None


def langevin_step(params: ParamSet | None, ref: ReferenceDistribution, state: ChainState,
                  step_size: float, rng: np.random.Generator | None, clamp=None,
                  bn_mode: str = "train", zero_noise: bool = False, mask: np.ndarray | None = None) -> ChainState:
    """One Langevin update; ``params=None`` means f == 0. Masked steps only move pixels where mask == 1."""
    Y = state.images
    grad = grad_input(params, ref, Y, mode=bn_mode)
    if not np.all(np.isfinite(grad)):
        raise SamplerDivergence(state.step, float(np.nanmax(np.abs(Y))))
    new = Y - (0.5 * step_size ** 2) * grad
    if not zero_noise:
        new = new + step_size * rng.standard_normal(Y.shape, dtype=Y.dtype)
    new = new.astype(Y.dtype, copy=False)
    if clamp is not None:
        new = np.clip(new, clamp[0], clamp[1])
    if mask is not None:
        new = np.where(mask.astype(bool), new, Y)
    if not np.all(np.isfinite(new)):
        raise SamplerDivergence(state.step + 1, float(np.nanmax(np.abs(new))))
    return ChainState(new, state.grid, state.step + 1)


def run_chain(params: ParamSet | None, ref: ReferenceDistribution, init: np.ndarray,
              config: LangevinConfig, rng: np.random.Generator | None = None, grid: int = 0) -> np.ndarray:
    """``config.steps`` Langevin steps from ``init``; the RNG defaults to one seeded by ``config.seed``."""
    return _run(params, ref, init, config, rng, grid, mask=None)


def run_chain_masked(params: ParamSet | None, ref: ReferenceDistribution, init: np.ndarray, mask: np.ndarray,
                     config: LangevinConfig, rng: np.random.Generator | None = None, grid: int = 0) -> np.ndarray:
    """Langevin chain where only pixels with mask == 1 move; the rest stay bit-identical to ``init``.

    ``mask`` broadcasts against ``init`` (e.g. (N, 1, H, W) over channels).
    """
    mask = np.broadcast_to(np.asarray(mask), init.shape)
    if not mask.any():
        warnings.warn("empty mask: masked Langevin chain is a no-op", stacklevel=2)
        return np.array(init, copy=True)
    return _run(params, ref, init, config, rng, grid, mask=mask)


def _run(params, ref, init, config, rng, grid, mask):
    if rng is None:
        rng = np.random.default_rng(config.seed)
    clamp = _clamp_for(ref, config)
    state = ChainState(np.array(init, copy=True), grid, 0)
    for _ in range(config.steps):
        state = langevin_step(params, ref, state, config.step_size, rng, clamp=clamp,
                              bn_mode=config.bn_mode, zero_noise=config.zero_noise, mask=mask)
    return state.images


def sample_multigrid(all_params: list, bases: np.ndarray, d: int, config: LangevinConfig,
                     ref: ReferenceDistribution = GAUSSIAN, rng: np.random.Generator | None = None) -> list:
    """Coarse-to-fine sweep: for s = 1..S, up-scale the previous grid's samples and run ``config.steps`` steps.

    ``all_params[s - 1]`` is the grid-s model (``None`` entries mean f == 0).
    Returns the synthesized batch of every grid, coarsest first.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    current = np.asarray(bases)
    out = []
    for s, params in enumerate(all_params, start=1):
        current = run_chain(params, ref, upscale(current, d), config, rng=rng, grid=s)
        out.append(current)
    return out


def stationary_variance(step_size: float, sigma: float = 1.0) -> float:
    """Exact stationary variance of the f == 0 chain, an AR(1) process with rho = 1 - delta^2 / (2 sigma^2)."""
    rho = 1.0 - step_size ** 2 / (2 * sigma ** 2)
    return step_size ** 2 / (1.0 - rho ** 2)


def with_steps(config: LangevinConfig, steps: int) -> LangevinConfig:
    return replace(config, steps=steps)


def sample_multigrid_masked(all_params: list, bases: np.ndarray, observed: list, masks: list, d: int,
                            config: LangevinConfig, ref: ReferenceDistribution = GAUSSIAN,
                            rng: np.random.Generator | None = None) -> list:
    """Conditional coarse-to-fine sweep.

    At grid s the masked pixels start from the up-scaled grid s-1 sample and
    the unmasked pixels are held at ``observed[s]``.  ``observed``/``masks`` are
    indexed by grid, 0..S, as returned by :func:`mgcd.pyramid.masked_pyramid`.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    current = np.asarray(bases)
    out = []
    for s, params in enumerate(all_params, start=1):
        m = np.broadcast_to(masks[s], observed[s].shape).astype(bool)
        init = np.where(m, upscale(current, d), observed[s])
        if m.any():
            current = _run(params, ref, init, config, rng, s, mask=m)
        else:
            current = init
        out.append(current)
    return out
