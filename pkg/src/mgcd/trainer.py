"""Multi-grid minimal contrastive divergence and its baselines.

Each iteration draws a mini-batch, synthesizes a matching batch with the
configured method, and moves every grid's parameters along

    mean df/dθ(observed) - mean df/dθ(synthesized)

with a logarithmically decaying step size.  Methods:

``multigrid``   chains start at the observed 1x1 image and are refined coarse to fine
``singlegrid``  the 1x1 image is up-scaled straight to full size, one network
``cd1``         chains start at the observed images
``persistent``  chains continue from the previous epoch's synthesized images
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .langevin import LangevinConfig, run_chain, run_chain_masked, sample_multigrid, sample_multigrid_masked
from .network import (NetworkSpec, ParamGradient, ParamSet, ReferenceDistribution, grad_params,
                      init_params, preset_spec, score, update_running_stats)
from .pyramid import HistogramModel, build_pyramid, fit_histogram, masked_pyramid, num_grids, upscale
from .tensor import ShapeError

log = logging.getLogger(__name__)

METHODS = ("multigrid", "singlegrid", "cd1", "persistent")
HISTORY_LEN = 100_000


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "multigrid"
    batch_size: int = 32
    iterations: int = 100
    lr: float = 0.3
    decay_every: int = 10
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    single_steps: int | None = None  # singlegrid/persistent chain length; None -> S * langevin.steps
    cd1_steps: int | None = None  # None -> langevin.steps
    budget_parity: bool = True
    d: int = 4
    channel_scale: float = 1.0
    sigma: float = 1.0
    seed: int = 0
    specs: tuple | None = None  # explicit NetworkSpec per trained grid, overrides presets
    mask_size: int | None = None  # conditional learning with a random square mask per image

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("initial learning rate must be positive")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.d < 2:
            raise ValueError("d must be an integer >= 2")

    @property
    def reference(self) -> ReferenceDistribution:
        return ReferenceDistribution("gaussian", self.sigma)

    def chain_steps(self, S: int) -> int:
        """Langevin steps per image per iteration for this method."""
        if self.method == "multigrid":
            return S * self.langevin.steps
        if self.method == "cd1":
            return self.cd1_steps or self.langevin.steps
        return self.single_steps if self.single_steps is not None else S * self.langevin.steps

    def check_budget(self, S: int):
        """Single-grid style methods must spend S * l steps when parity is requested."""
        if self.budget_parity and self.method in ("singlegrid", "persistent"):
            if self.chain_steps(S) != S * self.langevin.steps:
                raise ValueError(f"budget parity: {self.method} uses {self.chain_steps(S)} Langevin steps, "
                                 f"multi-grid uses S*l = {S * self.langevin.steps}")


def learning_rate(lr0: float, t: int, every: int = 10) -> float:
    """gamma_t = gamma_0 / (1 + log(1 + floor(t / every)))."""
    return lr0 / (1.0 + math.log1p(t // every))


@dataclass
class TrainState:
    config: TrainConfig
    params: list  # ParamSet per trained grid, coarsest first
    t: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    persistent: np.ndarray | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))
    base_histogram: HistogramModel | None = None  # grid-0 intensities of the training set

    @property
    def S(self) -> int:
        """Number of grids below and including the full image (multigrid trains grids 1..S)."""
        return num_grids(self.params[-1].spec.input_shape[1], self.config.d)


def init_state(config: TrainConfig, image_shape: tuple, n_train: int | None = None,
               dataset: np.ndarray | None = None) -> TrainState:
    """Fresh parameters for every trained grid; ``image_shape`` is (C, H, W)."""
    c, h, w = image_shape
    if h != w:
        raise ShapeError(f"training images must be square, got {h}x{w}")
    S = num_grids(h, config.d)
    if S < 1:
        raise ShapeError("images must be at least d x d")
    config.check_budget(S)
    seeds = np.random.SeedSequence(config.seed).spawn(S + 1)
    if config.method == "multigrid":
        grids = list(range(1, S + 1))
    else:
        grids = [S]
    params = []
    for k, s in enumerate(grids):
        side = config.d ** s
        if config.specs is not None:
            spec = config.specs[k]
            if tuple(spec.input_shape) != (c, side, side):
                raise ShapeError(f"spec for grid {s} expects {spec.input_shape}, images give {(c, side, side)}")
        else:
            spec = preset_spec(min(s, 3), (c, side, side), config.channel_scale)
        params.append(init_params(spec, seeds[s], grid=s))
    state = TrainState(config, params, 0, np.random.default_rng(seeds[0]))
    if dataset is not None:
        state.base_histogram = fit_histogram(build_pyramid(np.asarray(dataset), config.d).levels[0])
    if config.method == "persistent":
        if dataset is None:
            raise ValueError("persistent CD needs the dataset to initialize its chain store")
        state.persistent = np.array(dataset, dtype=np.float32, copy=True)
    return state


# -- mini-batches -----------------------------------------------------------


def batch_indices(config: TrainConfig, n: int, t: int) -> np.ndarray:
    """Indices for iteration t: epochs are permutations keyed by (seed, epoch), sampled without replacement."""
    nb = min(config.batch_size, n)
    per_epoch = n // nb
    epoch, j = divmod(t, per_epoch)
    perm = np.random.default_rng([config.seed, epoch, 7919]).permutation(n)
    return np.sort(perm[j * nb:(j + 1) * nb])


# -- synthesis --------------------------------------------------------------


def random_square_masks(n: int, side: int, size: int, rng: np.random.Generator) -> np.ndarray:
    masks = np.zeros((n, 1, side, side), dtype=np.float32)
    for i in range(n):
        r, c = rng.integers(0, side - size + 1, size=2)
        masks[i, 0, r:r + size, c:c + size] = 1
    return masks


def synth_multigrid(state: TrainState, obs: np.ndarray, masks: np.ndarray | None = None) -> list:
    """Synthesized batch per grid, chains started at the observed 1x1 images."""
    cfg = state.config
    pyr = build_pyramid(obs, cfg.d)
    bases = pyr.levels[0]
    if masks is None:
        return sample_multigrid(state.params, bases, cfg.d, cfg.langevin, cfg.reference, state.rng)
    observed, mlevels = masked_pyramid(obs, masks, cfg.d)
    return sample_multigrid_masked(state.params, bases, observed, mlevels, cfg.d, cfg.langevin,
                                   cfg.reference, state.rng)


def synth_singlegrid(state: TrainState, obs: np.ndarray, masks: np.ndarray | None = None) -> list:
    cfg = state.config
    side = obs.shape[2]
    base = build_pyramid(obs, cfg.d).levels[0]
    init = upscale(base, side)
    lc = replace(cfg.langevin, steps=cfg.chain_steps(state.S))
    if masks is None:
        return [run_chain(state.params[0], cfg.reference, init, lc, state.rng, grid=state.S)]
    m = np.broadcast_to(masks, obs.shape).astype(bool)
    return [run_chain_masked(state.params[0], cfg.reference, np.where(m, init, obs), m, lc, state.rng,
                             grid=state.S)]


def synth_cd1(state: TrainState, obs: np.ndarray) -> list:
    cfg = state.config
    lc = replace(cfg.langevin, steps=cfg.chain_steps(state.S))
    return [run_chain(state.params[0], cfg.reference, obs, lc, state.rng, grid=state.S)]


def synth_persistent(state: TrainState, indices: np.ndarray) -> list:
    """Continue the stored chains of the given training images and write the result back."""
    cfg = state.config
    if state.persistent is None:
        raise ValueError("persistent chain store is not initialized")
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= len(state.persistent)):
        raise IndexError("persistent chain index out of range")
    lc = replace(cfg.langevin, steps=cfg.chain_steps(state.S))
    out = run_chain(state.params[0], cfg.reference, state.persistent[indices], lc, state.rng, grid=state.S)
    state.persistent[indices] = out
    return [out]


def synthesize(state: TrainState, obs: np.ndarray, indices: np.ndarray, masks: np.ndarray | None = None) -> list:
    method = state.config.method
    if method == "multigrid":
        return synth_multigrid(state, obs, masks)
    if masks is not None and method != "singlegrid":
        raise ValueError(f"conditional learning is not defined for method {method!r}")
    if method == "singlegrid":
        return synth_singlegrid(state, obs, masks)
    if method == "cd1":
        return synth_cd1(state, obs)
    return synth_persistent(state, indices)


# -- learning ---------------------------------------------------------------


def observed_levels(state: TrainState, obs: np.ndarray) -> list:
    if state.config.method == "multigrid":
        return build_pyramid(obs, state.config.d).levels[1:]
    return [obs]


def update_params(state: TrainState, gradients: list, t: int | None = None) -> TrainState:
    """theta_s += gamma_t * grad_s for every grid, all from the same pre-update parameters."""
    t = state.t if t is None else t
    for g in gradients:
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                bad = {name: int((~np.isfinite(a)).sum()) for name, a in g.items() if not np.all(np.isfinite(a))}
                raise TrainingDivergence(f"non-finite gradient at iteration {t} (non-finite entries per tensor: {bad})")
    gamma = learning_rate(state.config.lr, t, state.config.decay_every)
    for params, g in zip(state.params, gradients):
        for k, v in g.items():
            params.tensors[k] += np.asarray(gamma * v, dtype=params.tensors[k].dtype)
    return state


def train_step(state: TrainState, dataset: np.ndarray) -> list:
    """One iteration of the configured method; returns the per-grid gradients."""
    cfg = state.config
    idx = batch_indices(cfg, len(dataset), state.t)
    obs = dataset[idx]
    levels = observed_levels(state, obs)
    mode = cfg.langevin.bn_mode
    if mode == "eval":
        # running statistics track the data; sampling and both gradient passes then share them
        for params, y_obs in zip(state.params, levels):
            update_running_stats(params, y_obs)
    masks = None
    if cfg.mask_size is not None:
        # placement has its own stream so the sampler's random numbers do not depend on the mask
        masks = random_square_masks(len(obs), obs.shape[2], cfg.mask_size,
                                    np.random.default_rng([cfg.seed, state.t, 104729]))
    syn = synthesize(state, obs, idx, masks)
    ref = cfg.reference
    grads: list[ParamGradient] = []
    for params, y_obs, y_syn in zip(state.params, levels, syn):
        grads.append(grad_params(params, y_obs, y_syn, mode=mode, update_stats=(mode == "train")))
    for params, y_obs, y_syn, g in zip(state.params, levels, syn, grads):
        gap = float(np.mean(ref.log_density_term(y_syn) - g.syn_scores)
                    - np.mean(ref.log_density_term(y_obs) - g.obs_scores))
        state.history.append({
            "iteration": state.t, "grid": params.grid, "grad_l1": g.l1_norm(),
            "score_train": float(g.obs_scores.mean()), "score_synth": float(g.syn_scores.mean()),
            "value_gap": gap,
        })
    update_params(state, [g.grads for g in grads])
    state.t += 1
    return grads


def train(dataset: np.ndarray, config: TrainConfig, state: TrainState | None = None,
          checkpoint_fn=None, checkpoint_every: int = 0, log_every: int = 0) -> TrainState:
    """Run (or resume) training until ``config.iterations`` updates have been made."""
    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 4 or len(dataset) == 0:
        raise ShapeError(f"dataset must be a non-empty (n, C, H, W) array, got shape {dataset.shape}")
    if state is None:
        state = init_state(config, dataset.shape[1:], len(dataset), dataset)
    else:
        state.config = config
    if tuple(state.params[-1].spec.input_shape) != tuple(dataset.shape[1:]):
        raise ShapeError(f"dataset images {dataset.shape[1:]} do not match the model {state.params[-1].spec.input_shape}")
    if config.method == "persistent" and state.persistent is not None and len(state.persistent) != len(dataset):
        raise ShapeError("persistent chain store size differs from the training set size")
    while state.t < config.iterations:
        train_step(state, dataset)
        if log_every and state.t % log_every == 0:
            rows = list(state.history)[-len(state.params):]
            log.info("iter %d  %s", state.t, "  ".join(
                f"g{r['grid']}: l1={r['grad_l1']:.3g} f_obs={r['score_train']:.3g} f_syn={r['score_synth']:.3g}"
                for r in rows))
        if checkpoint_fn is not None and checkpoint_every and state.t % checkpoint_every == 0:
            checkpoint_fn(state)
    return state


# -- diagnostics ------------------------------------------------------------


def score_stats(params: ParamSet, images: np.ndarray) -> tuple[float, float]:
    """Mean and standard deviation of eval-mode scores."""
    s = score(params, images, mode="eval")
    return float(s.mean()), float(s.std())


def sets_for_grid(params: ParamSet, images: np.ndarray, d: int) -> np.ndarray:
    """Down-scale full-size images to this grid's resolution."""
    side = params.spec.input_shape[1]
    pyr = build_pyramid(images, d)
    return pyr.levels[num_grids(side, d)]


def diagnostics(state: TrainState, sets: dict | None = None, synthesized: list | None = None) -> dict:
    """Gradient-norm series per grid, plus eval-mode score statistics for any named image sets."""
    report = {"grad_l1": {}, "value_gap": {}, "scores": {}}
    for row in state.history:
        report["grad_l1"].setdefault(row["grid"], []).append(row["grad_l1"])
        report["value_gap"].setdefault(row["grid"], []).append(row["value_gap"])
    for k, params in enumerate(state.params):
        per = {}
        for name, images in (sets or {}).items():
            per[name] = score_stats(params, sets_for_grid(params, images, state.config.d))
        if synthesized is not None:
            per["synthesized"] = score_stats(params, synthesized[k])
        report["scores"][params.grid] = per
    return report


def value_gap(params: ParamSet, ref: ReferenceDistribution, obs: np.ndarray, syn: np.ndarray,
              mode: str = "eval") -> float:
    """Mean energy of synthesized minus mean energy of observed examples."""
    e_syn = ref.log_density_term(syn) - score(params, syn, mode)
    e_obs = ref.log_density_term(obs) - score(params, obs, mode)
    return float(e_syn.mean() - e_obs.mean())


HISTORY_FIELDS = ("iteration", "grid", "grad_l1", "score_train", "score_synth", "value_gap")
