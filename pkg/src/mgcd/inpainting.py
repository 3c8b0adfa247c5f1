"""Conditional learning and inpainting by masked Langevin sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .langevin import LangevinConfig, run_chain_masked, sample_multigrid_masked
from .pyramid import masked_pyramid, upscale
from .trainer import TrainConfig, TrainState, train

MASK_KINDS = ("square", "doodle", "pepper")
PIXEL_PEAK = 2.0  # width of the [-1, 1] pixel range


@dataclass
class Mask:
    data: np.ndarray  # (1, 1, H, W), 1 = pixel to inpaint
    kind: str

    @property
    def fraction(self) -> float:
        return float(self.data.mean())

    @property
    def count(self) -> int:
        return int(self.data.sum())


def _brush(m: np.ndarray, r: int, c: int, width: int):
    h, w = m.shape
    r0, c0 = max(r - width // 2, 0), max(c - width // 2, 0)
    m[r0:min(r0 + width, h), c0:min(c0 + width, w)] = 1


def _doodle(H: int, W: int, rng: np.random.Generator, width: int, target: float, strokes: int) -> np.ndarray:
    m = np.zeros((H, W), dtype=np.float32)
    for k in range(strokes):
        goal = target * (k + 1) / strokes
        r, c = rng.integers(0, H), rng.integers(0, W)
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(8 * (H + W)):
            _brush(m, int(r), int(c), width)
            if m.mean() >= goal:
                break
            angle += rng.normal(0, 0.5)
            r = np.clip(r + np.sin(angle), 0, H - 1)
            c = np.clip(c + np.cos(angle), 0, W - 1)
    return m


def gen_mask(kind: str, H: int, W: int, rng: np.random.Generator, size: int | tuple | None = None,
             fraction: float | None = None, width: int = 4, max_tries: int = 200) -> Mask:
    """Random inpainting mask.

    square: a ``size`` block (default half the image side) at a uniform position.
    doodle: 3-6 random-walk strokes of ``width`` pixels, redrawn until 20-30% is covered.
    pepper: each pixel masked independently with probability ``fraction`` (default 0.6).
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    if kind == "square":
        if size is None:
            size = (H // 2, W // 2)
        h, w = (size, size) if np.isscalar(size) else size
        if h > H or w > W or h < 1 or w < 1:
            raise ValueError(f"square mask {h}x{w} does not fit a {H}x{W} image")
        m = np.zeros((H, W), dtype=np.float32)
        r, c = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        m[r:r + h, c:c + w] = 1
    elif kind == "pepper":
        p = 0.6 if fraction is None else fraction
        m = (rng.random((H, W)) < p).astype(np.float32)
    else:
        if width > min(H, W):
            raise ValueError(f"doodle stroke width {width} does not fit a {H}x{W} image")
        target = 0.25 if fraction is None else fraction
        lo, hi = target - 0.05, target + 0.05
        for _ in range(max_tries):
            m = _doodle(H, W, rng, width, target, int(rng.integers(3, 7)))
            if lo <= m.mean() <= hi:
                break
        else:
            raise RuntimeError(f"could not draw a doodle covering {lo:.0%}-{hi:.0%} of a {H}x{W} image")
    return Mask(m[None, None], kind)


def train_conditional(dataset: np.ndarray, config: TrainConfig, mask_size: int | None = None, **kw) -> TrainState:
    """Train with a random square mask per image; unmasked pixels stay at their observed values while sampling."""
    if mask_size is not None:
        config = replace(config, mask_size=mask_size)
    if config.mask_size is None:
        raise ValueError("conditional training needs a mask size")
    if config.method not in ("multigrid", "singlegrid"):
        raise ValueError(f"conditional learning supports multigrid and singlegrid, not {config.method!r}")
    return train(dataset, config, **kw)


def unmasked_mean(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-image, per-channel mean over unmasked pixels; (n, C, 1, 1)."""
    keep = 1.0 - np.broadcast_to(mask, images.shape).astype(np.float64)
    cnt = keep.sum(axis=(2, 3), keepdims=True)
    if np.any(cnt == 0):
        raise ValueError("mask hides every pixel of an image; no observed values to condition on")
    return ((images * keep).sum(axis=(2, 3), keepdims=True) / cnt).astype(images.dtype)


def mean_fill(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Baseline: masked pixels replaced by the mean of the observed pixels."""
    images = np.asarray(images)
    m = np.broadcast_to(np.asarray(mask), images.shape).astype(bool)
    return np.where(m, np.broadcast_to(unmasked_mean(images, mask), images.shape), images)


def inpaint(state: TrainState, images: np.ndarray, mask: np.ndarray, config: LangevinConfig | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Fill the masked pixels of ``images`` (n, C, H, W) by masked Langevin sampling.

    Multi-grid models sweep coarse to fine starting from the mean of the
    unmasked pixels; single-grid models start from that mean up-scaled to full
    size.  Unmasked pixels are returned bit-identical to the input.
    """
    if state.t == 0:
        raise ValueError("cannot inpaint with an untrained model (iteration counter is 0)")
    images = np.asarray(images, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim == 2:
        mask = mask[None, None]
    if tuple(mask.shape[-2:]) != tuple(images.shape[-2:]):
        raise ValueError(f"mask {mask.shape[-2:]} does not match images {images.shape[-2:]}")
    mask = np.broadcast_to(mask, (images.shape[0], 1) + images.shape[2:])
    m = np.broadcast_to(mask, images.shape).astype(bool)
    if not m.any():
        return images.copy()
    cfg = config or state.config.langevin
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tc = state.config
    base = unmasked_mean(images, mask)
    if tc.method == "multigrid":
        observed, masks = masked_pyramid(images, mask, tc.d)
        out = sample_multigrid_masked(state.params, base, observed, masks, tc.d, cfg, tc.reference, rng)[-1]
    else:
        steps = tc.chain_steps(state.S) if config is None else cfg.steps
        init = np.where(m, upscale(base, images.shape[2]), images)
        out = run_chain_masked(state.params[0], tc.reference, init, m, replace(cfg, steps=steps), rng, grid=state.S)
    return np.where(m, out, images)


@dataclass
class InpaintReport:
    errors: np.ndarray  # per-image mean absolute difference over masked pixels
    psnrs: np.ndarray  # per-image PSNR over masked pixels (inf for perfect reconstructions)
    error: float
    psnr: float
    kind: str
    n_images: int
    n_masked: int

    def rows(self) -> list:
        return [{"image": i, "kind": self.kind, "error": float(e), "psnr": float(p)}
                for i, (e, p) in enumerate(zip(self.errors, self.psnrs))]


def _psnr(mse, peak: float = PIXEL_PEAK):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(mse > 0, 10.0 * np.log10(peak ** 2 / np.where(mse > 0, mse, 1.0)), np.inf)


def evaluate_inpainting(originals: np.ndarray, reconstructions: np.ndarray, masks: np.ndarray,
                        kind: str = "") -> InpaintReport:
    """L1 error and PSNR (peak 2 for [-1, 1] pixels) over the masked pixels only."""
    a = np.asarray(originals, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: originals {a.shape} vs reconstructions {b.shape}")
    m = np.broadcast_to(np.asarray(masks, dtype=bool), a.shape)
    counts = m.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("every image needs at least one masked pixel to evaluate inpainting")
    diff = np.where(m, a - b, 0.0)
    errors = np.abs(diff).sum(axis=(1, 2, 3)) / counts
    mse = (diff ** 2).sum(axis=(1, 2, 3)) / counts
    total = counts.sum()
    return InpaintReport(errors, _psnr(mse), float(np.abs(diff).sum() / total),
                         float(_psnr((diff ** 2).sum() / total)), kind, len(a), int(total))
