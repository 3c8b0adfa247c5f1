"""Multi-grid image pyramids and the 1x1-grid histogram model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

HIST_BINS = 64


def downscale(Y: np.ndarray, d: int) -> np.ndarray:
    """Replace each d x d block by its mean, per channel."""
    Y = np.asarray(Y)
    if d < 2:
        raise ValueError("scale factor d must be an integer >= 2")
    n, c, h, w = Y.shape
    if h % d or w % d:
        raise ShapeError(f"image {h}x{w} is not divisible into {d}x{d} blocks")
    return Y.reshape(n, c, h // d, d, w // d, d).mean(axis=(3, 5), dtype=np.float64).astype(Y.dtype)


def upscale(Y: np.ndarray, d: int) -> np.ndarray:
    """Expand each pixel into a d x d block of constant intensity."""
    if d < 2:
        raise ValueError("scale factor d must be an integer >= 2")
    return np.repeat(np.repeat(np.asarray(Y), d, axis=2), d, axis=3)


@dataclass
class GridPyramid:
    levels: list  # levels[s] has side d**s; levels[0] is 1x1
    d: int

    @property
    def S(self) -> int:
        return len(self.levels) - 1


def num_grids(side: int, d: int) -> int:
    """S such that side == d**S, or raise."""
    S, v = 0, 1
    while v < side:
        v *= d
        S += 1
    if v != side:
        raise ShapeError(f"image side {side} is not a power of d={d}")
    return S


def build_pyramid(Y: np.ndarray, d: int, S: int | None = None) -> GridPyramid:
    Y = np.asarray(Y)
    if Y.shape[2] != Y.shape[3]:
        raise ShapeError(f"pyramid needs square images, got {Y.shape[2]}x{Y.shape[3]}")
    found = num_grids(Y.shape[2], d)
    if S is not None and S != found:
        raise ShapeError(f"image side {Y.shape[2]} != d**S = {d ** S}")
    levels = [Y]
    for _ in range(found):
        levels.append(downscale(levels[-1], d))
    return GridPyramid(levels[::-1], d)


@dataclass
class HistogramModel:
    """Per-channel binned distribution of 1x1 intensities over [low, high]."""

    edges: np.ndarray  # (B + 1,)
    probs: np.ndarray  # (C, B)

    @property
    def bins(self) -> int:
        return self.probs.shape[1]


def fit_histogram(values: np.ndarray, bins: int = HIST_BINS, low: float = -1.0, high: float = 1.0) -> HistogramModel:
    """Laplace-smoothed histogram of grid-0 values; ``values`` is (n, C) or (n, C, 1, 1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit a histogram to an empty collection")
    values = values.reshape(values.shape[0], -1)
    edges = np.linspace(low, high, bins + 1)
    probs = []
    for ch in values.T:
        counts, _ = np.histogram(np.clip(ch, low, high), bins=edges)
        counts = counts + 1.0
        probs.append(counts / counts.sum())
    return HistogramModel(edges, np.array(probs))


def sample_histogram(model: HistogramModel, n: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverse-CDF draw of a bin per channel, then a uniform position inside it; (n, C, 1, 1)."""
    c, b = model.probs.shape
    out = np.empty((n, c), dtype=np.float64)
    for k in range(c):
        cdf = np.cumsum(model.probs[k])
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        lo, hi = model.edges[idx], model.edges[idx + 1]
        out[:, k] = lo + (hi - lo) * rng.random(n)
    return out.astype(dtype).reshape(n, c, 1, 1)


def downscale_mask(mask: np.ndarray, d: int) -> np.ndarray:
    """A coarse pixel is masked iff any fine pixel in its d x d block is masked."""
    m = np.asarray(mask)
    n, c, h, w = m.shape
    if h % d or w % d:
        raise ShapeError(f"mask {h}x{w} is not divisible into {d}x{d} blocks")
    return m.reshape(n, c, h // d, d, w // d, d).max(axis=(3, 5))


def downscale_observed(Y: np.ndarray, mask: np.ndarray, d: int) -> np.ndarray:
    """Block means over unmasked fine pixels only; blocks with no unmasked pixel become 0.

    Masked pixel values never enter the result, so hidden content cannot leak
    into coarser grids.
    """
    Y = np.asarray(Y)
    keep = np.broadcast_to(1.0 - np.asarray(mask, dtype=np.float64), Y.shape)
    n, c, h, w = Y.shape
    if h % d or w % d:
        raise ShapeError(f"image {h}x{w} is not divisible into {d}x{d} blocks")
    num = (np.where(keep > 0, Y, 0.0) * keep).reshape(n, c, h // d, d, w // d, d).sum(axis=(3, 5))
    cnt = keep.reshape(n, c, h // d, d, w // d, d).sum(axis=(3, 5))
    partial = np.where(cnt > 0, num / np.maximum(cnt, 1), 0.0).astype(Y.dtype)
    # fully observed blocks take the plain block average, bit-identical to the unmasked pyramid
    return np.where(cnt == d * d, downscale(Y, d), partial)


def masked_pyramid(Y: np.ndarray, mask: np.ndarray, d: int) -> tuple[list, list]:
    """Observed levels and mask levels, coarsest first; the finest observed level is ``Y`` itself."""
    S = num_grids(Y.shape[2], d)
    obs, masks = [np.asarray(Y)], [np.asarray(mask)]
    for _ in range(S):
        obs.append(downscale_observed(obs[-1], masks[-1], d))
        masks.append(downscale_mask(masks[-1], d))
    return obs[::-1], masks[::-1]
