"""Synthetic texture images for desk-scale experiments (pixel range [-1, 1])."""

from __future__ import annotations

import numpy as np


def stripes(n: int, side: int, rng: np.random.Generator, orientation: str | np.ndarray = "random",
            periods=(4.0, 8.0), amplitude=(0.6, 0.9), noise: float = 0.05, channels: int = 1) -> np.ndarray:
    """Sinusoidal stripes with random period, phase and contrast.

    ``orientation`` is "horizontal", "vertical", "random", or a length-n array of
    0 (horizontal) / 1 (vertical).
    """
    if isinstance(orientation, str):
        if orientation == "random":
            vertical = rng.integers(0, 2, n)
        else:
            vertical = np.full(n, 1 if orientation == "vertical" else 0)
    else:
        vertical = np.asarray(orientation).astype(int)
    coords = np.arange(side, dtype=np.float64)
    period = rng.uniform(*periods, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(*amplitude, n)
    wave = amp[:, None] * np.sin(2 * np.pi * coords[None, :] / period[:, None] + phase[:, None])
    img = np.where(vertical[:, None, None] == 1, wave[:, None, :], wave[:, :, None])
    img = np.broadcast_to(img[:, None], (n, channels, side, side)).copy()
    img += noise * rng.standard_normal(img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def labelled_stripes(n: int, side: int, rng: np.random.Generator, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Balanced horizontal (0) / vertical (1) stripe images."""
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    return stripes(n, side, rng, orientation=labels, **kw), labels


def white_noise(n: int, side: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Uniform noise over the pixel range."""
    return rng.uniform(-1, 1, (n, channels, side, side)).astype(np.float32)


def smooth_blobs(n: int, side: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Low-frequency random fields: up-sampled coarse noise."""
    coarse = rng.uniform(-1, 1, (n, channels, 4, 4))
    rep = side // 4
    return np.repeat(np.repeat(coarse, rep, axis=2), rep, axis=3).astype(np.float32)
