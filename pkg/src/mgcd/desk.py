"""Desk-scale experiments on synthetic stripe textures.

These functions run the scaled-down versions of the main experiments: score
statistics on training, held-out and noise images, chain diversity from a
shared 1x1 base, inpainting against baselines, and classification from learned
features.  Each returns a small result object with a ``passed`` flag and a
one-line summary, so the same code serves the demo scripts and the test suite.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation, inpainting
from .langevin import LangevinConfig
from .pyramid import build_pyramid
from .textures import labelled_stripes, stripes, white_noise
from .trainer import TrainConfig, TrainState, train

log = logging.getLogger(__name__)

SIDE = 16
D = 4


@dataclass(frozen=True)
class DeskRecipe:
    """Shared settings: 16x16 stripes, d = 4 (two trained grids), channel scale 0.25."""

    n_train: int = 2000
    iterations: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    step_size: float = 0.3
    langevin_steps: int = 30
    bn_mode: str = "train"
    channel_scale: float = 0.25
    data_seed: int = 0

    def config(self, method: str = "multigrid", seed: int = 0, **kw) -> TrainConfig:
        return TrainConfig(method=method, batch_size=self.batch_size, iterations=self.iterations, lr=self.lr,
                           d=D, channel_scale=self.channel_scale, seed=seed,
                           langevin=LangevinConfig(steps=self.langevin_steps, step_size=self.step_size,
                                                   bn_mode=self.bn_mode), **kw)

    def dataset(self) -> np.ndarray:
        return stripes(self.n_train, SIDE, np.random.default_rng(self.data_seed))

    def heldout(self, n: int = 500) -> np.ndarray:
        return stripes(n, SIDE, np.random.default_rng(self.data_seed + 1000))


# Conditional training fills holes well only with short steps and data statistics in every pass, while
# unconditional training diverges in that setting, so the two experiments use separate recipes.
INPAINTING = DeskRecipe(iterations=150, lr=3e-4, step_size=0.1, bn_mode="eval")


def train_model(recipe: DeskRecipe, method: str = "multigrid", seed: int = 0, mask_size: int | None = None,
                **kw) -> TrainState:
    cfg = recipe.config(method, seed, mask_size=mask_size, **kw)
    start = time.perf_counter()
    state = train(recipe.dataset(), cfg)
    log.info("trained %s seed %d (mask %s) in %.0fs", method, seed, mask_size, time.perf_counter() - start)
    return state


@dataclass
class Outcome:
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)


# -- score statistics --------------------------------------------------------


def score_pattern(state: TrainState, recipe: DeskRecipe, n: int = 500) -> Outcome:
    """Held-out within 10% of training, both more than 3 pooled SDs above white noise, on every grid."""
    train_set = recipe.dataset()[:n]
    heldout = recipe.heldout(n)
    negative = white_noise(n, SIDE, np.random.default_rng(recipe.data_seed + 2000))
    report = evaluation.score_diagnostics(state, train_set, heldout, negative, rng=np.random.default_rng(5))
    parts, ok = [], True
    for grid, per in report.items():
        good, msg = evaluation.table1_pattern(per)
        ok &= good
        syn = per["synthesized"]
        parts.append(f"grid {grid}: {msg}, synthesized {syn[0]:.3g}±{syn[1]:.2g}")
    return Outcome(ok, "; ".join(parts), {"report": report})


# -- chain diversity ---------------------------------------------------------


def chain_diversity(state: TrainState, bases: np.ndarray, seeds=(1, 2), threshold: float = 0.05) -> Outcome:
    """Fraction of same-base pairs whose final images differ by more than ``threshold`` mean absolute distance."""
    a = evaluation.synthesize_from_bases(state, bases, np.random.default_rng(seeds[0]))[-1]
    b = evaluation.synthesize_from_bases(state, bases, np.random.default_rng(seeds[1]))[-1]
    dist = np.abs(a - b).mean(axis=(1, 2, 3))
    frac = float(np.mean(dist > threshold))
    return Outcome(frac >= 0.95, f"{frac:.1%} of {len(dist)} pairs differ by > {threshold} "
                   f"(median distance {np.median(dist):.3f})", {"distances": dist})


# -- inpainting ----------------------------------------------------------------


def inpainting_errors(mg: TrainState, sg: TrainState, recipe: DeskRecipe, seed: int, n: int = 200,
                      mask_size: int = 8) -> dict:
    """Per-pixel L1 error of multi-grid, single-grid and mean-fill on square-masked held-out images."""
    images = stripes(n, SIDE, np.random.default_rng([recipe.data_seed, 3000, seed]))
    rng = np.random.default_rng([seed, 17])
    masks = np.concatenate([inpainting.gen_mask("square", SIDE, SIDE, rng, size=mask_size).data for _ in range(n)])
    out = {}
    for name, state in (("multigrid", mg), ("singlegrid", sg)):
        recon = inpainting.inpaint(state, images, masks, rng=np.random.default_rng([seed, 23]))
        out[name] = inpainting.evaluate_inpainting(images, recon, masks, "square").error
    out["mean_fill"] = inpainting.evaluate_inpainting(images, inpainting.mean_fill(images, masks), masks).error
    return out


def inpainting_ordering(recipe: DeskRecipe = INPAINTING, seeds=range(5), mask_size: int = 8) -> Outcome:
    """Conditionally trained multi-grid vs single-grid vs mean-fill, one training run per seed and method."""
    rows = []
    for seed in seeds:
        mg = train_model(recipe, "multigrid", seed, mask_size)
        sg = train_model(recipe, "singlegrid", seed, mask_size)
        rows.append(inpainting_errors(mg, sg, recipe, seed, mask_size=mask_size))
        log.info("inpainting seed %d: %s", seed, rows[-1])
    med = {k: float(np.median([r[k] for r in rows])) for k in rows[0]}
    ok = med["multigrid"] < med["singlegrid"] and med["multigrid"] < med["mean_fill"]
    summary = ", ".join(f"{k} {v:.4f}" for k, v in med.items())
    return Outcome(ok, f"median per-pixel error over {len(rows)} seeds: {summary}", {"rows": rows})


# -- classification --------------------------------------------------------------


def classification_ordering(mg: TrainState, sg: TrainState, n_labels: int = 40, noise: float = 0.6,
                            n_test: int = 1000, seeds=range(5), head: evaluation.HeadConfig | None = None) -> Outcome:
    """Horizontal vs vertical noisy stripes from few labels: heads on frozen features vs raw-pixel logistic regression.

    Differences are paired per seed (same labelled subset for every method);
    the ordering holds when each mean difference exceeds 3 standard errors.
    """
    head = head or evaluation.HeadConfig()
    x_test, y_test = labelled_stripes(n_test, SIDE, np.random.default_rng(10_000), noise=noise)
    test_feats = {"multigrid": evaluation.extract_features(mg, x_test),
                  "singlegrid": evaluation.extract_features(sg, x_test)}
    acc = {"multigrid": [], "singlegrid": [], "raw_pixels": []}
    for seed in seeds:
        x, y = labelled_stripes(n_labels, SIDE, np.random.default_rng(seed), noise=noise)
        for name, state in (("multigrid", mg), ("singlegrid", sg)):
            clf = evaluation.train_classifier(evaluation.extract_features(state, x), y, replace(head, seed=seed))
            acc[name].append(clf.accuracy(test_feats[name], y_test))
        acc["raw_pixels"].append(evaluation.raw_pixel_baseline(x, y, x_test, y_test))
    acc = {k: np.array(v) for k, v in acc.items()}
    margins, ok = {}, True
    for other in ("singlegrid", "raw_pixels"):
        diff = acc["multigrid"] - acc[other]
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        margins[other] = (float(diff.mean()), float(se))
        ok &= bool(diff.mean() > 3 * se)
    summary = (", ".join(f"{k} {v.mean():.3f}" for k, v in acc.items()) + "; margins " +
               ", ".join(f"vs {k} {m:+.3f} ({m / se if se > 0 else math.inf:.1f} SE)"
                         for k, (m, se) in margins.items()))
    return Outcome(ok, summary, {"accuracy": acc, "margins": margins})


def base_images(recipe: DeskRecipe, n: int = 100) -> np.ndarray:
    """1x1 versions of held-out images."""
    return build_pyramid(recipe.heldout(n), D).levels[0]
