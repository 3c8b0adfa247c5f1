#!/usr/bin/env python3
"""Train a two-grid model on stripe textures, then sample and score it.

16x16 stripe images with d = 4 give a pyramid of 1x1, 4x4 and 16x16 images.
The 1x1 grid is observed, and one score network is trained for each of the
two finer grids.  At sampling time a 1x1 base is drawn, up-scaled and refined
by Langevin steps on each grid in turn.

After training the script prints the per-grid scores of training, held-out,
synthesized and white-noise images.  A model that has learned the texture
gives training and held-out images similar scores, well above the noise
images.  It also draws two chains from each of a few shared bases and reports
how far apart they end up.

    python demos/03_train_and_sample.py --iterations 400 --out samples/
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from mgcd import desk
from mgcd.evaluation import synthesize_from_bases
from mgcd.io import save_checkpoint, save_image


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=desk.DeskRecipe.iterations)
    ap.add_argument("--method", default="multigrid", choices=["multigrid", "singlegrid", "cd1", "persistent"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="directory for a checkpoint and sample PNGs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    recipe = desk.DeskRecipe(iterations=args.iterations)
    state = desk.train_model(recipe, args.method, args.seed)

    outcome = desk.score_pattern(state, recipe)
    print("scores by grid (mean ± std):")
    for part in outcome.summary.split("; "):
        print("  " + part)

    bases = desk.base_images(recipe, 100)
    if args.method == "multigrid":
        print("chain diversity:", desk.chain_diversity(state, bases).summary)

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, args.out / "checkpoint.mgcd")
        final = synthesize_from_bases(state, bases[:16], np.random.default_rng(args.seed))[-1]
        for i, img in enumerate(final):
            save_image(img, args.out / f"sample{i:02d}.png")
        print(f"wrote a checkpoint and {len(final)} samples to {args.out}")


if __name__ == "__main__":
    main()
