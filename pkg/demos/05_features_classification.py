#!/usr/bin/env python3
"""Classify noisy stripes from a handful of labels with learned features.

Score networks trained without labels are used as frozen feature extractors.
A small head is then trained on the features of a few labelled images to tell
horizontal stripes from vertical ones under heavy pixel noise.  The
multi-grid model also has a coarse network, whose block-averaged input keeps
the stripe orientation while averaging away much of the noise.

The script trains an unlabelled multi-grid model and a single-grid model, and
compares their heads with logistic regression on raw pixels.  Each
comparison is over several labelled subsets.

    python demos/05_features_classification.py --labels 40 --noise 0.6
"""

import argparse
import logging

from mgcd import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=desk.DeskRecipe.iterations)
    ap.add_argument("--labels", type=int, default=40)
    ap.add_argument("--noise", type=float, default=0.6)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    recipe = desk.DeskRecipe(iterations=args.iterations)
    mg = desk.train_model(recipe, "multigrid")
    sg = desk.train_model(recipe, "singlegrid")
    outcome = desk.classification_ordering(mg, sg, args.labels, args.noise, seeds=range(args.seeds))
    print("mean test accuracy:", outcome.summary)


if __name__ == "__main__":
    main()
