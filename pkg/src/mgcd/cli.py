"""Command-line entry point: ``python -m mgcd <command> ...``.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, gradcheck, inpainting
from .io import (CheckpointFormatError, ConfigError, load_checkpoint, load_dataset, load_run_config, save_checkpoint,
                 save_grid, save_image, save_mask, write_csv, write_history_csv)
from .langevin import SamplerDivergence
from .pyramid import sample_histogram
from .trainer import TrainingDivergence, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("mgcd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(extra: list) -> dict:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognized argument {item!r}; config overrides look like --key=value")
        k, v = item[2:].split("=", 1)
        out[k.replace("-", "_")] = v
    return out


def cmd_train(args, extra) -> int:
    rc = load_run_config(args.config, _overrides(extra))
    if rc.dataset is None or not Path(rc.dataset).is_dir():
        raise ConfigError(f"dataset directory {rc.dataset!r} does not exist")
    data = load_dataset(rc.dataset, rc.image_size, rc.channels)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.mgcd"
    state = load_checkpoint(args.resume) if args.resume else None
    log.info("training %s on %d images of shape %s", rc.train.method, len(data.images), data.images.shape[1:])
    try:
        state = train(data.images, rc.train, state, checkpoint_fn=lambda s: save_checkpoint(s, ckpt),
                      checkpoint_every=rc.checkpoint_every, log_every=rc.log_every)
    finally:
        if state is not None and state.history:
            write_history_csv(state, out / "diagnostics.csv")
    save_checkpoint(state, ckpt)
    print(f"wrote {ckpt} after {state.t} iterations")
    return EXIT_OK


def generate(state, n: int, rng: np.random.Generator) -> list:
    """Fresh samples for every trained grid, starting from 1x1 bases drawn from the histogram model."""
    if state.base_histogram is None:
        raise ConfigError("checkpoint has no grid-0 histogram; it was not trained from a dataset")
    bases = sample_histogram(state.base_histogram, n, rng)
    return [bases] + evaluation.synthesize_from_bases(state, bases, rng)


def cmd_sample(args, extra) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = generate(state, args.n, np.random.default_rng(args.seed))
    side = levels[-1].shape[2]
    grids = [0] + [p.grid for p in state.params]
    for g, imgs in zip(grids, levels):
        path = out / f"grid{g}_{imgs.shape[2]}x{imgs.shape[3]}.png"
        save_grid(imgs, path, scale=max(1, side // imgs.shape[2]))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_inpaint(args, extra) -> int:
    state = load_checkpoint(args.checkpoint)
    side = state.params[-1].spec.input_shape[1]
    data = load_dataset(args.images, side, state.params[-1].spec.input_shape[0])
    rng = np.random.default_rng(args.seed)
    masks = np.concatenate([inpainting.gen_mask(args.mask, side, side, rng, size=args.mask_size).data
                            for _ in range(len(data.images))])
    filled = inpainting.inpaint(state, data.images, masks, rng=rng)
    baseline = inpainting.mean_fill(data.images, masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(data.paths):
        save_image(filled[i], out / f"{p.stem}_inpainted.png")
        save_mask(masks[i], out / f"{p.stem}_mask.png")
    rows = []
    for name, recon in (("model", filled), ("mean_fill", baseline)):
        rep = inpainting.evaluate_inpainting(data.images, recon, masks, args.mask)
        for r, p in zip(rep.rows(), data.paths):
            rows.append({"method": name, "file": p.name, **r})
        print(f"{name}: per-pixel error {rep.error:.4f}, PSNR {rep.psnr:.2f} dB over {rep.n_masked} pixels")
    write_csv(out / "report.csv", rows, ("method", "file", "image", "kind", "error", "psnr"))
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    state = load_checkpoint(args.checkpoint)
    side = state.params[-1].spec.input_shape[1]
    c = state.params[-1].spec.input_shape[0]
    sets = {name: load_dataset(path, side, c).images for name, path in
            (("train", args.train), ("heldout", args.heldout))}
    rng = np.random.default_rng(args.seed)
    if args.negative == "noise":
        negative = rng.uniform(-1, 1, (len(sets["heldout"]), c, side, side)).astype(np.float32)
    else:
        negative = load_dataset(args.negative, side, c).images
    report = evaluation.score_diagnostics(state, sets["train"], sets["heldout"], negative, rng=rng)
    rows = [{"grid": g, "set": name, "mean": m, "std": s, "n": n}
            for g, per in report.items() for name, (m, s, n) in per.items()]
    write_csv(args.out, rows, ("grid", "set", "mean", "std", "n"))
    for g, per in report.items():
        print(f"grid {g}: {evaluation.table1_pattern(per)[1]}")
    return EXIT_OK


def cmd_features(args, extra) -> int:
    state = load_checkpoint(args.checkpoint)
    spec = state.params[-1].spec
    data = load_dataset(args.images, spec.input_shape[1], spec.input_shape[0])
    bundle = evaluation.extract_features(state, data.images)
    np.save(args.out, bundle.flat)
    index = Path(args.out).with_suffix(".csv")
    write_csv(index, [{"row": i, "file": p.name} for i, p in enumerate(data.paths)], ("row", "file"))
    print(f"wrote {args.out} {bundle.flat.shape} (per-grid dims {bundle.dims}) and {index}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    results = gradcheck.run_suite(args.configs, args.seed, verbose=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgcd", description="Multi-grid energy-based models of images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a key=value config; extra --key=value flags override it")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate images coarse to fine, one PNG grid per level")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", default="samples")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("inpaint", help="mask images, fill them in, and report error and PSNR")
    p.add_argument("checkpoint")
    p.add_argument("images")
    p.add_argument("--mask", choices=inpainting.MASK_KINDS, default="square")
    p.add_argument("--mask-size", type=int, default=None)
    p.add_argument("--out", default="inpainted")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("eval", help="score statistics of training, held-out, negative and synthesized images")
    p.add_argument("checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--negative", default="noise", help="image directory, or 'noise' for uniform noise")
    p.add_argument("--out", default="scores.csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("features", help="export concatenated top-layer features as .npy")
    p.add_argument("checkpoint")
    p.add_argument("images")
    p.add_argument("--out", default="features.npy")
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--configs", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args, extra)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplerDivergence, TrainingDivergence, CheckpointFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
