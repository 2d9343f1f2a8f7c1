"""Command line interface for feature extraction and upsampler training.

Exit codes: 0 success, 1 runtime failure (missing backbone weights, bad
files, diverged training), 2 argument errors (argparse prints usage).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backbones import extract_grid, load_backbone
from .data import load_image, to_plane
from .fixtures import make_fixture_set
from .formats import FeatureGrid, write_features
from .pairs import build_pairs
from .train import TrainRunConfig, train_compressed, train_upsampler


def cmd_extract(args) -> int:
    backbone = load_backbone(args.backbone)
    plane = to_plane(load_image(args.image))
    grid = extract_grid(backbone, plane, flip_sym=args.flip_sym)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".fts")
    write_features(out, FeatureGrid(grid, backbone.patch_size, plane.shape))
    print(f"{out}: {grid.shape[0]}x{grid.shape[1]} grid, "
          f"{grid.shape[2]} channels")
    return 0


def cmd_build_pairs(args) -> int:
    entries, skipped = build_pairs(
        args.images, args.hr, args.out, k=args.k, n_t=args.n_t,
        backbone_id=args.backbone, seed=args.seed)
    for stem in skipped:
        print(f"skipped {stem}: no hr target", file=sys.stderr)
    print(f"{args.out}: {len(entries)} pairs written, {len(skipped)} skipped")
    if not entries:
        print("error: no pairs could be built", file=sys.stderr)
        return 1
    return 0


def _train_config(args) -> TrainRunConfig:
    config = TrainRunConfig(seed=args.seed)
    for name in ("d_hidden", "d_down", "learning_rate", "batch_size",
                 "epochs", "patience", "device"):
        value = getattr(args, name)
        if value is not None:
            setattr(config, name, value)
    if args.no_augment:
        config.augment = False
    return config


def _report_run(out, history) -> int:
    print(f"{out}: best validation loss {history['best_val_loss']:.6g} "
          f"at epoch {history['best_epoch']} "
          f"({history['epochs_run']} epochs run)")
    if history["diverged"]:
        print("error: training diverged; archive holds the last good weights",
              file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    _, history = train_upsampler(args.pairs, _train_config(args), args.out)
    return _report_run(args.out, history)


def cmd_train_compressed(args) -> int:
    _, history = train_compressed(args.pairs, args.j, _train_config(args),
                                  args.out)
    return _report_run(args.out, history)


def cmd_make_fixtures(args) -> int:
    out = make_fixture_set(args.out, n_pairs=args.pairs, k=args.k,
                           size=args.size, patch_size=args.patch_size,
                           seed=args.seed)
    print(f"{out}: {args.pairs} synthetic pairs, k={args.k}")
    return 0


def _add_train_options(sub):
    sub.add_argument("--out", required=True, help="output weight archive")
    sub.add_argument("--d-hidden", type=int, dest="d_hidden")
    sub.add_argument("--d-down", type=int, dest="d_down")
    sub.add_argument("--learning-rate", type=float, dest="learning_rate")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--device")
    sub.add_argument("--no-augment", action="store_true")
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upsampler-trainer",
        description="Extract patch features and train the guided upsampler.")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser(
        "extract", help="run a backbone over one image, write an FTS1 grid")
    sub.add_argument("image")
    sub.add_argument("--backbone", default="toy")
    sub.add_argument("--out", help="output path (default: image stem + .fts)")
    sub.add_argument("--flip-sym", action="store_true",
                     help="average features over the four axis flips")
    sub.set_defaults(func=cmd_extract)

    sub = commands.add_parser(
        "build-pairs",
        help="PCA-compress backbone features and join them with hr targets")
    sub.add_argument("--images", required=True, help="directory of images")
    sub.add_argument("--hr", required=True,
                     help="directory of <stem>.fts high-resolution targets")
    sub.add_argument("--out", required=True, help="pair-set directory to write")
    sub.add_argument("--k", type=int, required=True,
                     help="channels kept after the shared PCA")
    sub.add_argument("--n-t", type=int, default=50, dest="n_t",
                     help="transformed views pooled per image")
    sub.add_argument("--backbone", default="toy")
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=cmd_build_pairs)

    sub = commands.add_parser(
        "train", help="fit the upsampler on a pair set, export weights")
    sub.add_argument("pairs", help="pair-set directory")
    _add_train_options(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser(
        "train-compressed",
        help="fit on the first j channels only (compressed upsampler)")
    sub.add_argument("pairs", help="pair-set directory")
    sub.add_argument("--j", type=int, required=True)
    _add_train_options(sub)
    sub.set_defaults(func=cmd_train_compressed)

    sub = commands.add_parser(
        "make-fixtures",
        help="write a synthetic pair set for offline testing")
    sub.add_argument("--out", required=True)
    sub.add_argument("--pairs", type=int, default=8)
    sub.add_argument("--k", type=int, default=8)
    sub.add_argument("--size", type=int, default=56)
    sub.add_argument("--patch-size", type=int, default=14, dest="patch_size")
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=cmd_make_fixtures)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
