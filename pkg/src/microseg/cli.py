"""Command line interface for featurization, training, segmentation, benchmarks.

Exit codes: 0 success, 1 runtime failure (bad state, missing files,
format errors), 2 argument errors (argparse prints usage to stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import bench as bench_mod
from . import engine
from .classical import FeatureStack, featurize_classical
from .config import load_config
from .deep import LowResFeatures, load_feature_file, load_weight_archive
from .deep.archive import write_feature_file
from .deep.prep import truncate_compressed, visualize_pca_rgb
from .deep.upsampler import upsample
from .store import ProjectStore


def _store(args) -> ProjectStore:
    config = load_config(args.config)
    root = args.store if getattr(args, "store", None) else config.store_root
    return ProjectStore(root)


def _load_store_project(args):
    store = _store(args)
    project, extra = store.load_project(args.project)
    return store, project, extra


# -- subcommand implementations -------------------------------------------------


def _flip_average(image: np.ndarray, lr: LowResFeatures, weights) -> FeatureStack:
    """Upsample under all four axis flips and average the unflipped results.

    The low-res grid is flipped alongside the image, which is exact only when
    the patch grid covers the image evenly; enforced by the caller.
    """
    total = None
    names = None
    for flip_rows, flip_cols in ((False, False), (False, True),
                                 (True, False), (True, True)):
        axes = tuple(np.flatnonzero([flip_rows, flip_cols]))
        view = np.flip(image, axes) if axes else image
        grid = np.flip(lr.grid, axes) if axes else lr.grid
        out = upsample(np.ascontiguousarray(view),
                       LowResFeatures(np.ascontiguousarray(grid),
                                      lr.patch_size, lr.source_image_dims),
                       weights)
        back = np.flip(out.data, axes) if axes else out.data
        total = back.copy() if total is None else total + back
        names = out.channel_names
    return FeatureStack(total / 4.0, names, pca_ordered=True)


def cmd_featurize(args) -> int:
    image = bench_mod.load_image(args.image)
    stem = Path(args.image).with_suffix("")
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.image).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    stack = featurize_classical(image)
    np.save(out_dir / f"{stem.name}.classical.npy", stack.data)
    total = stack.n_channels

    if args.deep:
        if not args.features or not args.weights:
            raise ValueError("--deep needs --features F.fts and --weights W.war")
        lr = load_feature_file(args.features)
        weights = load_weight_archive(args.weights)
        if args.k is not None and lr.n_channels != args.k:
            raise ValueError(f"expected k={args.k} feature channels, file has "
                             f"{lr.n_channels}")
        if args.flip_sym:
            h, w = image.shape[:2]
            if h % lr.patch_size or w % lr.patch_size:
                raise ValueError("--flip-sym needs image dims divisible by the "
                                 f"patch size {lr.patch_size}")
            deep = _flip_average(image, lr, weights)
        else:
            deep = upsample(image, lr, weights)
        if args.j is not None:
            deep = truncate_compressed(deep, args.j)
        write_feature_file(out_dir / f"{stem.name}.deep.fts",
                           LowResFeatures(deep.data, patch_size=1,
                                          source_image_dims=image.shape[:2]))
        total += deep.n_channels

    print(total)
    return 0


def cmd_project_new(args) -> int:
    store = _store(args)
    image = bench_mod.load_image(args.image)
    names = args.names.split(",") if args.names else None
    project = engine.Project(image, class_count=args.classes, class_names=names)
    if args.labels:
        project.labels = engine.load_labels_png(
            args.labels, class_count=args.classes, class_names=names)
    if args.deep:
        grid = load_feature_file(args.deep)
        if grid.patch_size != 1:
            if not args.weights:
                raise ValueError("low-resolution features need --weights to "
                                 "upsample")
            stack = upsample(image, grid, load_weight_archive(args.weights))
        else:
            stack = FeatureStack(
                grid.grid, tuple(f"deep_{i}" for i in range(grid.n_channels)),
                pca_ordered=True)
        project.set_deep_stack(stack, cache_key=Path(args.deep).name)
    project_id = args.id or store.new_id()
    store.save_project(project_id, project,
                       extra={"revision": 0, "name": args.name or project_id,
                              "has_image": True})
    print(project_id)
    return 0


def cmd_project_list(args) -> int:
    store = _store(args)
    for project_id in store.project_ids:
        _, extra = store.load_project(project_id)
        print(f"{project_id}  rev={extra.get('revision', 0)}  "
              f"{extra.get('name', '')}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    store, project, extra = _load_store_project(args)
    train_config = config.train_config(seed=args.seed)
    _, metrics = engine.train_on_labels(project, args.kind, train_config,
                                        use_deep=args.use_deep, j=args.j)
    extra["revision"] = int(extra.get("revision", 0)) + 1
    store.save_project(args.project, project, extra=extra)
    print(f"train_accuracy={metrics['train_accuracy']:.4f} "
          f"n_samples={metrics['n_samples']} kind={metrics['kind']}")
    return 0


def cmd_segment(args) -> int:
    store, project, extra = _load_store_project(args)
    result = engine.segment(project)
    engine.save_segmentation_png(args.output, result)
    if args.probabilities:
        np.save(args.probabilities, result.probabilities)
    # caches computed during segmentation are worth keeping
    store.save_project(args.project, project, extra=extra)
    print(args.output)
    return 0


def cmd_viz_features(args) -> int:
    _, project, _ = _load_store_project(args)
    stack = project.deep_stack or project.classical_stack()
    rgb = (visualize_pca_rgb(stack) * 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(args.output)
    print(args.output)
    return 0


def cmd_bench(args) -> int:
    import configparser

    parser = configparser.ConfigParser()
    if not parser.read(args.spec):
        raise FileNotFoundError(f"bench spec {args.spec} not found")
    section = parser["bench"]
    sweep = section.get("sweep_train_counts", "").strip()
    spec = bench_mod.BenchmarkSpec(
        dataset_path=Path(section["dataset"]),
        n_train_images=section.getint("n_train_images", 1),
        variants=tuple(v.strip() for v in section["variants"].split(",")),
        classifier_kinds=tuple(
            k.strip() for k in section.get("kinds", "gbt").split(",")),
        seeds=tuple(int(s) for s in section.get("seeds", "0").split(",")),
        miou_variant=section.get("miou_variant", "iou"),
        sweep_train_counts=tuple(int(c) for c in sweep.split(","))
        if sweep else None,
    )
    report = bench_mod.run_benchmark(spec)
    out = Path(args.output) if args.output else Path(args.spec).with_suffix(
        ".report.json")
    out.write_text(json.dumps(report.to_dict(), indent=2))
    print(bench_mod.format_table(report))
    print(f"report written to {out}")
    return 0


def cmd_synth_dataset(args) -> int:
    if args.kind == "bands":
        root = bench_mod.make_synthetic_dataset(
            args.directory, n_images=args.images, size=args.size,
            class_count=args.classes, seed=args.seed)
    else:
        if args.classes != 2:
            raise ValueError("texture datasets are two-class")
        root = bench_mod.make_texture_dataset(
            args.directory, n_images=args.images, size=args.size,
            seed=args.seed)
    print(root)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = load_config(args.config)
    if args.store:
        config.store_root = Path(args.store)
    host = args.host or config.host
    port = args.port or config.port
    uvicorn.run(create_app(config), host=host, port=port)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microseg",
        description="interactive segmentation workbench")
    parser.add_argument("--config", help="INI config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="compute feature stacks for an image")
    p.add_argument("image")
    p.add_argument("--deep", action="store_true",
                   help="also upsample low-res deep features")
    p.add_argument("--weights", help="upsampler weight archive (.war)")
    p.add_argument("--features", help="low-res deep features (.fts)")
    p.add_argument("--k", type=int, help="expected deep channel count")
    p.add_argument("--j", type=int, help="keep only the first j deep channels")
    p.add_argument("--flip-sym", action="store_true",
                   help="average the upsampled features over axis flips")
    p.add_argument("--out-dir", help="output directory (default: image's)")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("project", help="manage stored projects")
    psub = p.add_subparsers(dest="project_command", required=True)
    q = psub.add_parser("new", help="create a project from an image")
    q.add_argument("--store", help="store root directory")
    q.add_argument("--image", required=True)
    q.add_argument("--classes", type=int, default=2)
    q.add_argument("--names", help="comma-separated class names")
    q.add_argument("--labels", help="indexed PNG with sparse labels")
    q.add_argument("--deep", help="deep feature file (.fts) to attach")
    q.add_argument("--weights", help="weights to upsample low-res features")
    q.add_argument("--id", help="explicit project id")
    q.add_argument("--name", help="display name")
    q.set_defaults(func=cmd_project_new)
    q = psub.add_parser("list", help="list stored projects")
    q.add_argument("--store", help="store root directory")
    q.set_defaults(func=cmd_project_list)

    p = sub.add_parser("train", help="fit a classifier on a project's labels")
    p.add_argument("project")
    p.add_argument("--store", help="store root directory")
    p.add_argument("--kind", default="gbt")
    p.add_argument("--use-deep", action="store_true")
    p.add_argument("--j", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment a project with its model")
    p.add_argument("project")
    p.add_argument("--store", help="store root directory")
    p.add_argument("-o", "--output", required=True, help="indexed PNG path")
    p.add_argument("--probabilities", help="also write per-class probs (.npy)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("viz-features", help="PCA RGB view of a project's features")
    p.add_argument("project")
    p.add_argument("--store", help="store root directory")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_viz_features)

    p = sub.add_parser("bench", help="run a benchmark described by an INI spec")
    p.add_argument("spec")
    p.add_argument("-o", "--output", help="report JSON path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth-dataset", help="write a synthetic benchmark dataset")
    p.add_argument("directory")
    p.add_argument("--kind", choices=("bands", "texture"), default="bands",
                   help="bands: classical-separable; texture: deep-only signal")
    p.add_argument("--images", type=int, default=6)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_dataset)

    p = sub.add_parser("serve", help="run the local HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--store", help="store root directory")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
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
