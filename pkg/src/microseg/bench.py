"""Evaluation bench: mIoU scoring, benchmark protocol, scaling measurements.

The dataset layout on disk is::

    root/
      manifest.json      {"images": [names in train order], "class_count": C,
                          "class_names": [...], "deep_k": k}
      images/<name>.png  grayscale source images
      labels/<name>.png  sparse labels, 8-bit indexed, 0 = unlabelled
      gt/<name>.png      dense ground truth, 8-bit indexed, values 1..C
      deep/<name>.fts    optional full-resolution deep features (patch_size 1)

Benchmarks train one classifier per (variant, kind, seed) on the pooled
labelled pixels of the first ``n_train_images`` and evaluate on every image
that has ground truth, training images included. Reported spread is the
population std of the class-averaged score across images. ``to_dict`` output
is fully deterministic for fixed seeds; wall-clock timings are kept on the
report object but deliberately left out of it.
"""

from __future__ import annotations

import gc
import json
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .classical import FeatureSetConfig, FeatureStack, featurize_classical
from .classify import KINDS, LabeledSamples, TrainConfig, fit, predict
from .deep import LowResFeatures, UpsamplerSpec, WeightArchive, expected_layer_dims
from .deep.archive import load_feature_file, write_feature_file
from .deep.upsampler import upsample
from .engine import (
    BASELINE_KINDS,
    Segmentation,
    SparseLabelMap,
    add_baseline_channels,
    load_labels_png,
    save_labels_png,
)
from .errors import ShapeError

MIOU_VARIANTS = ("iou", "ppv")


def miou(pred, gt, class_count: int, variant: str = "iou"
         ) -> tuple[np.ndarray, float]:
    """Per-class overlap scores and their average over the present classes.

    variant="iou" scores TP/(TP+FP+FN); variant="ppv" scores TP/(TP+FP).
    Classes absent from both grids are excluded (NaN in the vector); a class
    present only in the ground truth scores 0.
    """
    if variant not in MIOU_VARIANTS:
        raise ValueError(f"unknown miou variant {variant!r}, expected {MIOU_VARIANTS}")
    if isinstance(pred, Segmentation):
        pred = pred.labels
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, grid in (("prediction", pred), ("ground truth", gt)):
        if grid.min() < 1 or grid.max() > class_count:
            raise ValueError(
                f"{name} labels must lie in [1..{class_count}], got "
                f"[{grid.min()}..{grid.max()}]")

    c = class_count
    confusion = np.bincount((gt.ravel() - 1) * c + (pred.ravel() - 1),
                            minlength=c * c).reshape(c, c)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp

    per_class = np.full(c, np.nan)
    for k in range(c):
        support = tp[k] + fp[k] + fn[k]
        if support == 0:
            continue
        denom = tp[k] + fp[k] if variant == "ppv" else support
        per_class[k] = tp[k] / denom if denom > 0 else 0.0
    present = ~np.isnan(per_class)
    class_avg = float(per_class[present].mean()) if present.any() else 0.0
    return per_class, class_avg


# ---------------------------------------------------------------------------
# benchmark protocol


@dataclass(frozen=True)
class BenchmarkSpec:
    dataset_path: Path
    n_train_images: int
    variants: tuple[str, ...]
    classifier_kinds: tuple[str, ...] = ("gbt",)
    seeds: tuple[int, ...] = (0,)
    miou_variant: str = "iou"
    sweep_train_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "dataset_path", Path(self.dataset_path))
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "classifier_kinds", tuple(self.classifier_kinds))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.n_train_images < 1:
            raise ValueError("n_train_images must be >= 1")
        if not self.variants:
            raise ValueError("at least one feature variant is required")
        if self.miou_variant not in MIOU_VARIANTS:
            raise ValueError(f"miou_variant must be one of {MIOU_VARIANTS}")
        unknown = set(self.classifier_kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown classifier kinds: {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def to_dict(self) -> dict:
        return {
            "dataset_path": str(self.dataset_path),
            "n_train_images": self.n_train_images,
            "variants": list(self.variants),
            "classifier_kinds": list(self.classifier_kinds),
            "seeds": list(self.seeds),
            "miou_variant": self.miou_variant,
            "sweep_train_counts": (list(self.sweep_train_counts)
                                   if self.sweep_train_counts else None),
        }


@dataclass
class BenchmarkReport:
    spec_echo: dict
    miou_variant: str
    results: dict
    warnings: list[str]
    timings: dict[str, float] = field(default_factory=dict)
    sweep: list[dict] | None = None

    def to_dict(self) -> dict:
        # timings are intentionally omitted: the dict form is the
        # deterministic, machine-comparable payload
        return {
            "spec": self.spec_echo,
            "miou_variant": self.miou_variant,
            "results": self.results,
            "warnings": list(self.warnings),
            "sweep": self.sweep,
        }


def _parse_variant(variant: str) -> tuple[bool, list[tuple[str, int]]]:
    """"classical" or "deep", optionally followed by +kind:count baselines."""
    head, *rest = variant.split("+")
    if head not in ("classical", "deep"):
        raise ValueError(f"variant {variant!r} must start with 'classical' or 'deep'")
    baselines = []
    for term in rest:
        kind, sep, count = term.partition(":")
        if kind not in BASELINE_KINDS or not sep:
            raise ValueError(
                f"variant term {term!r} must be one of {BASELINE_KINDS} with a count")
        count = int(count)
        if count < 1:
            raise ValueError(f"variant term {term!r} needs a positive count")
        baselines.append((kind, count))
    return head == "deep", baselines


def load_image(path) -> np.ndarray:
    """Image file -> float32 array; integer samples are scaled to [0,1]."""
    data = np.asarray(Image.open(path))
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float32) / np.iinfo(data.dtype).max
    return data.astype(np.float32)


class _Dataset:
    """Materialized dataset: images, label grids, ground truths, deep stacks."""

    def __init__(self, root: Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        manifest = json.loads(manifest_path.read_text())
        self.names = list(manifest["images"])
        self.class_count = int(manifest["class_count"])
        self.warnings: list[str] = []
        self.images: dict[str, np.ndarray] = {}
        self.labels: dict[str, np.ndarray] = {}
        self.gt: dict[str, np.ndarray] = {}
        self.deep: dict[str, FeatureStack] = {}
        for name in self.names:
            self.images[name] = load_image(self.root / "images" / f"{name}.png")
            label_path = self.root / "labels" / f"{name}.png"
            self.labels[name] = load_labels_png(
                label_path, class_count=self.class_count).grid
            gt_path = self.root / "gt" / f"{name}.png"
            if gt_path.exists():
                self.gt[name] = load_labels_png(
                    gt_path, class_count=self.class_count).grid
            else:
                self.warnings.append(f"{name}: ground truth missing, "
                                     "skipped from evaluation")
            deep_path = self.root / "deep" / f"{name}.fts"
            if deep_path.exists():
                grid = load_feature_file(deep_path)
                if grid.patch_size != 1:
                    raise ValueError(
                        f"{deep_path}: benchmark deep features must be "
                        "full-resolution (patch_size 1); upsample them first")
                self.deep[name] = FeatureStack(
                    grid.grid, tuple(f"deep_{i}" for i in range(grid.n_channels)),
                    pca_ordered=True)


def _variant_stack(dataset: _Dataset, name: str, use_deep: bool, baselines,
                   seed: int, cache: dict) -> FeatureStack:
    key = (name, use_deep, tuple(baselines), seed)
    if key in cache:
        return cache[key]
    base_key = (name, "classical")
    if base_key not in cache:
        cache[base_key] = featurize_classical(dataset.images[name],
                                              FeatureSetConfig())
    stack = cache[base_key]
    if use_deep:
        deep = dataset.deep.get(name)
        if deep is None:
            raise ValueError(f"{name}: variant needs deep features but none on disk")
        stack = FeatureStack(
            np.concatenate([stack.data, deep.data], axis=2),
            stack.channel_names + deep.channel_names)
    for b_index, (kind, count) in enumerate(baselines):
        # same channels at train and eval time for a given (run seed, image)
        noise_seed = int(np.random.default_rng(
            [seed, dataset.names.index(name), b_index]).integers(1 << 31))
        stack = add_baseline_channels(stack, kind, count, seed=noise_seed)
    cache[key] = stack
    return stack


def _run_matrix(spec: BenchmarkSpec, dataset: _Dataset, n_train: int,
                cache: dict, timings: dict) -> dict:
    results: dict = {}
    train_names = dataset.names[:n_train]
    for variant in spec.variants:
        use_deep, baselines = _parse_variant(variant)
        results[variant] = {}
        for kind in spec.classifier_kinds:
            per_seed = []
            for seed in spec.seeds:
                t0 = time.perf_counter()
                rows, labels = [], []
                for name in train_names:
                    stack = _variant_stack(dataset, name, use_deep, baselines,
                                           seed, cache)
                    mask = dataset.labels[name] > 0
                    rows.append(stack.data[mask])
                    labels.append(dataset.labels[name][mask])
                rows = np.concatenate(rows, axis=0)
                labels = np.concatenate(labels)
                used = np.unique(labels)
                dense = (np.searchsorted(used, labels) + 1).astype(np.int32)
                samples = LabeledSamples(features=rows, labels=dense,
                                         class_count=used.size)
                model = fit(samples, kind, TrainConfig(seed=seed))
                timings["train_s"] = timings.get("train_s", 0.0) + (
                    time.perf_counter() - t0)

                t0 = time.perf_counter()
                ids = used.astype(np.int32)
                per_image = []
                scores = []
                for name in dataset.names:
                    if name not in dataset.gt:
                        per_image.append({"image": name, "skipped": True})
                        continue
                    stack = _variant_stack(dataset, name, use_deep, baselines,
                                           seed, cache)
                    pred_dense, _ = predict(model, stack)
                    pred = ids[pred_dense - 1]
                    per_class, avg = miou(pred, dataset.gt[name],
                                          dataset.class_count, spec.miou_variant)
                    per_image.append({
                        "image": name,
                        "skipped": False,
                        "class_avg": avg,
                        "per_class": [None if np.isnan(v) else float(v)
                                      for v in per_class],
                    })
                    scores.append(avg)
                timings["eval_s"] = timings.get("eval_s", 0.0) + (
                    time.perf_counter() - t0)
                per_seed.append({
                    "seed": seed,
                    "per_image": per_image,
                    "mean": float(np.mean(scores)) if scores else 0.0,
                    "std": float(np.std(scores)) if scores else 0.0,
                })
            results[variant][kind] = {
                "per_seed": per_seed,
                "mean": float(np.mean([s["mean"] for s in per_seed])),
                "std": float(np.mean([s["std"] for s in per_seed])),
            }
    return results


def run_benchmark(spec: BenchmarkSpec) -> BenchmarkReport:
    """Train per (variant, kind, seed) on the first images, score all of them."""
    started = time.perf_counter()
    dataset = _Dataset(spec.dataset_path)
    if spec.n_train_images > len(dataset.names):
        raise ValueError(
            f"n_train_images={spec.n_train_images} exceeds dataset size "
            f"{len(dataset.names)}")
    for variant in spec.variants:
        _parse_variant(variant)

    cache: dict = {}
    timings: dict[str, float] = {}
    results = _run_matrix(spec, dataset, spec.n_train_images, cache, timings)
    sweep = None
    if spec.sweep_train_counts:
        sweep = []
        for count in spec.sweep_train_counts:
            if not 1 <= count <= len(dataset.names):
                raise ValueError(f"sweep count {count} outside dataset size")
            sweep.append({
                "n_train_images": count,
                "results": _run_matrix(spec, dataset, count, cache, timings),
            })
    timings["total_s"] = time.perf_counter() - started
    return BenchmarkReport(
        spec_echo=spec.to_dict(),
        miou_variant=spec.miou_variant,
        results=results,
        warnings=list(dataset.warnings),
        timings=timings,
        sweep=sweep,
    )


def format_table(report: BenchmarkReport) -> str:
    """Human-readable summary table for terminal output and report files."""
    lines = [
        f"miou variant: {report.miou_variant}    "
        f"(mean +/- std of class-avg across images)",
    ]
    width = max(len(v) for v in report.results)
    for variant, kinds in report.results.items():
        for kind, summary in kinds.items():
            lines.append(f"  {variant:<{width}}  {kind:<13} "
                         f"{summary['mean']:.3f} +/- {summary['std']:.3f}")
    for warning in report.warnings:
        lines.append(f"  warning: {warning}")
    if report.timings:
        parts = ", ".join(f"{k}={v:.2f}s" for k, v in sorted(report.timings.items()))
        lines.append(f"  timings: {parts}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic dataset


def make_synthetic_dataset(root, n_images: int = 6, size: int = 48,
                           class_count: int = 3, seed: int = 0,
                           deep_k: int = 4, noise: float = 0.008) -> Path:
    """Vertical-band dataset whose ground truth is recoverable from intensity.

    Each class is a band of distinct brightness, so classical features alone
    suffice; deep feature files carry softened per-class indicator planes.
    """
    root = Path(root)
    for sub in ("images", "labels", "gt", "deep"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    levels = np.linspace(0.15, 0.85, class_count)
    names = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        name = f"img{i:02d}"
        names.append(name)

        bands = np.minimum((np.arange(size) * class_count) // size,
                           class_count - 1)
        gt = np.broadcast_to(bands + 1, (size, size)).astype(np.int32)
        image = levels[bands][None, :] + rng.normal(0.0, noise, size=(size, size))
        image8 = np.clip(image * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(image8, mode="L").save(root / "images" / f"{name}.png")

        save_labels_png(root / "gt" / f"{name}.png",
                        SparseLabelMap(grid=gt, class_count=class_count))

        # several long strokes per class so the trained thresholds see enough
        # of each class's noise distribution to generalize past the strokes
        labels = np.zeros((size, size), np.int32)
        stroke_rows = rng.choice(np.arange(2, size - 2), size=4 * class_count,
                                 replace=False)
        for cls in range(class_count):
            band_cols = np.flatnonzero(bands == cls)
            center = int(band_cols.mean())
            lo = max(center - 6, band_cols[0])
            hi = min(center + 6, band_cols[-1])
            for row in stroke_rows[4 * cls: 4 * cls + 4]:
                labels[row, lo:hi + 1] = cls + 1
        save_labels_png(root / "labels" / f"{name}.png",
                        SparseLabelMap(grid=labels, class_count=class_count))

        deep = rng.normal(0.0, 0.05, size=(size, size, deep_k)).astype(np.float32)
        for cls in range(min(class_count, deep_k)):
            deep[:, :, cls] += (gt == cls + 1).astype(np.float32)
        write_feature_file(root / "deep" / f"{name}.fts",
                           LowResFeatures(deep, patch_size=1,
                                          source_image_dims=(size, size)))

    (root / "manifest.json").write_text(json.dumps({
        "images": names,
        "class_count": class_count,
        "class_names": [f"class {i}" for i in range(1, class_count + 1)],
        "deep_k": deep_k,
    }, indent=2))
    return root


def make_texture_dataset(root, n_images: int = 5, n_train: int = 1,
                         size: int = 96, seed: int = 0,
                         n_label_pixels: int = 150,
                         deep_noise: float = 0.5) -> Path:
    """Two-class dataset whose class signal lives only in the deep channel.

    Both half-plane classes share one iid noise texture, so classical features
    carry no signal that transfers across images; the single deep channel is a
    noisy class-2 indicator. The first ``n_train`` images carry scattered
    sparse labels and no ground truth, the rest carry dense ground truth and
    empty labels, so benchmark scores come from held-out images only.
    """
    if not 1 <= n_train < n_images:
        raise ValueError("need at least one training and one held-out image")
    root = Path(root)
    for sub in ("images", "labels", "gt", "deep"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        name = f"img{i:02d}"
        names.append(name)

        gt = np.ones((size, size), np.int32)
        gt[:, size // 2:] = 2
        image = rng.normal(0.5, 0.15, size=(size, size))
        image8 = np.clip(image * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(image8, mode="L").save(root / "images" / f"{name}.png")

        labels = np.zeros((size, size), np.int32)
        if i < n_train:
            for cls in (1, 2):
                ys, xs = np.nonzero(gt == cls)
                pick = rng.choice(ys.size, size=n_label_pixels, replace=False)
                labels[ys[pick], xs[pick]] = cls
        else:
            save_labels_png(root / "gt" / f"{name}.png",
                            SparseLabelMap(grid=gt, class_count=2))
        save_labels_png(root / "labels" / f"{name}.png",
                        SparseLabelMap(grid=labels, class_count=2))

        deep = (gt == 2).astype(np.float32) + rng.normal(
            0.0, deep_noise, size=(size, size)).astype(np.float32)
        write_feature_file(root / "deep" / f"{name}.fts",
                           LowResFeatures(deep[:, :, None], patch_size=1,
                                          source_image_dims=(size, size)))

    (root / "manifest.json").write_text(json.dumps({
        "images": names,
        "class_count": 2,
        "class_names": ["class 1", "class 2"],
        "deep_k": 1,
    }, indent=2))
    return root


# ---------------------------------------------------------------------------
# time and memory scaling


def analytic_stack_bytes(h: int, w: int, k: int, n_classical: int = 63) -> int:
    """Classical + deep + concatenated stack, float32: the budget denominator."""
    return 2 * (n_classical + k) * h * w * 4


def _random_archive(k: int, num_stages: int, d_hidden: int, d_down: int,
                    seed: int) -> WeightArchive:
    spec = UpsamplerSpec(d_in=k, d_out=k, d_hidden=d_hidden, d_down=d_down,
                         kernel_size=3, num_stages=num_stages)
    dims = expected_layer_dims(spec, "per_channel", 2, image_channels=1)
    rng = np.random.default_rng(seed)
    tensors = {name: rng.normal(0.0, 0.05, size=shape).astype(np.float32)
               for name, shape in dims.items()}
    return WeightArchive(spec=spec, tensors=tensors, image_channels=1,
                         lr_l1_normalize=True)


def _run_pipeline_once(h: int, w: int, k: int, patch_size: int,
                       archive: WeightArchive,
                       config: FeatureSetConfig | None,
                       seed: int) -> tuple[float, int]:
    """One featurize+upsample pass; returns (wall seconds, peak traced bytes).

    Inputs are allocated before tracing starts so the measurement covers the
    pipeline's own transients: deep stack first, then the classical stack,
    then the concatenated stack, matching the production order.
    """
    rng = np.random.default_rng([seed, h, w])
    image = rng.random((h, w), dtype=np.float32)
    grid = rng.random(((h + patch_size - 1) // patch_size,
                       (w + patch_size - 1) // patch_size, k), dtype=np.float32)
    lr = LowResFeatures(grid, patch_size=patch_size, source_image_dims=(h, w))

    gc.collect()
    tracemalloc.start()
    try:
        t0 = time.perf_counter()
        deep = upsample(image, lr, archive)
        classical = featurize_classical(image, config)
        combined = np.concatenate([classical.data, deep.data], axis=2)
        elapsed = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1]
        del combined, classical, deep
    finally:
        tracemalloc.stop()
    return elapsed, peak


def measure_pipeline_scaling(image_sizes, k: int = 16, num_stages: int = 4,
                             d_hidden: int = 32, d_down: int = 32,
                             patch_size: int = 14,
                             config: FeatureSetConfig | None = None,
                             seed: int = 0) -> list[dict]:
    """Featurize+upsample cost per image size; OOM rows recorded, run continues."""
    archive = _random_archive(k, num_stages, d_hidden, d_down, seed)
    config = config or FeatureSetConfig()
    n_classical = config.channel_count()
    rows = []
    for size in image_sizes:
        h, w = (size, size) if np.isscalar(size) else (int(size[0]), int(size[1]))
        if min(h, w) < 2 * patch_size:
            raise ValueError(f"size {h}x{w} below the 2*patch_size={2 * patch_size} "
                             "minimum")
        row = {"h": h, "w": w, "k": k,
               "analytic_bytes": analytic_stack_bytes(h, w, k, n_classical)}
        try:
            elapsed, peak = _run_pipeline_once(h, w, k, patch_size, archive,
                                               config, seed)
        except MemoryError:
            row.update(time_s=None, peak_bytes=None, status="oom")
        else:
            row.update(time_s=elapsed, peak_bytes=peak, status="ok")
        rows.append(row)
    return rows
