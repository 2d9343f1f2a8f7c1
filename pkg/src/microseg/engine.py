"""Interactive segmentation workflow: projects, caches, training, applying.

A Project owns one image plus everything derived from it: the classical
feature stack (computed lazily, cached), an optional deep feature stack
(attached by the caller, cached under an extractor key), sparse user labels,
and the most recent trained model. Cache rules are strict: editing labels
never touches feature caches; replacing the image or the feature config
always drops the stacks they were computed from. Models remember the
fingerprint of the features they were trained on so applying a model to
changed inputs fails loudly instead of silently mixing generations.

Projects are single-writer: callers serialize label edits, training and
cache writes; concurrent reads are safe between writers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .classical import FeatureSetConfig, FeatureStack, featurize_classical
from .classify import ClassifierModel, LabeledSamples, TrainConfig, fit, predict
from .deep.prep import truncate_compressed
from .errors import ShapeError, StateError
from .tensors import as_f32

BASELINE_KINDS = ("noise", "uniform", "duplicate")

# palette for indexed-PNG export; index 0 (unlabelled) stays black
_CLASS_COLORS = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
)


@dataclass(frozen=True)
class SparseLabelMap:
    """(H,W) grid of class ids; 0 means unlabelled, 1..C are classes."""

    grid: np.ndarray
    class_count: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.int32)
        if grid.ndim != 2:
            raise ShapeError(f"label grid must be (H,W), got {grid.shape}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if grid.size and (grid.min() < 0 or grid.max() > self.class_count):
            raise ValueError(
                f"labels must lie in [0..{self.class_count}], got "
                f"[{grid.min()}..{grid.max()}]")
        names = self.class_names
        if names is None:
            names = tuple(f"class {i}" for i in range(1, self.class_count + 1))
        else:
            names = tuple(str(n) for n in names)
            if len(names) != self.class_count:
                raise ValueError(
                    f"{len(names)} class names for {self.class_count} classes")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "class_names", names)

    @classmethod
    def empty(cls, h: int, w: int, class_count: int,
              class_names=None) -> "SparseLabelMap":
        return cls(grid=np.zeros((h, w), np.int32), class_count=class_count,
                   class_names=class_names)

    def labelled_classes(self) -> tuple[int, ...]:
        present = np.unique(self.grid)
        return tuple(int(c) for c in present if c > 0)

    def labelled_count(self) -> int:
        return int((self.grid > 0).sum())


def apply_rle(labels: SparseLabelMap, records) -> SparseLabelMap:
    """Paint run-length records {class,row,start,len} onto a copy; class 0 erases."""
    h, w = labels.grid.shape
    grid = labels.grid.copy()
    for rec in records:
        try:
            cls, row, start, length = (int(rec["class"]), int(rec["row"]),
                                       int(rec["start"]), int(rec["len"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed RLE record {rec!r}") from e
        if not 0 <= cls <= labels.class_count:
            raise ValueError(f"class {cls} outside [0..{labels.class_count}]")
        if not 0 <= row < h:
            raise ValueError(f"row {row} outside image of height {h}")
        if length < 1 or start < 0 or start + length > w:
            raise ValueError(f"run [{start}, {start + length}) outside row of width {w}")
        grid[row, start:start + length] = cls
    return SparseLabelMap(grid=grid, class_count=labels.class_count,
                          class_names=labels.class_names)


def rle_records(labels: SparseLabelMap) -> list[dict]:
    """Canonical run-length export: maximal runs, ordered by row then start."""
    h, w = labels.grid.shape
    records = []
    for row in range(h):
        line = labels.grid[row]
        changes = np.flatnonzero(np.diff(line)) + 1
        starts = np.concatenate([[0], changes])
        ends = np.concatenate([changes, [w]])
        for start, end in zip(starts, ends):
            cls = int(line[start])
            if cls > 0:
                records.append({"class": cls, "row": row,
                                "start": int(start), "len": int(end - start)})
    return records


def _palette_bytes() -> bytes:
    flat = [0, 0, 0]
    for i in range(255):
        flat.extend(_CLASS_COLORS[i % len(_CLASS_COLORS)])
    return bytes(flat)


def save_labels_png(path, labels: SparseLabelMap):
    """8-bit indexed PNG; palette index 0 is the unlabelled class."""
    if labels.class_count > 255:
        raise ValueError("indexed PNG export supports at most 255 classes")
    img = Image.fromarray(labels.grid.astype(np.uint8), mode="P")
    img.putpalette(_palette_bytes())
    img.save(path, format="PNG")


def load_labels_png(path, class_count: int | None = None,
                    class_names=None) -> SparseLabelMap:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise ValueError(f"{path}: expected an 8-bit indexed PNG, got mode {img.mode}")
    grid = np.asarray(img, dtype=np.int32)
    if class_count is None:
        class_count = max(int(grid.max()), 1)
    return SparseLabelMap(grid=grid, class_count=class_count, class_names=class_names)


@dataclass(frozen=True)
class Segmentation:
    """Dense class map plus per-class probabilities; argmax(prob) == labels."""

    labels: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        probs = as_f32(self.probabilities)
        if labels.ndim != 2 or probs.ndim != 3 or probs.shape[:2] != labels.shape:
            raise ShapeError(
                f"labels {labels.shape} and probabilities {probs.shape} disagree")
        c = probs.shape[2]
        if labels.min() < 1 or labels.max() > c:
            raise ValueError(f"labels must lie in [1..{c}]")
        expected = np.argmax(probs, axis=2).astype(np.int32) + 1
        if not np.array_equal(expected, labels):
            raise ValueError("labels disagree with the probability argmax tie rule")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probabilities", probs)

    @property
    def class_count(self) -> int:
        return self.probabilities.shape[2]


def save_segmentation_png(path, segmentation: Segmentation):
    save_labels_png(path, SparseLabelMap(grid=segmentation.labels,
                                         class_count=segmentation.class_count))


@dataclass
class TrainedModel:
    """A fit classifier plus what it was trained on, for staleness checks."""

    classifier: ClassifierModel
    class_ids: tuple[int, ...]
    use_deep: bool
    j: int | None
    feature_key: str


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.hexdigest()[:16]


class Project:
    """One image with its caches, labels, model and training history."""

    def __init__(self, image, feature_config: FeatureSetConfig | None = None,
                 class_count: int = 2, class_names=None):
        self._image = self._check_image(image)
        self._config = feature_config or FeatureSetConfig()
        h, w = self._image.shape[:2]
        self._labels = SparseLabelMap.empty(h, w, class_count, class_names)
        self._classical: FeatureStack | None = None
        self._deep: FeatureStack | None = None
        self._deep_key: str | None = None
        self.model: TrainedModel | None = None
        self.history: list[dict] = []

    @staticmethod
    def _check_image(image) -> np.ndarray:
        image = as_f32(image)
        if image.ndim not in (2, 3) or min(image.shape[:2]) < 1:
            raise ShapeError(f"image must be (H,W) or (H,W,C), got {image.shape}")
        return image

    # -- inputs whose mutation drives cache invalidation ---------------------

    @property
    def image(self) -> np.ndarray:
        return self._image

    @image.setter
    def image(self, value):
        value = self._check_image(value)
        dims_changed = value.shape[:2] != self._image.shape[:2]
        self._image = value
        self._classical = None
        self._deep = None
        self._deep_key = None
        if dims_changed:
            self._labels = SparseLabelMap.empty(
                value.shape[0], value.shape[1],
                self._labels.class_count, self._labels.class_names)

    @property
    def feature_config(self) -> FeatureSetConfig:
        return self._config

    @feature_config.setter
    def feature_config(self, value: FeatureSetConfig):
        self._config = value
        self._classical = None

    @property
    def labels(self) -> SparseLabelMap:
        return self._labels

    @labels.setter
    def labels(self, value: SparseLabelMap):
        if value.grid.shape != self._image.shape[:2]:
            raise ShapeError(
                f"label grid {value.grid.shape} does not match image "
                f"{self._image.shape[:2]}")
        self._labels = value

    def paint(self, records):
        self._labels = apply_rle(self._labels, records)

    @property
    def class_count(self) -> int:
        return self._labels.class_count

    @property
    def class_names(self) -> tuple[str, ...]:
        return self._labels.class_names

    # -- feature caches -------------------------------------------------------

    def classical_stack(self) -> FeatureStack:
        if self._classical is None:
            self._classical = featurize_classical(self._image, self._config)
        return self._classical

    @property
    def classical_cached(self) -> FeatureStack | None:
        """The classical stack if already computed, without triggering work."""
        return self._classical

    def set_classical_stack(self, stack: FeatureStack):
        """Install a precomputed classical stack, e.g. from a persisted cache."""
        if stack.data.shape[:2] != self._image.shape[:2]:
            raise ShapeError(
                f"stack {stack.data.shape[:2]} does not match image "
                f"{self._image.shape[:2]}")
        if stack.n_channels != self._config.channel_count():
            raise ShapeError(
                f"stack has {stack.n_channels} channels, the active config "
                f"produces {self._config.channel_count()}")
        self._classical = stack

    def set_deep_stack(self, stack: FeatureStack, cache_key: str):
        if stack.data.shape[:2] != self._image.shape[:2]:
            raise ShapeError(
                f"deep stack {stack.data.shape[:2]} does not match image "
                f"{self._image.shape[:2]}")
        self._deep = stack
        self._deep_key = str(cache_key)

    @property
    def deep_stack(self) -> FeatureStack | None:
        return self._deep

    @property
    def deep_cache_key(self) -> str | None:
        return self._deep_key

    def image_hash(self) -> str:
        return _digest(str(self._image.shape).encode(),
                       np.ascontiguousarray(self._image).tobytes())

    def label_hash(self) -> str:
        return _digest(str(self._labels.grid.shape).encode(),
                       self._labels.grid.tobytes())

    def feature_key(self, use_deep: bool, j: int | None) -> str:
        config_part = json.dumps(self._config.to_dict(), sort_keys=True)
        key = f"{self.image_hash()}:{_digest(config_part.encode())}"
        if use_deep:
            k = self._deep.n_channels if self._deep is not None else 0
            key += f":{self._deep_key}/k={k}/j={j}"
        return key


def build_feature_stack(project: Project, use_deep: bool,
                        j: int | None = None) -> FeatureStack:
    """Classical channels first, then the (optionally truncated) deep ones."""
    classical = project.classical_stack()
    if not use_deep:
        return classical
    deep = project.deep_stack
    if deep is None:
        raise StateError(
            "no deep feature cache on this project; extract deep features first")
    if j is not None and j != deep.n_channels:
        deep = truncate_compressed(deep, j)
    data = np.concatenate([classical.data, deep.data], axis=2)
    return FeatureStack(data, classical.channel_names + deep.channel_names)


def train_on_labels(project: Project, kind: str,
                    config: TrainConfig | None = None,
                    use_deep: bool = False, j: int | None = None,
                    ) -> tuple[ClassifierModel, dict]:
    """Fit a classifier on the labelled pixels; stores the model on the project.

    Class ids are compacted to a dense range for the classifier and mapped
    back when segmenting, so unused intermediate ids survive untouched.
    """
    stack = build_feature_stack(project, use_deep, j)
    grid = project.labels.grid
    mask = grid > 0
    used = np.unique(grid[mask])
    if used.size < 2:
        raise ValueError(
            "training needs labelled pixels from at least two classes; "
            f"currently labelled: {[int(u) for u in used]}")

    rows = stack.data[mask]
    dense = (np.searchsorted(used, grid[mask]) + 1).astype(np.int32)
    samples = LabeledSamples(features=rows, labels=dense, class_count=used.size)
    model = fit(samples, kind, config)

    train_labels, _ = predict(model, rows)
    counts = {int(cls): int((grid[mask] == cls).sum()) for cls in used}
    metrics = {
        "kind": kind,
        "use_deep": use_deep,
        "j": j,
        "n_channels": stack.n_channels,
        "n_samples": int(mask.sum()),
        "per_class_counts": counts,
        "train_accuracy": float(np.mean(train_labels == dense)),
        "training_time_s": model.training_time_s,
    }
    project.model = TrainedModel(
        classifier=model,
        class_ids=tuple(int(u) for u in used),
        use_deep=use_deep,
        j=j,
        feature_key=project.feature_key(use_deep, j),
    )
    project.history.append({"label_hash": project.label_hash(), "metrics": metrics})
    return model, metrics


def segment(project: Project) -> Segmentation:
    """Apply the current model to every pixel, labelled pixels included.

    Labelled pixels are reported as the classifier sees them, never forced
    back to the user's label.
    """
    bundle = project.model
    if bundle is None:
        raise StateError("no trained classifier on this project; train first")
    if project.feature_key(bundle.use_deep, bundle.j) != bundle.feature_key:
        raise StateError(
            "stale feature cache: the image, feature config or deep features "
            "changed since the model was trained; re-train before segmenting")

    stack = build_feature_stack(project, bundle.use_deep, bundle.j)
    dense_labels, dense_probs = predict(bundle.classifier, stack)

    ids = np.asarray(bundle.class_ids, np.int32)
    labels = ids[dense_labels - 1]
    h, w = labels.shape
    probs = np.zeros((h, w, project.class_count), np.float32)
    for dense_idx, class_id in enumerate(ids):
        probs[:, :, class_id - 1] = dense_probs[:, :, dense_idx]
    return Segmentation(labels=labels, probabilities=probs)


def add_baseline_channels(stack: FeatureStack, kind: str, count: int,
                          seed: int = 0) -> FeatureStack:
    """Append control channels: seeded unit-uniform noise, zeros, or copies."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}, expected {BASELINE_KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w, f = stack.data.shape
    if kind == "noise":
        rng = np.random.default_rng(seed)
        extra = rng.random(size=(h, w, count), dtype=np.float32)
        names = tuple(f"baseline_noise_{i}" for i in range(count))
    elif kind == "uniform":
        extra = np.zeros((h, w, count), np.float32)
        names = tuple(f"baseline_uniform_{i}" for i in range(count))
    else:
        if count > f:
            raise ValueError(f"cannot duplicate {count} of {f} channels")
        extra = stack.data[:, :, :count].copy()
        names = tuple(f"baseline_dup_{stack.channel_names[i]}" for i in range(count))
    data = np.concatenate([stack.data, extra], axis=2)
    return FeatureStack(data, stack.channel_names + names,
                        pca_ordered=stack.pca_ordered)
