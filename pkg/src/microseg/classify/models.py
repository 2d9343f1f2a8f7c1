"""Per-pixel classifier families sharing one fit/predict interface.

Four kinds are implemented: histogram gradient-boosted trees ("gbt") with a
softmax multiclass objective, a Gini random forest ("random_forest"),
multinomial logistic regression ("logistic") and ridge regression onto
one-hot targets ("linear"). An "mlp" tag is reserved in the interface but
deliberately not implemented.

Class ids are 1-based; 0 is reserved for "unlabelled" by the callers that
gather training pixels. Ties in the class probabilities resolve to the
lowest class id. Tree kinds quantize each feature column into at most 256
quantile bins before growing; split thresholds are stored back in feature
units so prediction never needs the bin edges.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ..classical import FeatureStack
from ..deep.archive import load_named_tensors, save_named_tensors
from ..errors import ArchiveError, ShapeError
from ..tensors import as_f32
from . import _kernels

KINDS = ("gbt", "random_forest", "logistic", "linear")
RESERVED_KINDS = ("mlp",)

_N_BINS = 256
_LAMBDA = 1.0  # fixed L2 on tree leaf values, part of the gain definition
_HESS_FLOOR = 1e-16
_BLOCK_BYTES = 8 << 20
_INT_TENSORS = frozenset(
    {"node_feature", "node_left", "node_right", "tree_offset", "tree_class"}
)


@dataclass(frozen=True)
class LabeledSamples:
    """Feature rows with 1-based class labels covering every declared class."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        feats = as_f32(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ShapeError(f"features must be (M,F) with M,F >= 1, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("features contain NaN or infinite values")
        labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if labels.shape[0] != feats.shape[0]:
            raise ShapeError(
                f"{labels.shape[0]} labels for {feats.shape[0]} feature rows")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        present = np.unique(labels)
        if present[0] < 1 or present[-1] > self.class_count:
            raise ValueError(
                f"labels must lie in [1..{self.class_count}], got range "
                f"[{present[0]}..{present[-1]}]")
        if len(present) != self.class_count:
            missing = sorted(set(range(1, self.class_count + 1)) - set(present.tolist()))
            raise ValueError(f"declared classes never labelled: {missing}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for every kind; unused fields are simply ignored."""

    n_rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    min_child_weight: float = 1.0
    n_trees: int = 100
    rf_max_depth: int | None = None
    features_per_split: int | None = None
    l2: float = 1e-4
    max_iter: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1 or self.n_trees < 1 or self.max_iter < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.rf_max_depth is not None and self.rf_max_depth < 1:
            raise ValueError("rf_max_depth must be >= 1 when bounded")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1 when set")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.min_child_weight < 0 or self.l2 < 0:
            raise ValueError("min_child_weight and l2 must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_rounds": self.n_rounds,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_child_weight": self.min_child_weight,
            "n_trees": self.n_trees,
            "rf_max_depth": self.rf_max_depth,
            "features_per_split": self.features_per_split,
            "l2": self.l2,
            "max_iter": self.max_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClassifierModel:
    """Immutable-after-fit model: flat tensors plus a few scalar settings."""

    kind: str
    class_count: int
    feature_arity: int
    training_time_s: float
    tensors: dict[str, np.ndarray]
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")

    @property
    def is_constant(self) -> bool:
        return bool(self.settings.get("constant", False))


# ---------------------------------------------------------------------------
# quantile binning shared by the tree kinds


def _quantile_edges(features: np.ndarray) -> list[np.ndarray]:
    qs = np.linspace(0.0, 1.0, _N_BINS + 1)[1:-1]
    edges = []
    for f in range(features.shape[1]):
        e = np.quantile(features[:, f].astype(np.float64), qs)
        edges.append(np.unique(e.astype(np.float32)))
    return edges


def _bin_columns(features: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    binned = np.empty(features.shape, np.uint8)
    for f, e in enumerate(edges):
        binned[:, f] = np.searchsorted(e, features[:, f], side="right")
    return binned


def _map_thresholds(node_feature, node_bin, edges) -> np.ndarray:
    thresholds = np.zeros(node_feature.shape[0], np.float32)
    for n in np.flatnonzero(node_feature >= 0):
        thresholds[n] = edges[node_feature[n]][node_bin[n]]
    return thresholds


def _pack_trees(trees: list[dict], n_features: int, with_leaf_probs: bool) -> dict:
    offsets = np.zeros(len(trees) + 1, np.int32)
    for t, tree in enumerate(trees):
        offsets[t + 1] = offsets[t] + tree["n_nodes"]
    packed = {
        "node_feature": np.concatenate([t["feature"] for t in trees]),
        "node_threshold": np.concatenate([t["threshold"] for t in trees]),
        "node_left": np.concatenate([t["left"] for t in trees]),
        "node_right": np.concatenate([t["right"] for t in trees]),
        "tree_offset": offsets,
    }
    if with_leaf_probs:
        packed["leaf_probs"] = np.concatenate([t["leaf_probs"] for t in trees], axis=0)
    else:
        packed["node_value"] = np.concatenate([t["value"] for t in trees])
        packed["tree_class"] = np.array([t["class"] for t in trees], np.int32)
    importance = np.zeros(n_features, np.float64)
    for tree in trees:
        split = tree["feature"] >= 0
        np.add.at(importance, tree["feature"][split], tree["gain"][split])
    packed["gain_importance"] = importance.astype(np.float32)
    return packed


# ---------------------------------------------------------------------------
# fitting


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def _fit_gbt(samples: LabeledSamples, config: TrainConfig) -> dict:
    edges = _quantile_edges(samples.features)
    binned = _bin_columns(samples.features, edges)
    y0 = samples.labels.astype(np.int64) - 1
    n, k = samples.n_samples, samples.class_count
    onehot = np.zeros((n, k), np.float64)
    onehot[np.arange(n), y0] = 1.0

    raw = np.zeros((n, k), np.float64)
    trees = []
    for _ in range(config.n_rounds):
        probs = _softmax(raw)
        for cls in range(k):
            grad = probs[:, cls] - onehot[:, cls]
            hess = np.maximum(probs[:, cls] * (1.0 - probs[:, cls]), _HESS_FLOOR)
            (feature, bins, left, right, value, gain, n_nodes,
             row_pred) = _kernels.grow_gbt_tree(
                binned, grad, hess, config.max_depth,
                float(config.min_child_weight), _LAMBDA, _N_BINS)
            raw[:, cls] += config.learning_rate * row_pred
            trees.append({
                "feature": feature[:n_nodes].copy(),
                "threshold": _map_thresholds(feature[:n_nodes], bins[:n_nodes], edges),
                "left": left[:n_nodes].copy(),
                "right": right[:n_nodes].copy(),
                "value": (config.learning_rate * value[:n_nodes]).astype(np.float32),
                "gain": gain[:n_nodes].copy(),
                "n_nodes": n_nodes,
                "class": cls,
            })
    return _pack_trees(trees, samples.n_features, with_leaf_probs=False)


def _fit_random_forest(samples: LabeledSamples, config: TrainConfig) -> dict:
    edges = _quantile_edges(samples.features)
    binned = _bin_columns(samples.features, edges)
    y0 = (samples.labels - 1).astype(np.int64)
    n = samples.n_samples
    n_try = config.features_per_split or max(1, round(np.sqrt(samples.n_features)))
    n_try = min(n_try, samples.n_features)
    depth = config.rf_max_depth if config.rf_max_depth is not None else 1 << 30

    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t])
        rows = rng.integers(0, n, size=n).astype(np.int32)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        (feature, bins, left, right, leaf_probs, gain,
         n_nodes) = _kernels.grow_rf_tree(
            binned, y0, samples.class_count, rows, tree_seed, n_try,
            depth, _N_BINS)
        trees.append({
            "feature": feature[:n_nodes].copy(),
            "threshold": _map_thresholds(feature[:n_nodes], bins[:n_nodes], edges),
            "left": left[:n_nodes].copy(),
            "right": right[:n_nodes].copy(),
            "leaf_probs": leaf_probs[:n_nodes].copy(),
            "gain": gain[:n_nodes].copy(),
            "n_nodes": n_nodes,
        })
    return _pack_trees(trees, samples.n_features, with_leaf_probs=True)


def _fit_logistic(samples: LabeledSamples, config: TrainConfig) -> dict:
    x1 = np.column_stack([samples.features.astype(np.float64),
                          np.ones(samples.n_samples)])
    n, k = samples.n_samples, samples.class_count
    y0 = samples.labels.astype(np.int64) - 1
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y0] = 1.0

    def objective(flat):
        w = flat.reshape(k, -1)
        scores = x1 @ w.T
        scores -= scores.max(axis=1, keepdims=True)
        exp = np.exp(scores)
        norm = exp.sum(axis=1)
        nll = -(scores[np.arange(n), y0] - np.log(norm)).mean()
        probs = exp / norm[:, None]
        grad = (probs - onehot).T @ x1 / n
        reg = w.copy()
        reg[:, -1] = 0.0  # bias is unregularized
        return nll + 0.5 * config.l2 * (reg * reg).sum(), (grad + config.l2 * reg).ravel()

    result = minimize(objective, np.zeros(k * x1.shape[1]), jac=True,
                      method="L-BFGS-B", options={"maxiter": config.max_iter})
    return {"weights": result.x.reshape(k, -1).astype(np.float32)}


def _fit_linear(samples: LabeledSamples, config: TrainConfig) -> dict:
    x1 = np.column_stack([samples.features.astype(np.float64),
                          np.ones(samples.n_samples)])
    n, k = samples.n_samples, samples.class_count
    onehot = np.zeros((n, k))
    onehot[np.arange(n), samples.labels - 1] = 1.0
    gram = x1.T @ x1
    ridge = np.full(x1.shape[1], config.l2)
    ridge[-1] = 0.0
    gram[np.diag_indices_from(gram)] += ridge
    weights = np.linalg.solve(gram, x1.T @ onehot)
    return {"weights": weights.T.astype(np.float32)}


_FITTERS = {
    "gbt": _fit_gbt,
    "random_forest": _fit_random_forest,
    "logistic": _fit_logistic,
    "linear": _fit_linear,
}


def fit(samples: LabeledSamples, kind: str, config: TrainConfig | None = None
        ) -> ClassifierModel:
    """Train a classifier of the given kind; deterministic for a fixed seed."""
    if kind in RESERVED_KINDS:
        raise ValueError(f"classifier kind {kind!r} is reserved but not implemented")
    if kind not in KINDS:
        raise ValueError(f"unknown classifier kind {kind!r}, expected one of {KINDS}")
    config = config or TrainConfig()
    start = time.perf_counter()
    if samples.class_count == 1:
        tensors, settings = {}, {"constant": True}
    else:
        tensors, settings = _FITTERS[kind](samples, config), {}
    return ClassifierModel(
        kind=kind,
        class_count=samples.class_count,
        feature_arity=samples.n_features,
        training_time_s=time.perf_counter() - start,
        tensors=tensors,
        settings=settings,
    )


# ---------------------------------------------------------------------------
# prediction


def _predict_block(model: ClassifierModel, block: np.ndarray) -> np.ndarray:
    """Class probabilities for a contiguous (rows, F) float32 block."""
    n, k = block.shape[0], model.class_count
    if model.is_constant:
        return np.ones((n, k), np.float32)
    t = model.tensors
    if model.kind == "gbt":
        raw = np.zeros((n, k), np.float64)
        _kernels.accumulate_gbt_raw(
            block, t["node_feature"], t["node_threshold"], t["node_left"],
            t["node_right"], t["node_value"], t["tree_offset"], t["tree_class"], raw)
        return _softmax(raw).astype(np.float32)
    if model.kind == "random_forest":
        acc = np.zeros((n, k), np.float64)
        _kernels.accumulate_rf_probs(
            block, t["node_feature"], t["node_threshold"], t["node_left"],
            t["node_right"], t["leaf_probs"], t["tree_offset"], acc)
        n_trees = t["tree_offset"].shape[0] - 1
        return (acc / n_trees).astype(np.float32)
    weights = t["weights"].astype(np.float64)
    scores = block.astype(np.float64) @ weights[:, :-1].T + weights[:, -1]
    return _softmax(scores).astype(np.float32)


def predict(model: ClassifierModel, features) -> tuple[np.ndarray, np.ndarray]:
    """(labels, probabilities) for flat rows or a whole FeatureStack.

    Labels are the probability argmax with ties resolved to the lowest
    class id. Full images are processed in bounded row blocks.
    """
    stack_dims = None
    if isinstance(features, FeatureStack):
        stack_dims = features.data.shape[:2]
        rows = features.data.reshape(-1, features.n_channels)
    else:
        rows = as_f32(features)
        if rows.ndim != 2:
            raise ShapeError(f"expected (M,F) feature rows, got {rows.shape}")
    if rows.shape[1] != model.feature_arity:
        raise ShapeError(
            f"model expects {model.feature_arity} features, got {rows.shape[1]}")

    n = rows.shape[0]
    probs = np.empty((n, model.class_count), np.float32)
    block = max(1, _BLOCK_BYTES // max(1, rows.shape[1] * 4))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        probs[lo:hi] = _predict_block(model, np.ascontiguousarray(rows[lo:hi]))
    labels = (np.argmax(probs, axis=1) + 1).astype(np.int32)

    if stack_dims is not None:
        return (labels.reshape(stack_dims),
                probs.reshape(stack_dims + (model.class_count,)))
    return labels, probs


def feature_importances(model: ClassifierModel) -> np.ndarray:
    """Normalized split-gain attribution; only tree kinds support it."""
    if model.kind not in ("gbt", "random_forest"):
        raise ValueError(f"feature importances are unsupported for kind {model.kind!r}")
    if model.is_constant:
        return np.full(model.feature_arity, 1.0 / model.feature_arity, np.float64)
    raw = model.tensors["gain_importance"].astype(np.float64)
    total = raw.sum()
    if total <= 0:
        return np.full(model.feature_arity, 1.0 / model.feature_arity, np.float64)
    return raw / total


# ---------------------------------------------------------------------------
# persistence (same container format as the upsampler weight archive)


def save_model(path, model: ClassifierModel):
    tensors = {}
    for name, tensor in model.tensors.items():
        if name in _INT_TENSORS:
            if tensor.size and np.abs(tensor).max() >= 1 << 24:
                raise ArchiveError(f"{name} indices exceed exact float32 range")
            tensors[name] = tensor.astype(np.float32)
        else:
            tensors[name] = as_f32(tensor)
    manifest = {
        "format": "classifier-model",
        "format_version": 1,
        "kind": model.kind,
        "class_count": model.class_count,
        "feature_arity": model.feature_arity,
        "training_time_s": model.training_time_s,
        "settings": model.settings,
        "layers": list(tensors),
    }
    save_named_tensors(path, manifest, tensors)


def load_model(path) -> ClassifierModel:
    manifest, raw = load_named_tensors(path)
    fmt = manifest.get("format")
    if fmt != "classifier-model":
        raise ArchiveError(f"{path}: container holds {fmt!r}, not a classifier model")
    tensors = {
        name: tensor.astype(np.int32) if name in _INT_TENSORS else tensor
        for name, tensor in raw.items()
    }
    try:
        return ClassifierModel(
            kind=manifest["kind"],
            class_count=int(manifest["class_count"]),
            feature_arity=int(manifest["feature_arity"]),
            training_time_s=float(manifest["training_time_s"]),
            tensors=tensors,
            settings=dict(manifest.get("settings", {})),
        )
    except KeyError as e:
        raise ArchiveError(f"{path}: manifest missing {e.args[0]!r}") from e
