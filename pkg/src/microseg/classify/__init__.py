"""Per-pixel classifiers: boosted trees, random forest, logistic, linear."""

from .models import (
    KINDS,
    RESERVED_KINDS,
    ClassifierModel,
    LabeledSamples,
    TrainConfig,
    feature_importances,
    fit,
    load_model,
    predict,
    save_model,
)

__all__ = [
    "KINDS",
    "RESERVED_KINDS",
    "ClassifierModel",
    "LabeledSamples",
    "TrainConfig",
    "feature_importances",
    "fit",
    "load_model",
    "predict",
    "save_model",
]
