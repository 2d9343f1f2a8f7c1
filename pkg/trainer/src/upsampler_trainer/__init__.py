"""Training sidecar for the guided feature upsampler.

Produces patch-feature files (.fts) and weight archives (.war) that the
segmentation workbench consumes; the two tools share nothing but those
byte formats and the workbench command line.
"""

from .backbones import BackboneUnavailable, load_backbone
from .data import TrainingPair, read_pair_set, write_pair_set
from .fixtures import make_fixture_set
from .formats import (FeatureGrid, read_features, read_tensors,
                      write_features, write_tensors)
from .model import (ArchitectureSpec, GuidedUpsampler, load_archive,
                    save_archive)
from .pairs import build_pairs
from .train import (TrainRunConfig, slice_pairs, train_compressed,
                    train_upsampler)

__all__ = [
    "ArchitectureSpec",
    "BackboneUnavailable",
    "FeatureGrid",
    "GuidedUpsampler",
    "TrainRunConfig",
    "TrainingPair",
    "build_pairs",
    "load_archive",
    "load_backbone",
    "make_fixture_set",
    "read_features",
    "read_pair_set",
    "read_tensors",
    "save_archive",
    "slice_pairs",
    "train_compressed",
    "train_upsampler",
    "write_features",
    "write_pair_set",
    "write_tensors",
]
