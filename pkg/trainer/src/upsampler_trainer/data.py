"""Training-pair datasets: image files plus aligned low-res/high-res features.

A pair set is a directory with a `pairs.json` manifest naming, for each
pair, the image, the low-resolution feature file, and the high-resolution
target file. Targets come from outside this tool (they are expensive to
produce); the fixture generator writes synthetic ones in the same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import FeatureGrid, FormatError, read_features

PAIRS_FORMAT = "upsampler-pairs"
PAIRS_VERSION = 1

LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


def load_image(path) -> np.ndarray:
    """Image file -> float32 (H,W) or (H,W,C); integer samples scaled to [0,1]."""
    data = np.asarray(Image.open(path))
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float32) / np.iinfo(data.dtype).max
    return data.astype(np.float32)


def to_plane(image: np.ndarray) -> np.ndarray:
    """Collapse to a single luminance plane for backbones that want grayscale."""
    if image.ndim == 2:
        return np.ascontiguousarray(image, np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        return np.ascontiguousarray(image[:, :, 0], np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return (r * image[:, :, 0] + g * image[:, :, 1]
                + b * image[:, :, 2]).astype(np.float32)
    raise ValueError(f"expected (H,W[,C]) image, got shape {image.shape}")


def prepare_image(image: np.ndarray, want_channels: int,
                  mean=None, std=None) -> np.ndarray:
    """Match the channel count and scaling the inference side applies."""
    img = np.asarray(image, np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected (H,W[,C]) image, got shape {image.shape}")
    have = img.shape[2]
    if have != want_channels:
        if have == 1:
            img = np.repeat(img, want_channels, axis=2)
        elif have == 3 and want_channels == 1:
            img = to_plane(img)[:, :, None]
        else:
            raise ValueError(
                f"model expects {want_channels}-channel images, got {have}")
    if mean is not None:
        img = img - np.asarray(mean, np.float32)
    if std is not None:
        img = img / np.asarray(std, np.float32)
    return np.ascontiguousarray(img, np.float32)


@dataclass(frozen=True)
class TrainingPair:
    """One image with its low-res features and high-res feature target."""

    image_path: Path
    lr: FeatureGrid
    hr: FeatureGrid

    def __post_init__(self):
        if self.lr.n_channels != self.hr.n_channels:
            raise ValueError(
                f"lr has {self.lr.n_channels} channels, hr has "
                f"{self.hr.n_channels}; they must share k")
        if self.hr.patch_size != 1:
            raise ValueError("hr targets must be per-pixel (patch size 1)")
        if self.hr.grid.shape[:2] != tuple(self.hr.source_image_dims):
            raise ValueError("hr grid dims must match its image dims")

    @property
    def k(self) -> int:
        return self.lr.n_channels

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.hr.grid.shape[:2]


def write_pair_set(root, entries: list[dict], k: int, patch_size: int,
                   extra: dict | None = None):
    """Write pairs.json for files already placed under root.

    Each entry holds relative paths: {"image": ..., "lr": ..., "hr": ...}.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": PAIRS_FORMAT,
        "format_version": PAIRS_VERSION,
        "k": int(k),
        "patch_size": int(patch_size),
        "pairs": entries,
    }
    manifest.update(extra or {})
    with open(root / "pairs.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_pair_set(root) -> tuple[dict, list[TrainingPair]]:
    """Load a pair-set directory; all feature payloads are read eagerly."""
    root = Path(root)
    manifest_path = root / "pairs.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no pairs.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != PAIRS_FORMAT:
        raise FormatError(f"{manifest_path}: not a pair-set manifest")
    pairs = []
    for entry in manifest["pairs"]:
        lr = read_features(root / entry["lr"])
        hr = read_features(root / entry["hr"])
        pairs.append(TrainingPair(root / entry["image"], lr, hr))
        if pairs[-1].k != manifest["k"]:
            raise FormatError(
                f"{entry['lr']}: has {pairs[-1].k} channels, manifest says "
                f"k={manifest['k']}")
    return manifest, pairs
