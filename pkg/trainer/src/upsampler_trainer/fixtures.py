"""Synthetic pair sets for offline testing and desk-scale runs.

Real high-resolution targets are produced by an expensive external
optimization, so tests need a cheap stand-in. Each fixture target is a
smooth random field per channel: a shared per-channel offset (one draw per
set, so a trained model can generalize to held-out pairs) plus a faint
pair-specific low-frequency component. The low-res half is exact patch-mean
pooling of the target, and the image is the normalized channel mean, which
keeps image, lr, and hr mutually consistent.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import write_pair_set
from .formats import FeatureGrid, write_features
from .model import resize_bilinear

OFFSET_AMPLITUDE = 0.02
FIELD_AMPLITUDE = 0.005
COARSE_GRID = 4


def _smooth_fields(rng: np.random.Generator, size: int, k: int) -> np.ndarray:
    coarse = rng.standard_normal((1, k, COARSE_GRID, COARSE_GRID))
    coarse = torch.from_numpy(coarse.astype(np.float32)) * FIELD_AMPLITUDE
    full = resize_bilinear(coarse, size, size)
    return full[0].permute(1, 2, 0).numpy()


def make_fixture_set(out_dir, n_pairs: int = 8, k: int = 8, size: int = 56,
                     patch_size: int = 14, seed: int = 0) -> Path:
    """Write a complete pair-set directory of synthetic fixtures."""
    if size % patch_size:
        raise ValueError(f"size {size} must be a multiple of patch size {patch_size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    offsets = np.random.default_rng([seed]).uniform(
        -OFFSET_AMPLITUDE, OFFSET_AMPLITUDE, size=k).astype(np.float32)

    entries = []
    hp = size // patch_size
    for index in range(n_pairs):
        rng = np.random.default_rng([seed, index])
        hr = offsets + _smooth_fields(rng, size, k)
        lr = (hr.reshape(hp, patch_size, hp, patch_size, k)
              .mean(axis=(1, 3)).astype(np.float32))

        plane = hr.mean(axis=2)
        span = plane.max() - plane.min()
        if span > 0:
            plane = (plane - plane.min()) / span
        else:
            plane = np.zeros_like(plane)
        image = np.round(plane * 255).astype(np.uint8)

        stem = f"pair{index:03d}"
        Image.fromarray(image, mode="L").save(out / f"{stem}.png")
        write_features(out / f"{stem}.lr.fts",
                       FeatureGrid(lr, patch_size, (size, size)))
        write_features(out / f"{stem}.hr.fts",
                       FeatureGrid(np.ascontiguousarray(hr, np.float32), 1,
                                   (size, size)))
        entries.append({"image": f"{stem}.png", "lr": f"{stem}.lr.fts",
                        "hr": f"{stem}.hr.fts"})

    write_pair_set(out, entries, k, patch_size, extra={"fixture_seed": seed})
    return out
