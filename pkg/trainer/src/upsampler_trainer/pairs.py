"""Offline preprocessing: turn images plus supplied hr targets into pairs.

For each image the backbone runs on the identity view and on randomly
sampled flip/rotation views; the pooled patch vectors fit one PCA per
image, and the identity view projected onto the top k components becomes
the stored low-resolution half of the pair. High-resolution targets are
consumed as given, never produced here.
"""

from __future__ import annotations

import logging
import shutil
from pathlib import Path

import numpy as np
from sklearn.decomposition import PCA

from .backbones import load_backbone
from .data import load_image, to_plane, write_pair_set
from .formats import FeatureGrid, read_features, write_features

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def _dihedral(plane: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(plane, rot)
    if flip:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def list_images(images_dir) -> list[Path]:
    root = Path(images_dir)
    return sorted(p for p in root.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def project_image(backbone, plane: np.ndarray, n_t: int, k: int,
                  rng: np.random.Generator) -> np.ndarray:
    """PCA-compress one image's patch features using n_t pooled views.

    The identity view is always among the n_t views, so n_t=1 reduces to a
    plain per-image PCA of the untransformed features.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    identity = backbone(plane)
    views = [identity.reshape(-1, identity.shape[2])]
    for _ in range(n_t - 1):
        rot = int(rng.integers(0, 4))
        flip = bool(rng.integers(0, 2))
        grid = backbone(_dihedral(plane, rot, flip))
        views.append(grid.reshape(-1, grid.shape[2]))
    pooled = np.concatenate(views, axis=0).astype(np.float64)
    if k > min(pooled.shape):
        raise ValueError(
            f"k={k} exceeds what {pooled.shape[0]} patch vectors of dim "
            f"{pooled.shape[1]} can support")
    pca = PCA(n_components=k, svd_solver="full")
    pca.fit(pooled)
    flat = pca.transform(identity.reshape(-1, identity.shape[2]).astype(np.float64))
    return flat.reshape(identity.shape[0], identity.shape[1], k).astype(np.float32)


def build_pairs(images_dir, hr_dir, out_dir, k: int, n_t: int = 50,
                backbone_id: str = "toy", seed: int = 0) -> tuple[list[dict], list[str]]:
    """Build a pair-set directory; returns (written entries, skipped stems)."""
    backbone = load_backbone(backbone_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hr_root = Path(hr_dir)

    entries: list[dict] = []
    skipped: list[str] = []
    for index, image_path in enumerate(list_images(images_dir)):
        stem = image_path.stem
        hr_path = hr_root / f"{stem}.fts"
        if not hr_path.exists():
            log.warning("no hr target for %s (expected %s); skipping",
                        image_path.name, hr_path)
            skipped.append(stem)
            continue
        hr = read_features(hr_path)
        if hr.n_channels != k:
            raise ValueError(
                f"{hr_path}: target has {hr.n_channels} channels, need k={k}")

        plane = to_plane(load_image(image_path))
        if plane.shape != tuple(hr.source_image_dims):
            raise ValueError(
                f"{hr_path}: target is for a {hr.source_image_dims} image, "
                f"{image_path.name} is {plane.shape}")
        rng = np.random.default_rng([seed, index])
        lr = project_image(backbone, plane, n_t, k, rng)

        image_name = image_path.name
        lr_name = f"{stem}.lr.fts"
        hr_name = f"{stem}.hr.fts"
        shutil.copyfile(image_path, out / image_name)
        shutil.copyfile(hr_path, out / hr_name)
        write_features(out / lr_name,
                       FeatureGrid(lr, backbone.patch_size, plane.shape))
        entries.append({"image": image_name, "lr": lr_name, "hr": hr_name})

    write_pair_set(out, entries, k, backbone.patch_size,
                   extra={"backbone": backbone_id, "n_t": n_t, "seed": seed})
    return entries, skipped
