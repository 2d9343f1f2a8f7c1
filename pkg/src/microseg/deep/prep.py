"""Feature preprocessing around the upsampler: shared PCA, flip averaging,
channel truncation and RGB visualization.

The shared PCA pools patch vectors from many transformed views of one
image, so the fitted basis is stable under the augmentations used during
upsampler training. Because components come out variance-ordered, taking
the first j channels is a valid compression and the first three channels
visualize directly as RGB.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..classical import FeatureStack
from ..errors import ShapeError
from ..tensors import PCAModel, as_f32, pca_fit, pca_project
from .archive import LowResFeatures


def _as_grid(view) -> np.ndarray:
    grid = view.grid if isinstance(view, LowResFeatures) else as_f32(view)
    if grid.ndim != 3:
        raise ShapeError(f"feature view must be (Hp,Wp,d), got {grid.shape}")
    return grid


def preprocess_shared_pca(
    feature_views: Sequence,
    k: int,
    patch_size: int | None = None,
    source_image_dims: tuple[int, int] | None = None,
) -> tuple[PCAModel, LowResFeatures]:
    """Fit one PCA over all views pooled, project the untransformed view.

    feature_views[0] must be the untransformed image's grid; remaining
    entries are grids of transformed views (any spatial dims, same channel
    count). Views may be raw arrays or LowResFeatures; metadata for the
    result is taken from the first view unless given explicitly.
    """
    if len(feature_views) == 0:
        raise ValueError("need at least one feature view")
    grids = [_as_grid(v) for v in feature_views]
    d = grids[0].shape[2]
    if any(g.shape[2] != d for g in grids):
        raise ShapeError("all views must share the channel count")
    if k < 1 or k > d:
        raise ValueError(f"k must be in [1, {d}], got {k}")

    pooled = np.concatenate([g.reshape(-1, d) for g in grids], axis=0)
    model = pca_fit(pooled, k)
    base = grids[0]
    projected = pca_project(model, base.reshape(-1, d)).reshape(base.shape[:2] + (k,))

    first = feature_views[0]
    if isinstance(first, LowResFeatures):
        patch_size = patch_size or first.patch_size
        source_image_dims = source_image_dims or first.source_image_dims
    return model, LowResFeatures(
        grid=projected,
        patch_size=patch_size or 1,
        source_image_dims=source_image_dims or base.shape[:2],
    )


_FLIPS = (
    (False, False),
    (False, True),
    (True, False),
    (True, True),
)


def _flip(arr: np.ndarray, flip_rows: bool, flip_cols: bool) -> np.ndarray:
    if flip_rows:
        arr = arr[::-1]
    if flip_cols:
        arr = arr[:, ::-1]
    return arr


def symmetrize_flips(extract: Callable, image: np.ndarray) -> LowResFeatures:
    """Average the provider's features over the flip group, un-flipped.

    Runs `extract` on the identity view and the three axis flips, flips
    each resulting grid back, and averages. Positional biases that are odd
    under either flip cancel exactly; provider errors propagate unchanged.
    """
    image = np.asarray(image)
    grids = []
    meta = None
    for flip_rows, flip_cols in _FLIPS:
        view = extract(np.ascontiguousarray(_flip(image, flip_rows, flip_cols)))
        if meta is None and isinstance(view, LowResFeatures):
            meta = view
        grid = _as_grid(view)
        grids.append(_flip(grid, flip_rows, flip_cols))
    if any(g.shape != grids[0].shape for g in grids):
        raise ShapeError("provider returned grids of differing shape across flips")

    mean = np.mean(np.stack(grids, axis=0), axis=0).astype(np.float32)
    if meta is not None:
        return LowResFeatures(mean, meta.patch_size, meta.source_image_dims)
    return LowResFeatures(mean, 1, image.shape[:2])


def truncate_compressed(features: FeatureStack, j: int) -> FeatureStack:
    """Keep the first j channels; valid because channels are variance-ordered."""
    if j < 1 or j > features.n_channels:
        raise ValueError(f"j must be in [1, {features.n_channels}], got {j}")
    return FeatureStack(
        features.data[:, :, :j].copy(),
        features.channel_names[:j],
        pca_ordered=features.pca_ordered,
    )


def visualize_pca_rgb(features: FeatureStack) -> np.ndarray:
    """(H,W,3) view of a feature stack, each channel min-max scaled to [0,1].

    Stacks marked pca_ordered use their first three channels directly;
    anything else gets a fresh 3-component pixelwise PCA. Channels without
    contrast render mid-gray.
    """
    if features.n_channels < 3:
        raise ShapeError(f"need at least 3 channels to visualize, got {features.n_channels}")
    h, w, f = features.shape
    if features.pca_ordered:
        rgb = features.data[:, :, :3].astype(np.float64)
    else:
        model = pca_fit(features.data.reshape(-1, f), 3)
        rgb = pca_project(model, features.data.reshape(-1, f)).reshape(h, w, 3)

    out = np.empty((h, w, 3), np.float32)
    for c in range(3):
        plane = rgb[:, :, c]
        lo, hi = plane.min(), plane.max()
        if hi - lo < 1e-12:
            out[:, :, c] = 0.5
        else:
            out[:, :, c] = (plane - lo) / (hi - lo)
    return out
