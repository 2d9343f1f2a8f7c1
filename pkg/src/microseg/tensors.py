"""Dense float32 tensor container and the numeric primitives built on it.

Everything downstream (featurization, the upsampler forward pass, PCA
preprocessing) is expressed in terms of conv2d, resize_bilinear and the
PCA helpers defined here. All operations are pure: inputs are never
mutated and outputs are freshly allocated float32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

MAX_RANK = 4


def as_f32(a) -> np.ndarray:
    """Return `a` as a C-contiguous float32 array (view if already one)."""
    return np.ascontiguousarray(a, dtype=np.float32)


@dataclass(frozen=True)
class Tensor:
    """Rank 1-4 float32 array with optional channel names on the last axis."""

    data: np.ndarray
    channel_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        data = as_f32(self.data)
        object.__setattr__(self, "data", data)
        if not 1 <= data.ndim <= MAX_RANK:
            raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {data.ndim}")
        if any(d < 1 for d in data.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {data.shape}")
        if self.channel_names is not None:
            names = tuple(self.channel_names)
            if len(names) != data.shape[-1]:
                raise ShapeError(
                    f"{len(names)} channel names for channel extent {data.shape[-1]}"
                )
            if len(set(names)) != len(names):
                raise ValueError("channel names must be unique")
            object.__setattr__(self, "channel_names", names)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class PCAModel:
    """Top-k principal directions of a sample set.

    `components` rows are orthonormal and ordered by descending explained
    variance; the largest-magnitude coefficient of each row is positive so
    models are reproducible across eigensolvers.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_features(self) -> int:
        return self.components.shape[1]


def _pad_image(image: np.ndarray, pad_h: int, pad_w: int, padding: str) -> np.ndarray:
    pad = ((pad_h, pad_h), (pad_w, pad_w), (0, 0))
    if padding == "zero":
        return np.pad(image, pad, mode="constant")
    if padding == "reflect":
        return np.pad(image, pad, mode="reflect")
    raise ValueError(f"unknown padding mode {padding!r}")


def conv2d(
    image: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: str = "reflect",
    add_to: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Direct 2-D cross-correlation of (H,W,Cin) with a (kh,kw,Cin,Cout) kernel.

    padding "reflect"/"zero" keep the spatial grid (output ceil(H/stride) x
    ceil(W/stride)); "none" is a valid convolution. Work is blocked over
    output rows so the im2col buffer stays bounded regardless of image size.
    `add_to` accumulates into an existing output array instead of allocating,
    which lets a convolution over concatenated inputs run part by part.
    """
    image = as_f32(image)
    kernel = as_f32(kernel)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects (H,W,Cin) and (kh,kw,Cin,Cout), got {image.shape} and {kernel.shape}"
        )
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    h, w, cin = image.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, image has {cin}")

    if padding == "none":
        if h < kh or w < kw:
            raise ShapeError(f"image {h}x{w} smaller than kernel {kh}x{kw}")
        padded = image
        out_h = (h - kh) // stride + 1
        out_w = (w - kw) // stride + 1
    else:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same-padding modes require odd kernel extents")
        padded = _pad_image(image, kh // 2, kw // 2, padding)
        out_h = -(-h // stride)
        out_w = -(-w // stride)

    # (y, x, c, dy, dx) windows; strided slicing selects the output grid.
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride][:out_h, :out_w]
    kmat = kernel.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)

    if add_to is None:
        out = np.empty((out_h, out_w, cout), dtype=np.float32)
    else:
        if add_to.shape != (out_h, out_w, cout) or add_to.dtype != np.float32:
            raise ShapeError(
                f"add_to must be float32 {(out_h, out_w, cout)}, got "
                f"{add_to.dtype} {add_to.shape}"
            )
        out = add_to
    patch_bytes = out_w * cin * kh * kw * 4
    block = max(1, (64 << 20) // max(patch_bytes, 1))
    for y0 in range(0, out_h, block):
        y1 = min(y0 + block, out_h)
        # reshape of the strided view materializes the im2col block
        patches = windows[y0:y1].transpose(0, 1, 2, 3, 4).reshape(-1, cin * kh * kw)
        result = (patches @ kmat).reshape(y1 - y0, out_w, cout)
        if add_to is None:
            out[y0:y1] = result
        else:
            out[y0:y1] += result
    return out


def _axis_weights(n_in: int, n_out: int):
    """Half-pixel-center source coordinates for align_corners=False sampling."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(np.float32)
    return i0, i1, frac


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling (align_corners=False) of (H,W) or (H,W,C) data."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got {out_h}x{out_w}")
    image = as_f32(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ShapeError(f"resize_bilinear expects (H,W[,C]), got {image.shape}")
    h, w, _ = image.shape

    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    rows = image[y0] * (1.0 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    out = out.astype(np.float32, copy=False)
    return out[:, :, 0] if squeeze else out


def pca_fit(samples: np.ndarray, k: int) -> PCAModel:
    """Fit a k-component PCA to an (M,F) sample matrix.

    Variances are eigenvalues of the sample covariance (ddof=1). Degenerate
    inputs (all samples identical) produce a valid model with zero variance.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be (M,F), got {samples.shape}")
    m, f = samples.shape
    if k < 1 or k > f:
        raise ValueError(f"k must be in [1, {f}], got {k}")
    if m < k:
        raise ValueError(f"need at least k={k} samples, got {m}")

    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / max(m - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    components = evecs[:, order].T
    variances = np.maximum(evals[order], 0.0)

    # sign convention: largest-|coefficient| entry of each component positive
    flip = components[np.arange(k), np.abs(components).argmax(axis=1)] < 0
    components[flip] *= -1.0

    return PCAModel(
        mean=mean.astype(np.float32),
        components=as_f32(components),
        explained_variance=variances.astype(np.float32),
    )


def pca_project(model: PCAModel, samples: np.ndarray) -> np.ndarray:
    """Project (M,F) samples onto the model's components: (x - mean) @ C.T."""
    samples = as_f32(samples)
    if samples.ndim != 2 or samples.shape[1] != model.n_features:
        raise ShapeError(
            f"samples must be (M,{model.n_features}), got {samples.shape}"
        )
    return (samples - model.mean) @ model.components.T
