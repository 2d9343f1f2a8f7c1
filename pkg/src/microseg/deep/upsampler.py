"""Guided convolutional upsampling of patch features to pixel resolution.

The image is pushed through a learned downsampler that emits a guidance
pyramid (halving the resolution each stage, ceil dims); the patch-feature
grid is bilinearly aligned to the coarsest guidance level, then doubled
back up stage by stage, concatenating the matching guidance before each
conv block. The final 1x1 head emits exactly (H,W,d_out).

Convolutions over concatenated inputs are evaluated part by part via
conv2d's accumulator, so concatenations are never materialized; guidance
levels are dropped as soon as they are consumed. Peak transient memory
on a 2000x1000 image stays within a small multiple of the output stack.
"""

from __future__ import annotations

import numpy as np

from ..classical import FeatureStack, to_grayscale
from ..errors import ArchiveError, ShapeError
from ..tensors import _axis_weights, as_f32, conv2d, resize_bilinear
from .archive import NORM_EPS, LowResFeatures, WeightArchive

# resized inputs above this size are convolved in row bands instead of
# being materialized at full resolution next to their guidance plane
_BAND_BYTES = 96 << 20
_BAND_TARGET_BYTES = 32 << 20


def pyramid_dims(h: int, w: int, num_stages: int) -> list[tuple[int, int]]:
    """Level dims from full resolution down; each level ceil-halves the last."""
    dims = [(h, w)]
    for _ in range(num_stages):
        h, w = -(-h // 2), -(-w // 2)
        dims.append((h, w))
    return dims


def l1_normalize_grid(grid: np.ndarray) -> np.ndarray:
    """Scale each feature vector to unit L1 norm; zero vectors pass through."""
    norms = np.abs(grid).sum(axis=2, keepdims=True)
    return (grid / np.maximum(norms, 1e-12)).astype(np.float32)


def prepare_image(image: np.ndarray, archive: WeightArchive) -> np.ndarray:
    """Match the archive's expected channel count and value scaling."""
    raw = np.asarray(image)
    if np.issubdtype(raw.dtype, np.integer):
        img = raw.astype(np.float32) / float(np.iinfo(raw.dtype).max)
    else:
        img = as_f32(raw)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected (H,W[,C]) image, got {raw.shape}")

    want = archive.image_channels
    have = img.shape[2]
    if have != want:
        if have == 1:
            img = np.repeat(img, want, axis=2)
        elif have == 3 and want == 1:
            img = to_grayscale(img)[:, :, None]
        else:
            raise ShapeError(f"archive expects {want}-channel images, got {have}")
    if archive.image_mean is not None:
        img = img - np.asarray(archive.image_mean, np.float32)
    if archive.image_std is not None:
        img = img / np.asarray(archive.image_std, np.float32)
    return img


def _normalize_inplace(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Per-channel affine normalization over the spatial extent."""
    for c in range(x.shape[2]):
        plane = x[:, :, c]
        mu = plane.mean(dtype=np.float64)
        var = plane.var(dtype=np.float64)
        scale = np.float32(weight[c] / np.sqrt(var + NORM_EPS))
        shift = np.float32(bias[c] - mu * weight[c] / np.sqrt(var + NORM_EPS))
        np.multiply(plane, scale, out=plane)
        np.add(plane, shift, out=plane)


def _resize_rows(src: np.ndarray, out_h: int, out_w: int, r0: int, r1: int) -> np.ndarray:
    """Rows [r0,r1) of resize_bilinear(src, out_h, out_w), bit-compatible."""
    y0, y1, fy = _axis_weights(src.shape[0], out_h)
    x0, x1, fx = _axis_weights(src.shape[1], out_w)
    f = fy[r0:r1, None, None]
    rows = src[y0[r0:r1]] * (1.0 - f) + src[y1[r0:r1]] * f
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return out.astype(np.float32, copy=False)


def _accumulate_resized_conv(
    src: np.ndarray, out_hw: tuple[int, int], weight: np.ndarray, out: np.ndarray
):
    """out += conv(resize(src, out_hw), weight) without holding the resize.

    Output rows are produced in bands; each band resamples just the source
    rows it needs plus the one-row halo of the (zero-padded) convolution.
    """
    h, w = out_hw
    c = src.shape[2]
    pad = weight.shape[0] // 2
    band = max(1, _BAND_TARGET_BYTES // max(w * c * 4, 1))
    for y0 in range(0, h, band):
        y1 = min(y0 + band, h)
        lo, hi = y0 - pad, y1 + pad
        rlo, rhi = max(lo, 0), min(hi, h)
        band_in = np.zeros((hi - lo, w + 2 * pad, c), np.float32)
        band_in[rlo - lo : rhi - lo, pad : pad + w] = _resize_rows(src, h, w, rlo, rhi)
        conv2d(band_in, weight, padding="none", add_to=out[y0:y1])


def _conv_block(parts: list, prefix: str, archive: WeightArchive) -> np.ndarray:
    """conv -> [norm] -> [act], repeated convs_per_block times.

    The first conv runs split across `parts` (the conceptual concatenation
    of its inputs along channels). A part is either a ready (h,w,c) array
    or an (array, (h,w)) pair still awaiting bilinear resizing; parts are
    consumed and released one by one to cap peak memory.
    """
    t = archive.tensors
    x = None
    for j in range(archive.convs_per_block):
        weight = t[f"{prefix}.conv{j}.weight"]
        bias = t[f"{prefix}.conv{j}.bias"]
        if j == 0:
            h, w = parts[0][1] if isinstance(parts[0], tuple) else parts[0].shape[:2]
            total = sum((p[0] if isinstance(p, tuple) else p).shape[2] for p in parts)
            if total != weight.shape[2]:
                raise ArchiveError(
                    f"{prefix}.conv0 expects {weight.shape[2]} input channels, got {total}"
                )
            x = np.zeros((h, w, weight.shape[3]), np.float32)
            offset = 0
            while parts:
                p = parts.pop(0)
                if isinstance(p, tuple):
                    src, (th, tw) = p
                    c = src.shape[2]
                    wslice = weight[:, :, offset : offset + c]
                    if th * tw * c * 4 > _BAND_BYTES:
                        _accumulate_resized_conv(src, (th, tw), wslice, x)
                    else:
                        conv2d(resize_bilinear(src, th, tw), wslice, padding="zero", add_to=x)
                else:
                    c = p.shape[2]
                    conv2d(p, weight[:, :, offset : offset + c], padding="zero", add_to=x)
                offset += c
                del p
        else:
            x = conv2d(x, weight, padding="zero")
        x += bias
        if archive.normalization == "per_channel":
            _normalize_inplace(x, t[f"{prefix}.norm{j}.weight"], t[f"{prefix}.norm{j}.bias"])
        if archive.activation == "relu":
            np.maximum(x, 0.0, out=x)
    return x


def upsample(image: np.ndarray, lr: LowResFeatures, weights: WeightArchive) -> FeatureStack:
    """Run the full guided forward pass; output is exactly (H,W,d_out)."""
    weights.validate()
    spec = weights.spec
    if lr.n_channels != spec.d_in:
        raise ArchiveError(
            f"archive expects d_in={spec.d_in} feature channels, grid has {lr.n_channels}"
        )
    img = prepare_image(image, weights)
    h, w = img.shape[:2]
    if h < lr.patch_size or w < lr.patch_size:
        raise ValueError(
            f"image {h}x{w} is smaller than the patch size {lr.patch_size}"
        )

    s = spec.num_stages
    dims = pyramid_dims(h, w, s)

    guidance: list = []
    x = img
    for i in range(s + 1):
        if i > 0:
            x = resize_bilinear(guidance[i - 1], *dims[i])
        guidance.append(_conv_block([x], f"down.{i}", weights))
    del x, img

    grid = lr.grid
    if weights.lr_l1_normalize:
        grid = l1_normalize_grid(grid)
    parts: list = [resize_bilinear(grid, *dims[s]), guidance[s]]
    guidance[s] = None

    for i in range(s):
        lvl = s - i - 1
        parts = [(p, dims[lvl]) for p in parts]
        parts.append(guidance[lvl])
        guidance[lvl] = None
        parts = [_conv_block(parts, f"up.{i}", weights)]

    out = conv2d(parts[0], weights.tensors["head.weight"], padding="zero")
    out += weights.tensors["head.bias"]
    names = [f"deep_{i}" for i in range(spec.d_out)]
    return FeatureStack(out, names, pca_ordered=weights.features_pca_ordered)
