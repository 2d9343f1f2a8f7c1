"""Classical per-pixel feature stack: multi-scale blurs, edges and textures.

The default configuration produces 63 channels for a grayscale image:
6 Gaussian blurs, 6 Sobel magnitudes, 30 Hessian statistics, 15 differences
of Gaussians and 6 membrane-projection aggregates. Channel order and names
are stable so trained classifiers stay valid across runs.

Feature planes are written one at a time into a preallocated (H,W,N)
buffer, keeping transient memory to a handful of single-channel planes
even on multi-megapixel micrographs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensors import as_f32

ALL_FILTERS = ("gaussian", "sobel", "hessian", "dog", "membrane")
DEFAULT_SIGMAS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_MEMBRANE_ANGLES = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
MEMBRANE_STATS = ("sum", "mean", "std", "median", "max", "min")
HESSIAN_TAGS = ("eig1", "eig2", "mod", "trace", "det")

# classic 3x3 Sobel halved, so a unit-slope ramp reads 4.0
_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0], np.float32)
_SOBEL_DERIV = np.array([-0.5, 0.0, 0.5], np.float32)
_D1 = np.array([-0.5, 0.0, 0.5], np.float32)  # central first difference
_D2 = np.array([1.0, -2.0, 1.0], np.float32)  # central second difference

LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


@dataclass(frozen=True)
class FeatureSetConfig:
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    membrane_kernel_size: int = 19
    membrane_angles_deg: tuple[float, ...] = DEFAULT_MEMBRANE_ANGLES
    enabled_filters: tuple[str, ...] = ALL_FILTERS

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "enabled_filters", tuple(self.enabled_filters))
        object.__setattr__(
            self, "membrane_angles_deg", tuple(float(a) for a in self.membrane_angles_deg)
        )
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be non-negative")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigmas must be strictly ascending")
        if self.membrane_kernel_size % 2 == 0 or self.membrane_kernel_size < 3:
            raise ValueError("membrane_kernel_size must be an odd int >= 3")
        if any(not 0 <= a < 180 for a in self.membrane_angles_deg):
            raise ValueError("membrane angles must lie in [0, 180)")
        unknown = set(self.enabled_filters) - set(ALL_FILTERS)
        if unknown:
            raise ValueError(f"unknown filters: {sorted(unknown)}")
        if not self.enabled_filters:
            raise ValueError("at least one filter must be enabled")

    def channel_count(self) -> int:
        n_sig = len(self.sigmas)
        counts = {
            "gaussian": n_sig,
            "sobel": n_sig,
            "hessian": 5 * n_sig,
            "dog": n_sig * (n_sig - 1) // 2,
            "membrane": len(MEMBRANE_STATS),
        }
        return sum(counts[f] for f in ALL_FILTERS if f in self.enabled_filters)

    def to_dict(self) -> dict:
        return {
            "sigmas": list(self.sigmas),
            "membrane_kernel_size": self.membrane_kernel_size,
            "membrane_angles_deg": list(self.membrane_angles_deg),
            "enabled_filters": list(self.enabled_filters),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSetConfig":
        return cls(
            sigmas=tuple(d.get("sigmas", DEFAULT_SIGMAS)),
            membrane_kernel_size=int(d.get("membrane_kernel_size", 19)),
            membrane_angles_deg=tuple(d.get("membrane_angles_deg", DEFAULT_MEMBRANE_ANGLES)),
            enabled_filters=tuple(d.get("enabled_filters", ALL_FILTERS)),
        )


class FeatureStack:
    """(H,W,F) float32 raster with one name per channel."""

    def __init__(self, data: np.ndarray, channel_names: Sequence[str], pca_ordered: bool = False):
        data = as_f32(data)
        if data.ndim != 3:
            raise ShapeError(f"feature stack must be (H,W,F), got {data.shape}")
        names = tuple(channel_names)
        if len(names) != data.shape[2]:
            raise ShapeError(f"{len(names)} names for {data.shape[2]} channels")
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        # validate per channel to keep the transient bool mask small
        for c in range(data.shape[2]):
            if not np.isfinite(data[:, :, c]).all():
                raise ValueError(f"non-finite values in channel {names[c]!r}")
        self.data = data
        self.channel_names = names
        self.pca_ordered = pca_ordered

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


def _sigma_label(sigma: float) -> str:
    return f"s{sigma:g}"


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse an (H,W[,C]) image to a single luminance plane."""
    image = as_f32(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 1:
        return image[:, :, 0]
    if image.ndim == 3 and image.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return (image[:, :, 0] * r + image[:, :, 1] * g + image[:, :, 2] * b).astype(np.float32)
    raise ShapeError(f"expected (H,W), (H,W,1) or (H,W,3) image, got {image.shape}")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian taps with radius ceil(3*sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1, np.float32)
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return (taps / taps.sum()).astype(np.float32)


def gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with mirrored borders."""
    plane = as_f32(plane)
    if sigma == 0:
        return plane.copy()
    taps = gaussian_kernel_1d(sigma)
    tmp = ndimage.correlate1d(plane, taps, axis=0, mode="mirror")
    return ndimage.correlate1d(tmp, taps, axis=1, mode="mirror")


def _sep2d(plane, row_taps, col_taps):
    tmp = ndimage.correlate1d(plane, col_taps, axis=0, mode="mirror")
    return ndimage.correlate1d(tmp, row_taps, axis=1, mode="mirror")


def sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    gx = _sep2d(plane, _SOBEL_DERIV, _SOBEL_SMOOTH)
    gy = _sep2d(plane, _SOBEL_SMOOTH, _SOBEL_DERIV)
    return np.sqrt(gx * gx + gy * gy)


def hessian_planes(plane: np.ndarray) -> list[np.ndarray]:
    """[eig1, eig2, module, trace, det] of the central-difference Hessian."""
    ixx = ndimage.correlate1d(plane, _D2, axis=1, mode="mirror")
    iyy = ndimage.correlate1d(plane, _D2, axis=0, mode="mirror")
    ixy = _sep2d(plane, _D1, _D1)
    trace = ixx + iyy
    half_gap = np.sqrt(np.square((ixx - iyy) * 0.5) + np.square(ixy))
    return [
        trace * 0.5 + half_gap,
        trace * 0.5 - half_gap,
        np.sqrt(ixx * ixx + 2.0 * ixy * ixy + iyy * iyy),
        trace,
        ixx * iyy - ixy * ixy,
    ]


def membrane_line_offsets(angle_deg: float, kernel_size: int) -> list[tuple[int, int]]:
    """(dy, dx) taps of a single-pixel-wide line through the kernel center."""
    r = kernel_size // 2
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    offsets = []
    if abs(c) >= abs(s):  # x-major line
        for dx in range(-r, r + 1):
            offsets.append((int(np.rint(dx * s / c)), dx))
    else:  # y-major line
        for dy in range(-r, r + 1):
            offsets.append((dy, int(np.rint(dy * c / s)) if s != 0 else 0))
    return offsets


def membrane_kernel(angle_deg: float, kernel_size: int) -> np.ndarray:
    """Dense line kernel, normalized by the number of line pixels."""
    k = np.zeros((kernel_size, kernel_size), np.float32)
    r = kernel_size // 2
    offsets = membrane_line_offsets(angle_deg, kernel_size)
    for dy, dx in offsets:
        k[r + dy, r + dx] = 1.0
    return k / len(offsets)


def _line_convolve(plane: np.ndarray, angle_deg: float, kernel_size: int) -> np.ndarray:
    """Sparse-tap evaluation of the line kernel (only ks taps are nonzero)."""
    r = kernel_size // 2
    padded = np.pad(plane, r, mode="reflect")
    h, w = plane.shape
    acc = np.zeros((h, w), np.float32)
    offsets = membrane_line_offsets(angle_deg, kernel_size)
    for dy, dx in offsets:
        acc += padded[r + dy : r + dy + h, r + dx : r + dx + w]
    acc /= len(offsets)
    return acc


def membrane_responses(plane: np.ndarray, config: FeatureSetConfig) -> np.ndarray:
    """(n_angles, H, W) line responses for the configured orientations."""
    ks = config.membrane_kernel_size
    if min(plane.shape) < ks:
        raise ValueError(f"image {plane.shape} smaller than membrane kernel {ks}x{ks}")
    angles = config.membrane_angles_deg
    responses = np.empty((len(angles),) + plane.shape, np.float32)
    for i, a in enumerate(angles):
        responses[i] = _line_convolve(plane, a, ks)
    return responses


def _write_membrane_stats(responses: np.ndarray, out: np.ndarray):
    """Aggregate angle responses into the stat channels; sorts `responses`
    in place for the median so no full-size temporary is allocated."""
    n = responses.shape[0]
    out[:, :, 0] = responses.sum(axis=0)
    mean = responses.mean(axis=0)
    out[:, :, 1] = mean
    acc = np.zeros_like(mean)
    for i in range(n):
        d = responses[i] - mean
        acc += d * d
    out[:, :, 2] = np.sqrt(acc / n, out=acc)
    out[:, :, 4] = responses.max(axis=0)
    out[:, :, 5] = responses.min(axis=0)
    responses.sort(axis=0)
    mid = n // 2
    if n % 2:
        out[:, :, 3] = responses[mid]
    else:
        out[:, :, 3] = (responses[mid - 1] + responses[mid]) * 0.5


def gaussian_stack(image: np.ndarray, sigmas: Sequence[float] = DEFAULT_SIGMAS) -> FeatureStack:
    """One smoothed plane per sigma; sigma 0 is the identity copy."""
    plane = to_grayscale(image)
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be non-negative")
    out = np.empty(plane.shape + (len(sigmas),), np.float32)
    for i, s in enumerate(sigmas):
        out[:, :, i] = gaussian_blur(plane, s)
    return FeatureStack(out, [f"gauss_{_sigma_label(s)}" for s in sigmas])


def _gauss_suffixes(gaussians: FeatureStack) -> list[str]:
    parts = [n.split("_", 1) for n in gaussians.channel_names]
    if any(len(p) != 2 or p[0] != "gauss" for p in parts):
        raise ValueError("input must be a gaussian_stack output")
    return [p[1] for p in parts]


def sobel_stack(gaussians: FeatureStack) -> FeatureStack:
    """Per-sigma Sobel gradient magnitude sqrt(Gx^2 + Gy^2)."""
    suffixes = _gauss_suffixes(gaussians)
    out = np.empty(gaussians.data.shape, np.float32)
    for i in range(gaussians.n_channels):
        out[:, :, i] = sobel_magnitude(gaussians.data[:, :, i])
    return FeatureStack(out, [f"sobel_{s}" for s in suffixes])


def hessian_stack(gaussians: FeatureStack) -> FeatureStack:
    """Per-sigma Hessian statistics; eigenvalues sorted descending."""
    suffixes = _gauss_suffixes(gaussians)
    h, w, n = gaussians.data.shape
    out = np.empty((h, w, 5 * n), np.float32)
    names = []
    for i, suf in enumerate(suffixes):
        for j, p in enumerate(hessian_planes(gaussians.data[:, :, i])):
            out[:, :, 5 * i + j] = p
        names += [f"hessian_{tag}_{suf}" for tag in HESSIAN_TAGS]
    return FeatureStack(out, names)


def dog_stack(gaussians: FeatureStack) -> FeatureStack:
    """G(sigma_i) - G(sigma_j) for every ordered pair sigma_i < sigma_j."""
    suffixes = _gauss_suffixes(gaussians)
    n = gaussians.n_channels
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    h, w, _ = gaussians.data.shape
    out = np.empty((h, w, len(pairs)), np.float32)
    names = []
    for c, (i, j) in enumerate(pairs):
        np.subtract(gaussians.data[:, :, i], gaussians.data[:, :, j], out=out[:, :, c])
        names.append(f"dog_{suffixes[i]}_{suffixes[j]}")
    return FeatureStack(out, names)


def membrane_projections(image: np.ndarray, config: Optional[FeatureSetConfig] = None) -> FeatureStack:
    """Aggregate statistics of oriented line-kernel responses.

    Each angle's response is the mean intensity along a single-pixel-wide
    line through the pixel; the channel set is {sum, mean, std, median,
    max, min} over the configured angles.
    """
    config = config or FeatureSetConfig()
    plane = to_grayscale(image)
    responses = membrane_responses(plane, config)
    h, w = plane.shape
    out = np.empty((h, w, len(MEMBRANE_STATS)), np.float32)
    _write_membrane_stats(responses, out)
    return FeatureStack(out, [f"membrane_{s}" for s in MEMBRANE_STATS])


def featurize_classical(
    image: np.ndarray, config: Optional[FeatureSetConfig] = None
) -> FeatureStack:
    """Full classical feature stack: enabled sub-stacks concatenated in order.

    Channels are produced plane by plane straight into the output buffer;
    only the per-sigma Gaussian planes are kept alive across families.
    """
    config = config or FeatureSetConfig()
    plane = to_grayscale(image)
    if "membrane" in config.enabled_filters and min(plane.shape) < config.membrane_kernel_size:
        raise ValueError(
            f"image {plane.shape} is smaller than the "
            f"{config.membrane_kernel_size}px membrane kernel"
        )

    h, w = plane.shape
    out = np.empty((h, w, config.channel_count()), np.float32)
    names: list[str] = []
    cursor = 0

    def put(plane2d, name):
        nonlocal cursor
        out[:, :, cursor] = plane2d
        names.append(name)
        cursor += 1

    enabled = config.enabled_filters
    suffixes = [_sigma_label(s) for s in config.sigmas]
    need_gauss = set(enabled) & {"gaussian", "sobel", "hessian", "dog"}
    gauss_planes = [gaussian_blur(plane, s) for s in config.sigmas] if need_gauss else []

    if "gaussian" in enabled:
        for g, suf in zip(gauss_planes, suffixes):
            put(g, f"gauss_{suf}")
    if "sobel" in enabled:
        for g, suf in zip(gauss_planes, suffixes):
            put(sobel_magnitude(g), f"sobel_{suf}")
    if "hessian" in enabled:
        for g, suf in zip(gauss_planes, suffixes):
            for tag, p in zip(HESSIAN_TAGS, hessian_planes(g)):
                put(p, f"hessian_{tag}_{suf}")
    if "dog" in enabled:
        n = len(gauss_planes)
        for i in range(n):
            for j in range(i + 1, n):
                put(gauss_planes[i] - gauss_planes[j], f"dog_{suffixes[i]}_{suffixes[j]}")
    del gauss_planes
    if "membrane" in enabled:
        responses = membrane_responses(plane, config)
        _write_membrane_stats(responses, out[:, :, cursor : cursor + len(MEMBRANE_STATS)])
        names += [f"membrane_{s}" for s in MEMBRANE_STATS]
        cursor += len(MEMBRANE_STATS)

    assert cursor == out.shape[2]
    return FeatureStack(out, names)
