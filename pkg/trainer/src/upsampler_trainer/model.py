"""Torch implementation of the guided feature upsampler.

The forward pass mirrors the workbench's inference layer for layer so an
exported archive reproduces training-side outputs: a small conv stack
turns the image into a guidance pyramid (ceil-halving dims per stage),
the patch-feature grid is aligned to the coarsest level, then walked back
up with the matching guidance concatenated before each block, ending in a
1x1 head. Bilinear resizes use half-pixel source centers clipped to the
edge, the same arithmetic the workbench applies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .formats import read_tensors, write_tensors

NORM_EPS = 1e-5  # fixed normalization epsilon, part of the archive semantics

ACTIVATIONS = ("relu", "none")
NORMALIZATIONS = ("per_channel", "none")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Channel widths and stage count of the guided upsampler."""

    d_in: int
    d_out: int
    d_hidden: int
    d_down: int
    kernel_size: int = 3
    num_stages: int = 4

    def __post_init__(self):
        for name in ("d_in", "d_out", "d_hidden", "d_down"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.num_stages < 1:
            raise ValueError("num_stages must be >= 1")

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_out": self.d_out,
            "d_hidden": self.d_hidden,
            "d_down": self.d_down,
            "kernel_size": self.kernel_size,
            "num_stages": self.num_stages,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**{k: int(d[k]) for k in (
            "d_in", "d_out", "d_hidden", "d_down", "kernel_size", "num_stages")})


def halved_dims(h: int, w: int, num_stages: int) -> list[tuple[int, int]]:
    """Pyramid dims from full resolution down; each level ceil-halves the last."""
    dims = [(h, w)]
    for _ in range(num_stages):
        h, w = -(-h // 2), -(-w // 2)
        dims.append((h, w))
    return dims


def _axis_weights(n_in: int, n_out: int):
    """Half-pixel-center source coordinates for align_corners=False sampling."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(np.float32)
    return i0, i1, frac


def resize_bilinear(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling of (B,C,H,W) tensors, differentiable in x."""
    if x.ndim != 4:
        raise ValueError(f"expected (B,C,H,W), got {tuple(x.shape)}")
    y0, y1, fy = _axis_weights(x.shape[2], out_h)
    x0, x1, fx = _axis_weights(x.shape[3], out_w)
    fy_t = torch.from_numpy(fy).to(x.dtype).view(1, 1, out_h, 1)
    fx_t = torch.from_numpy(fx).to(x.dtype).view(1, 1, 1, out_w)
    rows = x[:, :, y0] * (1.0 - fy_t) + x[:, :, y1] * fy_t
    return rows[:, :, :, x0] * (1.0 - fx_t) + rows[:, :, :, x1] * fx_t


def l1_normalize(grid: torch.Tensor) -> torch.Tensor:
    """Scale each feature vector (channel dim 1) to unit L1 norm."""
    norms = grid.abs().sum(dim=1, keepdim=True)
    return grid / norms.clamp(min=1e-12)


class _ConvBlock(nn.Module):
    """conv -> [per-channel norm] -> [relu], repeated convs_per_block times."""

    def __init__(self, cin: int, cout: int, kernel_size: int,
                 convs_per_block: int, normalization: str, activation: str):
        super().__init__()
        self.activation = activation
        pad = kernel_size // 2
        self.convs = nn.ModuleList(
            nn.Conv2d(cin if j == 0 else cout, cout, kernel_size, padding=pad)
            for j in range(convs_per_block))
        if normalization == "per_channel":
            self.norms = nn.ModuleList(
                nn.InstanceNorm2d(cout, eps=NORM_EPS, affine=True)
                for _ in range(convs_per_block))
        else:
            self.norms = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for j, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms is not None:
                x = self.norms[j](x)
            if self.activation == "relu":
                x = torch.relu(x)
        return x


class GuidedUpsampler(nn.Module):
    """Joint downsampler/upsampler producing (B, d_out, H, W) feature maps."""

    def __init__(self, spec: ArchitectureSpec, image_channels: int = 3,
                 convs_per_block: int = 2, normalization: str = "per_channel",
                 activation: str = "relu", lr_l1_normalize: bool = True,
                 features_pca_ordered: bool = True):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        if convs_per_block not in (1, 2):
            raise ValueError(f"convs_per_block must be 1 or 2, got {convs_per_block}")
        if image_channels < 1:
            raise ValueError("image_channels must be >= 1")
        self.spec = spec
        self.image_channels = image_channels
        self.convs_per_block = convs_per_block
        self.normalization = normalization
        self.activation = activation
        self.lr_l1_normalize = lr_l1_normalize
        self.features_pca_ordered = features_pca_ordered

        def block(cin, cout):
            return _ConvBlock(cin, cout, spec.kernel_size, convs_per_block,
                              normalization, activation)

        s = spec.num_stages
        self.down = nn.ModuleList(
            [block(image_channels, spec.d_down)]
            + [block(spec.d_down, spec.d_down) for _ in range(s)])
        # the first up block fuses the lr features, the carried coarsest
        # guidance, and the guidance of the level it lands on
        self.up = nn.ModuleList(
            [block(spec.d_in + 2 * spec.d_down, spec.d_hidden)]
            + [block(spec.d_hidden + spec.d_down, spec.d_hidden)
               for _ in range(s - 1)])
        self.head = nn.Conv2d(spec.d_hidden, spec.d_out, 1)

    def forward(self, image: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != self.image_channels:
            raise ValueError(
                f"image must be (B,{self.image_channels},H,W), got {tuple(image.shape)}")
        if lr.ndim != 4 or lr.shape[1] != self.spec.d_in:
            raise ValueError(
                f"features must be (B,{self.spec.d_in},Hp,Wp), got {tuple(lr.shape)}")
        s = self.spec.num_stages
        dims = halved_dims(image.shape[2], image.shape[3], s)

        guidance = []
        x = image
        for i, block in enumerate(self.down):
            if i > 0:
                x = resize_bilinear(guidance[i - 1], *dims[i])
            guidance.append(block(x))

        grid = l1_normalize(lr) if self.lr_l1_normalize else lr
        x = torch.cat([resize_bilinear(grid, *dims[s]), guidance[s]], dim=1)
        for i, block in enumerate(self.up):
            lvl = s - 1 - i
            x = block(torch.cat([resize_bilinear(x, *dims[lvl]), guidance[lvl]],
                                dim=1))
        return self.head(x)

    # -- archive interchange ------------------------------------------------

    def _blocks(self):
        for i, block in enumerate(self.down):
            yield f"down.{i}", block
        for i, block in enumerate(self.up):
            yield f"up.{i}", block

    def layer_tensors(self) -> dict[str, np.ndarray]:
        """All weights in the archive layout: conv kernels as (k,k,cin,cout)."""
        out: dict[str, np.ndarray] = {}

        def kernel(conv):
            return conv.weight.detach().cpu().numpy().transpose(2, 3, 1, 0).copy()

        for prefix, block in self._blocks():
            for j, conv in enumerate(block.convs):
                out[f"{prefix}.conv{j}.weight"] = kernel(conv)
                out[f"{prefix}.conv{j}.bias"] = conv.bias.detach().cpu().numpy().copy()
                if block.norms is not None:
                    norm = block.norms[j]
                    out[f"{prefix}.norm{j}.weight"] = norm.weight.detach().cpu().numpy().copy()
                    out[f"{prefix}.norm{j}.bias"] = norm.bias.detach().cpu().numpy().copy()
        out["head.weight"] = kernel(self.head)
        out["head.bias"] = self.head.bias.detach().cpu().numpy().copy()
        return out

    def load_layer_tensors(self, tensors: dict[str, np.ndarray]):
        """Inverse of layer_tensors; unknown or missing names raise KeyError."""
        consumed = set()

        def take(name):
            consumed.add(name)
            return torch.from_numpy(np.ascontiguousarray(tensors[name], np.float32))

        with torch.no_grad():
            for prefix, block in self._blocks():
                for j, conv in enumerate(block.convs):
                    conv.weight.copy_(take(f"{prefix}.conv{j}.weight").permute(3, 2, 0, 1))
                    conv.bias.copy_(take(f"{prefix}.conv{j}.bias"))
                    if block.norms is not None:
                        block.norms[j].weight.copy_(take(f"{prefix}.norm{j}.weight"))
                        block.norms[j].bias.copy_(take(f"{prefix}.norm{j}.bias"))
            self.head.weight.copy_(take("head.weight").permute(3, 2, 0, 1))
            self.head.bias.copy_(take("head.bias"))
        unknown = set(tensors) - consumed
        if unknown:
            raise KeyError(f"archive carries unexpected tensors: {sorted(unknown)}")

    def manifest(self, extra: dict | None = None) -> dict:
        m = {
            "format": "upsampler-weights",
            "format_version": 1,
            "spec": self.spec.to_dict(),
            "activation": self.activation,
            "normalization": self.normalization,
            "convs_per_block": self.convs_per_block,
            "lr_l1_normalize": self.lr_l1_normalize,
            "image_channels": self.image_channels,
            "features_pca_ordered": self.features_pca_ordered,
            "norm_eps": NORM_EPS,
            "layers": list(self.layer_tensors().keys()),
        }
        m.update(extra or {})
        return m


def save_archive(path, model: GuidedUpsampler, extra: dict | None = None):
    write_tensors(path, model.manifest(extra), model.layer_tensors())


def load_archive(path) -> tuple[GuidedUpsampler, dict]:
    """Rebuild a model from an archive; returns (model, manifest)."""
    manifest, tensors = read_tensors(path)
    fmt = manifest.get("format", "upsampler-weights")
    if fmt != "upsampler-weights":
        raise ValueError(f"{path}: container holds {fmt!r}, not upsampler weights")
    model = GuidedUpsampler(
        ArchitectureSpec.from_dict(manifest["spec"]),
        image_channels=int(manifest.get("image_channels", 3)),
        convs_per_block=int(manifest.get("convs_per_block", 2)),
        normalization=manifest.get("normalization", "per_channel"),
        activation=manifest.get("activation", "relu"),
        lr_l1_normalize=bool(manifest.get("lr_l1_normalize", True)),
        features_pca_ordered=bool(manifest.get("features_pca_ordered", True)),
    )
    model.load_layer_tensors(tensors)
    return model, manifest
