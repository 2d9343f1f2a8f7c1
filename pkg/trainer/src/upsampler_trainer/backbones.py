"""Patch-feature backbones for the extraction step.

Two kinds are exposed through one interface. The "toy" backbone is a fixed
seeded projection of per-patch pixel statistics: free, deterministic, and
good enough to exercise every downstream stage offline. Real transformer
backbones are loaded from TorchScript exports dropped into a local cache
directory; this tool never downloads weights itself.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

TOY_PATCH_SIZE = 14
TOY_CHANNELS = 384
_TOY_SEED = 714

BACKBONE_DIR_ENV = "UPSAMPLER_BACKBONE_DIR"
DEFAULT_BACKBONE_DIR = Path.home() / ".cache" / "upsampler-trainer" / "backbones"


class BackboneUnavailable(RuntimeError):
    """A named backbone has no local weights; the message says how to get them."""


def backbone_dir() -> Path:
    return Path(os.environ.get(BACKBONE_DIR_ENV, DEFAULT_BACKBONE_DIR))


def _toy_projection() -> np.ndarray:
    rng = np.random.default_rng(_TOY_SEED)
    p2 = TOY_PATCH_SIZE * TOY_PATCH_SIZE
    return (rng.standard_normal((p2, TOY_CHANNELS)) / np.sqrt(p2)).astype(np.float32)


class ToyBackbone:
    """Deterministic stand-in: sorted patch pixels through a fixed projection.

    Sorting makes the per-patch descriptor invariant to flips within the
    patch, so flipping the image flips the feature grid exactly.
    """

    name = "toy"
    patch_size = TOY_PATCH_SIZE
    n_channels = TOY_CHANNELS

    def __init__(self):
        self._projection = _toy_projection()

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        """Grayscale (H,W) float32 in [0,1] -> patch grid (H/p, W/p, 384)."""
        h, w = plane.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(
                f"image dims {h}x{w} must be multiples of the patch size {p}; "
                "resize or crop the input first")
        hp, wp = h // p, w // p
        patches = (plane.reshape(hp, p, wp, p).transpose(0, 2, 1, 3)
                   .reshape(hp, wp, p * p))
        ordered = np.sort(patches, axis=-1).astype(np.float32)
        return np.tanh(ordered @ self._projection)


class TorchScriptBackbone:
    """Wraps a traced patch-feature model stored under the cache directory.

    The export must map a (1, 3, H, W) float tensor to patch features,
    either (1, C, H/p, W/p) or (1, N_tokens, C) with N_tokens = H/p * W/p.
    """

    def __init__(self, name: str, path: Path, patch_size: int = 14):
        import torch

        self.name = name
        self.patch_size = patch_size
        self._torch = torch
        self._model = torch.jit.load(str(path), map_location="cpu").eval()
        self.n_channels = None  # known after the first call

    def __call__(self, plane: np.ndarray) -> np.ndarray:
        torch = self._torch
        h, w = plane.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(
                f"image dims {h}x{w} must be multiples of the patch size {p}; "
                "resize or crop the input first")
        x = torch.from_numpy(np.ascontiguousarray(plane, np.float32))
        x = x.view(1, 1, h, w).repeat(1, 3, 1, 1)
        with torch.no_grad():
            out = self._model(x)
        hp, wp = h // p, w // p
        if out.ndim == 4:
            grid = out[0].permute(1, 2, 0)
        elif out.ndim == 3 and out.shape[1] == hp * wp:
            grid = out[0].reshape(hp, wp, out.shape[2])
        else:
            raise ValueError(
                f"backbone {self.name!r} returned shape {tuple(out.shape)}, "
                f"expected (1,C,{hp},{wp}) or (1,{hp * wp},C)")
        result = grid.numpy().astype(np.float32)
        self.n_channels = result.shape[2]
        return result


def load_backbone(name: str):
    """Backbone id -> callable; unknown ids must have a local TorchScript file."""
    if name == "toy":
        return ToyBackbone()
    path = backbone_dir() / f"{name}.pt"
    if not path.exists():
        raise BackboneUnavailable(
            f"backbone {name!r} is not available locally.\n"
            f"Expected a TorchScript export at: {path}\n"
            f"Trace the pretrained model so it maps a (1,3,H,W) float tensor to\n"
            f"stride-14 patch features, then save it there, for example:\n"
            f"  model = <load pretrained {name}>\n"
            f"  traced = torch.jit.trace(model, torch.zeros(1, 3, 224, 224))\n"
            f"  traced.save({str(path)!r})\n"
            f"The cache directory can be overridden with ${BACKBONE_DIR_ENV}.")
    return TorchScriptBackbone(name, path)


def extract_grid(backbone, plane: np.ndarray, flip_sym: bool = False) -> np.ndarray:
    """Run the backbone, optionally averaging over the four axis flips."""
    if not flip_sym:
        return backbone(plane)
    total = None
    for flip_rows, flip_cols in ((False, False), (False, True),
                                 (True, False), (True, True)):
        axes = tuple(np.flatnonzero([flip_rows, flip_cols]))
        view = np.flip(plane, axes) if axes else plane
        grid = backbone(np.ascontiguousarray(view))
        back = np.flip(grid, axes) if axes else grid
        total = back.copy() if total is None else total + back
    return (total / 4.0).astype(np.float32)
