"""Binary tensor containers shared with the segmentation workbench.

Feature tensor file (.fts)
    magic        4 bytes  b"FTS1"
    version      u32 LE   1
    rank         u32 LE   number of dims (grids are rank 3: H, W, channels)
    dims         u32 LE x rank
    dtype        u32 LE   0 = float32 (only code defined)
    patch_size   u32 LE   backbone stride the grid was extracted at
    source_h     u32 LE   pixel dims of the originating image
    source_w     u32 LE
    payload      float32 LE, C order

Weight archive (.war)
    magic        4 bytes  b"WAR1"
    version      u32 LE   1
    manifest_len u32 LE
    manifest     UTF-8 JSON (architecture spec, flags, ordered layer list)
    then one record per manifest layer:
        name_len u16 LE, name bytes, rank u32 LE, dims u32 LE x rank,
        float32 LE C-order payload

This module is a deliberate reimplementation of the workbench's codecs:
the byte layout is the contract between the two tools, so neither side
imports the other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"FTS1"
WEIGHTS_MAGIC = b"WAR1"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_MAX_EXTENT = 1 << 28


class FormatError(ValueError):
    """A byte stream does not parse as the container it claims to be."""


@dataclass(frozen=True)
class FeatureGrid:
    """Feature planes plus the metadata needed to place them on an image."""

    grid: np.ndarray
    patch_size: int
    source_image_dims: tuple[int, int]

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if grid.ndim != 3:
            raise ValueError(f"feature grid must be (Hp,Wp,d), got {grid.shape}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        sh, sw = self.source_image_dims
        if sh < 1 or sw < 1:
            raise ValueError(f"bad source image dims {self.source_image_dims}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "source_image_dims", (int(sh), int(sw)))

    @property
    def n_channels(self) -> int:
        return self.grid.shape[2]


class _Reader:
    """Position-tracking parser so errors can report a byte offset."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, desc: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated reading {desc} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self, desc: str) -> int:
        return struct.unpack("<H", self.take(2, desc))[0]

    def u32(self, desc: str) -> int:
        return struct.unpack("<I", self.take(4, desc))[0]

    def dims(self, rank: int, desc: str) -> tuple[int, ...]:
        if rank < 1 or rank > 8:
            raise FormatError(f"{self.what}: implausible rank {rank} in {desc}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, desc))
        if any(d < 1 or d > _MAX_EXTENT for d in dims):
            raise FormatError(f"{self.what}: implausible dims {dims} in {desc}")
        return dims

    def tensor(self, dims: tuple[int, ...], desc: str) -> np.ndarray:
        count = int(np.prod(dims))
        raw = self.take(4 * count, desc)
        return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def write_features(path, features: FeatureGrid):
    grid = features.grid
    sh, sw = features.source_image_dims
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, grid.ndim))
        f.write(struct.pack(f"<{grid.ndim}I", *grid.shape))
        f.write(struct.pack("<IIII", DTYPE_F32, features.patch_size, sh, sw))
        f.write(grid.astype("<f4", copy=False).tobytes(order="C"))


def read_features(path) -> FeatureGrid:
    what = str(path)
    r = _Reader(Path(path).read_bytes(), what)
    if r.take(4, "magic") != FEATURE_MAGIC:
        raise FormatError(f"{what}: not a feature tensor file (bad magic)")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    rank = r.u32("rank")
    dims = r.dims(rank, "dims")
    if rank != 3:
        raise FormatError(f"{what}: feature grids are rank 3, got rank {rank}")
    dtype = r.u32("dtype")
    if dtype != DTYPE_F32:
        raise FormatError(f"{what}: unknown dtype code {dtype}")
    patch = r.u32("patch_size")
    sh = r.u32("source_h")
    sw = r.u32("source_w")
    grid = r.tensor(dims, "payload")
    if r.pos != len(r.buf):
        raise FormatError(f"{what}: {len(r.buf) - r.pos} trailing bytes")
    return FeatureGrid(grid, patch, (sh, sw))


def write_tensors(path, manifest: dict, tensors: dict[str, np.ndarray]):
    """Write a named-tensor archive; the manifest's layer list fixes order."""
    layers = manifest.get("layers")
    if layers is None or set(layers) != set(tensors):
        raise ValueError("manifest layer list must name exactly the tensors given")
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name in layers:
            t = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.tobytes(order="C"))


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    what = str(path)
    r = _Reader(Path(path).read_bytes(), what)
    if r.take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError(f"{what}: not a weight archive (bad magic)")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    length = r.u32("manifest length")
    try:
        manifest = json.loads(r.take(length, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{what}: manifest is not valid JSON: {e}") from e
    tensors: dict[str, np.ndarray] = {}
    for layer in manifest.get("layers", []):
        name = r.take(r.u16(f"name length of {layer!r}"),
                      f"name of {layer!r}").decode("utf-8")
        if name != layer:
            raise FormatError(
                f"{what}: layer order mismatch, manifest says {layer!r}, "
                f"stream has {name!r}")
        rank = r.u32(f"rank of {name!r}")
        dims = r.dims(rank, f"dims of {name!r}")
        tensors[name] = r.tensor(dims, f"payload of {name!r}")
    if r.pos != len(r.buf):
        raise FormatError(f"{what}: {len(r.buf) - r.pos} trailing bytes")
    return manifest, tensors
