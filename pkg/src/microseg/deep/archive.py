"""Patch-feature grids, upsampler weight archives and their file formats.

Two binary containers are defined here and intended to be written by other
tools as well (the trainer sidecar re-implements them independently):

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

All integers are little-endian. Read errors report the byte offset of the
field that failed to parse.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ArchiveError, FormatError, ShapeError
from ..tensors import as_f32

FEATURE_MAGIC = b"FTS1"
WEIGHTS_MAGIC = b"WAR1"
FORMAT_VERSION = 1
DTYPE_F32 = 0
NORM_EPS = 1e-5  # fixed normalization epsilon, part of the format semantics

_MAX_EXTENT = 1 << 28  # single-dim sanity bound for parsed headers


@dataclass(frozen=True)
class LowResFeatures:
    """Patch-stride feature grid plus the metadata needed to upsample it."""

    grid: np.ndarray
    patch_size: int
    source_image_dims: tuple[int, int]

    def __post_init__(self):
        grid = as_f32(self.grid)
        if grid.ndim != 3:
            raise ShapeError(f"feature grid must be (Hp,Wp,d), got {grid.shape}")
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


@dataclass(frozen=True)
class UpsamplerSpec:
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
    def from_dict(cls, d: dict) -> "UpsamplerSpec":
        try:
            return cls(**{k: int(d[k]) for k in
                          ("d_in", "d_out", "d_hidden", "d_down", "kernel_size", "num_stages")})
        except KeyError as e:
            raise ArchiveError(f"manifest spec missing field {e.args[0]!r}") from e


def expected_layer_dims(
    spec: UpsamplerSpec,
    normalization: str,
    convs_per_block: int,
    image_channels: int,
) -> dict[str, tuple[int, ...]]:
    """Name -> dims table of every tensor a conforming archive must carry."""
    k = spec.kernel_size
    table: dict[str, tuple[int, ...]] = {}

    def block(prefix: str, cin: int, cout: int):
        for j in range(convs_per_block):
            cj = cin if j == 0 else cout
            table[f"{prefix}.conv{j}.weight"] = (k, k, cj, cout)
            table[f"{prefix}.conv{j}.bias"] = (cout,)
            if normalization == "per_channel":
                table[f"{prefix}.norm{j}.weight"] = (cout,)
                table[f"{prefix}.norm{j}.bias"] = (cout,)

    block("down.0", image_channels, spec.d_down)
    for i in range(1, spec.num_stages + 1):
        block(f"down.{i}", spec.d_down, spec.d_down)
    # up.0 consumes the lr features fused with the coarsest guidance, then
    # the guidance of the level it lands on
    block("up.0", spec.d_in + 2 * spec.d_down, spec.d_hidden)
    for i in range(1, spec.num_stages):
        block(f"up.{i}", spec.d_hidden + spec.d_down, spec.d_hidden)
    table["head.weight"] = (1, 1, spec.d_hidden, spec.d_out)
    table["head.bias"] = (spec.d_out,)
    return table


@dataclass
class WeightArchive:
    """Immutable-after-load weight set plus the manifest describing it."""

    spec: UpsamplerSpec
    tensors: dict[str, np.ndarray]
    activation: str = "relu"
    normalization: str = "per_channel"
    convs_per_block: int = 2
    lr_l1_normalize: bool = True
    image_channels: int = 3
    features_pca_ordered: bool = True
    image_mean: tuple[float, ...] | None = None
    image_std: tuple[float, ...] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ("relu", "none"):
            raise ArchiveError(f"unknown activation {self.activation!r}")
        if self.normalization not in ("per_channel", "none"):
            raise ArchiveError(f"unknown normalization {self.normalization!r}")
        if self.convs_per_block not in (1, 2):
            raise ArchiveError(f"convs_per_block must be 1 or 2, got {self.convs_per_block}")
        if self.image_channels < 1:
            raise ArchiveError("image_channels must be >= 1")
        self.tensors = {name: as_f32(t) for name, t in self.tensors.items()}

    def validate(self):
        """Check every required layer is present with the dims the spec implies."""
        expected = expected_layer_dims(
            self.spec, self.normalization, self.convs_per_block, self.image_channels
        )
        for name, dims in expected.items():
            if name not in self.tensors:
                raise ArchiveError(f"missing layer tensor {name!r}")
            got = self.tensors[name].shape
            if got != dims:
                raise ArchiveError(f"layer {name!r} has dims {got}, expected {dims}")
        unknown = set(self.tensors) - set(expected)
        if unknown:
            raise ArchiveError(f"unexpected layer tensors: {sorted(unknown)}")

    def manifest(self) -> dict:
        m = {
            "format": "upsampler-weights",
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "activation": self.activation,
            "normalization": self.normalization,
            "convs_per_block": self.convs_per_block,
            "lr_l1_normalize": self.lr_l1_normalize,
            "image_channels": self.image_channels,
            "features_pca_ordered": self.features_pca_ordered,
            "norm_eps": NORM_EPS,
            "layers": list(self.tensors.keys()),
        }
        if self.image_mean is not None:
            m["image_mean"] = list(self.image_mean)
        if self.image_std is not None:
            m["image_std"] = list(self.image_std)
        m.update(self.extra)
        return m


def zero_archive(spec: UpsamplerSpec, **kwargs) -> WeightArchive:
    """Archive with every tensor zero-filled; useful as a fixture skeleton."""
    probe = WeightArchive(spec, {}, **kwargs)
    expected = expected_layer_dims(
        spec, probe.normalization, probe.convs_per_block, probe.image_channels
    )
    tensors = {name: np.zeros(dims, np.float32) for name, dims in expected.items()}
    return WeightArchive(spec, tensors, **kwargs)


class _Reader:
    """Byte-offset-tracking parser over an in-memory file image."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, desc: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated while reading {desc}", offset=self.pos
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, desc: str) -> int:
        return struct.unpack("<I", self.take(4, desc))[0]

    def u16(self, desc: str) -> int:
        return struct.unpack("<H", self.take(2, desc))[0]

    def dims(self, desc: str) -> tuple[int, ...]:
        at = self.pos
        rank = self.u32(f"{desc} rank")
        if not 1 <= rank <= 4:
            raise FormatError(f"{self.what}: bad rank {rank} for {desc}", offset=at)
        dims = tuple(self.u32(f"{desc} dim {i}") for i in range(rank))
        if any(d < 1 or d > _MAX_EXTENT for d in dims):
            raise FormatError(f"{self.what}: dim overflow in {desc}: {dims}", offset=at)
        return dims

    def f32_payload(self, dims: tuple[int, ...], desc: str) -> np.ndarray:
        count = int(np.prod(dims))
        raw = self.take(count * 4, f"{desc} payload ({count} float32)")
        return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def write_feature_file(path, features: LowResFeatures):
    grid = features.grid
    sh, sw = features.source_image_dims
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, grid.ndim))
        f.write(struct.pack(f"<{grid.ndim}I", *grid.shape))
        f.write(struct.pack("<IIII", DTYPE_F32, features.patch_size, sh, sw))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_feature_file(path) -> LowResFeatures:
    with open(path, "rb") as f:
        return parse_feature_bytes(f.read(), what=str(path))


def parse_feature_bytes(buf: bytes, what: str = "<bytes>") -> LowResFeatures:
    r = _Reader(buf, what)
    magic = r.take(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{r.what}: bad magic {magic!r}", offset=0)
    at = r.pos
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}", offset=at)
    dims = r.dims("feature grid")
    if len(dims) != 3:
        raise FormatError(f"{r.what}: expected a rank-3 feature grid, got rank {len(dims)}",
                          offset=at)
    at = r.pos
    dtype = r.u32("dtype")
    if dtype != DTYPE_F32:
        raise FormatError(f"{r.what}: unknown dtype code {dtype}", offset=at)
    patch = r.u32("patch_size")
    sh = r.u32("source_h")
    sw = r.u32("source_w")
    grid = r.f32_payload(dims, "feature grid")
    if r.pos != len(r.buf):
        raise FormatError(f"{r.what}: {len(r.buf) - r.pos} trailing bytes", offset=r.pos)
    return LowResFeatures(grid=grid, patch_size=patch, source_image_dims=(sh, sw))


def save_named_tensors(path, manifest: dict, tensors: dict[str, np.ndarray]):
    """Write a WAR1 container; manifest["layers"] fixes the record order."""
    if list(manifest.get("layers", ())) != list(tensors):
        raise ArchiveError("manifest layer list does not match the tensors given")
    encoded_manifest = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(encoded_manifest)))
        f.write(encoded_manifest)
        for name, tensor in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_named_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a WAR1 container back as (manifest, name -> float32 array)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    magic = r.take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"{r.what}: bad magic {magic!r}", offset=0)
    at = r.pos
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}", offset=at)
    at = r.pos
    manifest_len = r.u32("manifest length")
    try:
        manifest = json.loads(r.take(manifest_len, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{r.what}: unreadable manifest: {e}", offset=at) from e
    if not isinstance(manifest, dict) or "layers" not in manifest:
        raise ArchiveError(f"{r.what}: manifest missing 'layers'")

    tensors: dict[str, np.ndarray] = {}
    for expected_name in manifest["layers"]:
        at = r.pos
        name_len = r.u16("layer name length")
        name = r.take(name_len, "layer name").decode("utf-8")
        if name != expected_name:
            raise FormatError(
                f"{r.what}: layer {name!r} out of order, manifest says {expected_name!r}",
                offset=at,
            )
        dims = r.dims(f"layer {name}")
        tensors[name] = r.f32_payload(dims, f"layer {name}")
    if r.pos != len(r.buf):
        raise FormatError(f"{r.what}: {len(r.buf) - r.pos} trailing bytes", offset=r.pos)
    return manifest, tensors


def save_weight_archive(path, archive: WeightArchive):
    archive.validate()
    save_named_tensors(path, archive.manifest(), archive.tensors)


def load_weight_archive(path) -> WeightArchive:
    manifest, tensors = load_named_tensors(path)
    fmt = manifest.get("format", "upsampler-weights")
    if fmt != "upsampler-weights":
        raise ArchiveError(f"{path}: container holds {fmt!r}, not upsampler weights")
    try:
        spec = UpsamplerSpec.from_dict(manifest["spec"])
    except KeyError as e:
        raise ArchiveError(f"{path}: manifest missing {e.args[0]!r}") from e

    archive = WeightArchive(
        spec=spec,
        tensors=tensors,
        activation=manifest.get("activation", "relu"),
        normalization=manifest.get("normalization", "per_channel"),
        convs_per_block=int(manifest.get("convs_per_block", 2)),
        lr_l1_normalize=bool(manifest.get("lr_l1_normalize", True)),
        image_channels=int(manifest.get("image_channels", 3)),
        features_pca_ordered=bool(manifest.get("features_pca_ordered", True)),
        image_mean=tuple(manifest["image_mean"]) if "image_mean" in manifest else None,
        image_std=tuple(manifest["image_std"]) if "image_std" in manifest else None,
    )
    archive.validate()
    return archive
