"""Byte-level tests of the feature and weight containers."""

import json
import struct

import numpy as np
import pytest

from upsampler_trainer import (FeatureGrid, read_features, read_tensors,
                               write_features, write_tensors)
from upsampler_trainer.formats import FormatError


def random_grid(rng, shape=(5, 7, 3)):
    return FeatureGrid(rng.normal(size=shape).astype(np.float32),
                       patch_size=14, source_image_dims=(70, 98))


def test_feature_roundtrip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    grid = random_grid(rng)
    path = tmp_path / "a.fts"
    write_features(path, grid)
    back = read_features(path)
    assert np.array_equal(back.grid, grid.grid)
    assert back.patch_size == 14
    assert back.source_image_dims == (70, 98)

    rewritten = tmp_path / "b.fts"
    write_features(rewritten, back)
    assert rewritten.read_bytes() == path.read_bytes()


def test_tensor_archive_roundtrip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "a.weight": rng.normal(size=(3, 3, 2, 4)).astype(np.float32),
        "a.bias": rng.normal(size=(4,)).astype(np.float32),
        "b.weight": rng.normal(size=(1, 1, 4, 2)).astype(np.float32),
    }
    manifest = {"format": "upsampler-weights", "format_version": 1,
                "layers": ["a.weight", "a.bias", "b.weight"], "note": "x"}
    path = tmp_path / "w.war"
    write_tensors(path, manifest, tensors)
    got_manifest, got = read_tensors(path)
    assert got_manifest == manifest
    assert list(got) == manifest["layers"]
    for name in tensors:
        assert np.array_equal(got[name], tensors[name])
        assert got[name].dtype == np.float32

    again = tmp_path / "w2.war"
    write_tensors(again, got_manifest, got)
    assert again.read_bytes() == path.read_bytes()


def test_write_tensors_requires_matching_layer_list(tmp_path):
    with pytest.raises(ValueError, match="layer list"):
        write_tensors(tmp_path / "w.war", {"layers": ["a", "b"]},
                      {"a": np.zeros(1, np.float32)})


def test_feature_bad_magic(tmp_path):
    path = tmp_path / "a.fts"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="bad magic"):
        read_features(path)


def test_feature_unsupported_version(tmp_path):
    path = tmp_path / "a.fts"
    path.write_bytes(b"FTS1" + struct.pack("<II", 9, 3) + b"\x00" * 64)
    with pytest.raises(FormatError, match="version 9"):
        read_features(path)


def test_feature_truncated_payload_reports_offset(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "a.fts"
    write_features(path, random_grid(rng))
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated reading payload"):
        read_features(path)


def test_feature_trailing_bytes_rejected(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "a.fts"
    write_features(path, random_grid(rng))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="2 trailing bytes"):
        read_features(path)


def test_feature_wrong_rank_rejected(tmp_path):
    payload = np.zeros((4, 5), np.float32)
    blob = (b"FTS1" + struct.pack("<II", 1, 2) + struct.pack("<II", 4, 5)
            + struct.pack("<IIII", 0, 14, 56, 70) + payload.tobytes())
    path = tmp_path / "a.fts"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="rank 3"):
        read_features(path)


def test_feature_unknown_dtype_rejected(tmp_path):
    payload = np.zeros((2, 2, 1), np.float32)
    blob = (b"FTS1" + struct.pack("<II", 1, 3) + struct.pack("<III", 2, 2, 1)
            + struct.pack("<IIII", 7, 14, 28, 28) + payload.tobytes())
    path = tmp_path / "a.fts"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="dtype code 7"):
        read_features(path)


def test_feature_zero_dim_rejected(tmp_path):
    blob = (b"FTS1" + struct.pack("<II", 1, 3) + struct.pack("<III", 2, 0, 1)
            + struct.pack("<IIII", 0, 14, 28, 28))
    path = tmp_path / "a.fts"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="implausible dims"):
        read_features(path)


def test_archive_layer_order_mismatch_detected(tmp_path):
    def record(name, tensor):
        encoded = name.encode()
        return (struct.pack("<H", len(encoded)) + encoded
                + struct.pack("<I", tensor.ndim)
                + struct.pack(f"<{tensor.ndim}I", *tensor.shape)
                + tensor.tobytes())

    a = np.zeros(2, np.float32)
    b = np.ones(3, np.float32)
    manifest = json.dumps({"layers": ["a", "b"]}).encode()
    blob = (b"WAR1" + struct.pack("<II", 1, len(manifest)) + manifest
            + record("b", b) + record("a", a))
    path = tmp_path / "w.war"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="order mismatch"):
        read_tensors(path)


def test_archive_garbage_manifest_rejected(tmp_path):
    manifest = b"{not json"
    blob = b"WAR1" + struct.pack("<II", 1, len(manifest)) + manifest
    path = tmp_path / "w.war"
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="not valid JSON"):
        read_tensors(path)
