import json
import struct

import numpy as np
import pytest

from microseg.deep import (
    LowResFeatures,
    UpsamplerSpec,
    WeightArchive,
    expected_layer_dims,
    load_feature_file,
    load_weight_archive,
    save_weight_archive,
    write_feature_file,
    zero_archive,
)
from microseg.errors import ArchiveError, FormatError

RNG = np.random.default_rng(20240813)


def tiny_spec() -> UpsamplerSpec:
    return UpsamplerSpec(d_in=1, d_out=1, d_hidden=1, d_down=1, kernel_size=1, num_stages=1)


def random_archive(spec, **kwargs) -> WeightArchive:
    archive = zero_archive(spec, **kwargs)
    for name, t in archive.tensors.items():
        archive.tensors[name] = RNG.normal(size=t.shape).astype(np.float32)
    return archive


class TestFeatureFileFormat:
    def manual_bytes(self, grid, patch, src_h, src_w):
        # layout frozen by hand so the writer is checked against the format,
        # not against itself
        blob = b"FTS1"
        blob += struct.pack("<II", 1, 3)
        blob += struct.pack("<III", *grid.shape)
        blob += struct.pack("<IIII", 0, patch, src_h, src_w)
        blob += grid.astype("<f4").tobytes()
        return blob

    def test_reader_accepts_manual_layout(self, tmp_path):
        grid = RNG.normal(size=(2, 3, 4)).astype(np.float32)
        path = tmp_path / "f.fts"
        path.write_bytes(self.manual_bytes(grid, 14, 28, 42))
        lrf = load_feature_file(path)
        np.testing.assert_array_equal(lrf.grid, grid)
        assert lrf.patch_size == 14
        assert lrf.source_image_dims == (28, 42)

    def test_writer_emits_manual_layout(self, tmp_path):
        grid = RNG.normal(size=(3, 2, 5)).astype(np.float32)
        path = tmp_path / "f.fts"
        write_feature_file(path, LowResFeatures(grid, 16, (48, 32)))
        assert path.read_bytes() == self.manual_bytes(grid, 16, 48, 32)

    def test_round_trip_bit_identical(self, tmp_path):
        grid = RNG.normal(size=(7, 9, 11)).astype(np.float32)
        path = tmp_path / "f.fts"
        write_feature_file(path, LowResFeatures(grid, 14, (99, 126)))
        again = load_feature_file(path)
        assert again.grid.tobytes() == grid.tobytes()

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "f.fts"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(FormatError) as e:
            load_feature_file(path)
        assert e.value.offset == 0

    def test_unsupported_version(self, tmp_path):
        grid = np.zeros((1, 1, 1), np.float32)
        blob = bytearray(self.manual_bytes(grid, 1, 1, 1))
        blob[4:8] = struct.pack("<I", 9)
        path = tmp_path / "f.fts"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as e:
            load_feature_file(path)
        assert e.value.offset == 4

    def test_truncated_payload_is_format_error(self, tmp_path):
        grid = RNG.normal(size=(2, 2, 2)).astype(np.float32)
        blob = self.manual_bytes(grid, 1, 2, 2)
        path = tmp_path / "f.fts"
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_feature_file(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        grid = RNG.normal(size=(2, 2, 2)).astype(np.float32)
        path = tmp_path / "f.fts"
        path.write_bytes(self.manual_bytes(grid, 1, 2, 2) + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_feature_file(path)

    def test_unknown_dtype_code(self, tmp_path):
        grid = np.zeros((1, 1, 1), np.float32)
        blob = bytearray(self.manual_bytes(grid, 1, 1, 1))
        blob[20:24] = struct.pack("<I", 7)  # dtype field
        path = tmp_path / "f.fts"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="dtype"):
            load_feature_file(path)

    def test_wrong_rank_rejected(self, tmp_path):
        path = tmp_path / "f.fts"
        blob = b"FTS1" + struct.pack("<II", 1, 2) + struct.pack("<II", 2, 2)
        blob += struct.pack("<IIII", 0, 1, 2, 2) + np.zeros(4, "<f4").tobytes()
        path.write_bytes(blob)
        with pytest.raises(FormatError, match="rank"):
            load_feature_file(path)


class TestWeightArchiveFormat:
    def test_round_trip_preserves_everything(self, tmp_path):
        spec = UpsamplerSpec(d_in=2, d_out=2, d_hidden=3, d_down=2, num_stages=2)
        archive = random_archive(
            spec, activation="relu", normalization="per_channel",
            lr_l1_normalize=False, features_pca_ordered=True,
            image_mean=(0.5, 0.5, 0.5), image_std=(0.2, 0.2, 0.2),
        )
        path = tmp_path / "w.war"
        save_weight_archive(path, archive)
        again = load_weight_archive(path)
        assert again.spec == spec
        assert again.activation == "relu"
        assert again.normalization == "per_channel"
        assert again.lr_l1_normalize is False
        assert again.features_pca_ordered is True
        assert again.image_mean == (0.5, 0.5, 0.5)
        assert list(again.tensors) == list(archive.tensors)
        for name in archive.tensors:
            assert again.tensors[name].tobytes() == archive.tensors[name].tobytes()

    def test_manual_layout_parses(self, tmp_path):
        # one-layer-at-a-time byte construction against the documented format
        spec = tiny_spec()
        tensors = {
            name: RNG.normal(size=dims).astype(np.float32)
            for name, dims in expected_layer_dims(spec, "none", 1, 1).items()
        }
        manifest = json.dumps({
            "format": "upsampler-weights",
            "format_version": 1,
            "spec": spec.to_dict(),
            "activation": "none",
            "normalization": "none",
            "convs_per_block": 1,
            "lr_l1_normalize": False,
            "image_channels": 1,
            "features_pca_ordered": False,
            "layers": list(tensors),
        }).encode()
        blob = b"WAR1" + struct.pack("<II", 1, len(manifest)) + manifest
        for name, t in tensors.items():
            blob += struct.pack("<H", len(name)) + name.encode()
            blob += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
            blob += t.astype("<f4").tobytes()
        path = tmp_path / "w.war"
        path.write_bytes(blob)
        archive = load_weight_archive(path)
        assert archive.spec == spec
        for name, t in tensors.items():
            assert archive.tensors[name].tobytes() == t.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.war"
        path.write_bytes(b"WAT?" + b"\0" * 16)
        with pytest.raises(FormatError) as e:
            load_weight_archive(path)
        assert e.value.offset == 0

    def test_corrupt_manifest_json(self, tmp_path):
        garbage = b"{not json"
        path = tmp_path / "w.war"
        path.write_bytes(b"WAR1" + struct.pack("<II", 1, len(garbage)) + garbage)
        with pytest.raises(FormatError, match="manifest"):
            load_weight_archive(path)

    def test_truncated_layer_record(self, tmp_path):
        spec = tiny_spec()
        archive = random_archive(spec, activation="none", normalization="none",
                                 convs_per_block=1, image_channels=1)
        path = tmp_path / "w.war"
        save_weight_archive(path, archive)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_weight_archive(path)

    def test_missing_layer_is_archive_error_naming_it(self):
        spec = tiny_spec()
        archive = random_archive(spec, activation="none", normalization="none",
                                 convs_per_block=1, image_channels=1)
        del archive.tensors["up.0.conv0.weight"]
        with pytest.raises(ArchiveError, match="up.0.conv0.weight"):
            archive.validate()

    def test_wrong_layer_dims_is_archive_error(self):
        spec = tiny_spec()
        archive = random_archive(spec, activation="none", normalization="none",
                                 convs_per_block=1, image_channels=1)
        archive.tensors["head.weight"] = np.zeros((1, 1, 2, 1), np.float32)
        with pytest.raises(ArchiveError, match="head.weight"):
            archive.validate()

    def test_unexpected_layer_rejected(self):
        spec = tiny_spec()
        archive = random_archive(spec, activation="none", normalization="none",
                                 convs_per_block=1, image_channels=1)
        archive.tensors["down.9.conv0.weight"] = np.zeros((1, 1, 1, 1), np.float32)
        with pytest.raises(ArchiveError, match="unexpected"):
            archive.validate()

    def test_unknown_activation_rejected(self):
        with pytest.raises(ArchiveError, match="activation"):
            WeightArchive(tiny_spec(), {}, activation="gelu")

    def test_zero_archive_validates(self):
        zero_archive(UpsamplerSpec(2, 2, 4, 3)).validate()


class TestSpecTypes:
    def test_spec_dict_round_trip(self):
        spec = UpsamplerSpec(32, 32, 64, 32, 3, 4)
        assert UpsamplerSpec.from_dict(spec.to_dict()) == spec

    def test_spec_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            UpsamplerSpec(1, 1, 1, 1, kernel_size=2)

    def test_spec_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            UpsamplerSpec(0, 1, 1, 1)

    def test_lowres_rejects_wrong_rank(self):
        with pytest.raises(Exception):
            LowResFeatures(np.zeros((4, 4), np.float32), 14, (56, 56))

    def test_expected_layers_cover_all_stages(self):
        spec = UpsamplerSpec(8, 8, 16, 4, 3, 4)
        table = expected_layer_dims(spec, "per_channel", 2, 3)
        assert "down.4.conv1.weight" in table
        assert "up.3.norm1.bias" in table
        assert table["up.0.conv0.weight"] == (3, 3, 8 + 2 * 4, 16)
        assert table["up.1.conv0.weight"] == (3, 3, 16 + 4, 16)
        assert table["head.weight"] == (1, 1, 16, 8)
