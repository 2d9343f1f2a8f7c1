"""Project persistence tests: roundtrips, cache integrity, format migration."""

import json
import logging

import numpy as np
import pytest

from microseg.classical import FeatureSetConfig, FeatureStack
from microseg.engine import Project, SparseLabelMap, segment, train_on_labels
from microseg.classify import TrainConfig
from microseg.errors import FormatError, StateError
from microseg.store import FORMAT_VERSION, ProjectStore

SMALL_CONFIG = FeatureSetConfig(sigmas=(0, 1, 2), membrane_kernel_size=9)
RNG = np.random.default_rng(77)


def make_trained_project() -> Project:
    image = np.full((32, 32), 0.2, np.float32)
    image[:, 16:] = 0.8
    image += RNG.normal(0.0, 0.01, image.shape).astype(np.float32)
    project = Project(image, feature_config=SMALL_CONFIG, class_count=2,
                      class_names=("bg", "fg"))
    project.paint([{"class": 1, "row": 8, "start": 3, "len": 8},
                   {"class": 1, "row": 22, "start": 4, "len": 8},
                   {"class": 2, "row": 10, "start": 20, "len": 8},
                   {"class": 2, "row": 25, "start": 21, "len": 8}])
    train_on_labels(project, "gbt", TrainConfig(n_rounds=10, seed=0))
    return project


@pytest.fixture(scope="module")
def trained_project():
    return make_trained_project()


def test_save_load_roundtrip_gives_identical_segmentation(tmp_path,
                                                          trained_project):
    store = ProjectStore(tmp_path)
    store.save_project("demo", trained_project, extra={"revision": 4})
    loaded, extra = store.load_project("demo")

    assert extra == {"revision": 4}
    assert loaded.class_names == ("bg", "fg")
    assert loaded.feature_config.to_dict() == SMALL_CONFIG.to_dict()
    np.testing.assert_array_equal(loaded.image, trained_project.image)
    np.testing.assert_array_equal(loaded.labels.grid,
                                  trained_project.labels.grid)
    # history crosses a JSON boundary, so int class-id keys come back as str
    assert loaded.history == json.loads(json.dumps(trained_project.history))
    assert loaded.classical_cached is not None

    want = segment(trained_project)
    got = segment(loaded)
    np.testing.assert_array_equal(got.labels, want.labels)
    np.testing.assert_array_equal(got.probabilities, want.probabilities)


def test_corrupt_cache_file_is_dropped_with_warning(tmp_path, trained_project,
                                                    caplog):
    store = ProjectStore(tmp_path)
    store.save_project("demo", trained_project)
    (tmp_path / "demo" / "classical.npy").write_bytes(b"not an array")

    with caplog.at_level(logging.WARNING, logger="microseg.store"):
        loaded, _ = store.load_project("demo")
    assert any("cache" in r.message for r in caplog.records)
    assert loaded.classical_cached is None

    # the cache is advisory: segmentation recomputes and matches exactly
    want = segment(trained_project)
    got = segment(loaded)
    np.testing.assert_array_equal(got.labels, want.labels)
    np.testing.assert_array_equal(got.probabilities, want.probabilities)


def test_tampered_cache_fails_digest_check(tmp_path, trained_project, caplog):
    store = ProjectStore(tmp_path)
    store.save_project("demo", trained_project)
    stack = trained_project.classical_cached
    np.save(tmp_path / "demo" / "classical.npy",
            np.zeros_like(stack.data), allow_pickle=False)

    with caplog.at_level(logging.WARNING, logger="microseg.store"):
        loaded, _ = store.load_project("demo")
    assert any("digest mismatch" in r.message for r in caplog.records)
    assert loaded.classical_cached is None


def test_deep_cache_roundtrips_with_key(tmp_path, trained_project):
    store = ProjectStore(tmp_path)
    deep = FeatureStack(RNG.random((32, 32, 4), dtype=np.float32).copy(),
                        ("d0", "d1", "d2", "d3"), pca_ordered=True)
    trained_project.set_deep_stack(deep, cache_key="abc123")
    store.save_project("demo", trained_project)

    loaded, _ = store.load_project("demo")
    np.testing.assert_array_equal(loaded.deep_stack.data, deep.data)
    assert loaded.deep_stack.channel_names == deep.channel_names
    assert loaded.deep_stack.pca_ordered
    assert loaded.deep_cache_key == "abc123"


def test_forward_migration_applies_once(tmp_path, trained_project, caplog):
    store = ProjectStore(tmp_path)
    store.save_project("demo", trained_project)

    meta_path = tmp_path / "demo" / "project.json"
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = 0
    meta["classes"] = meta.pop("class_names")
    del meta["history"]
    meta_path.write_text(json.dumps(meta))

    with caplog.at_level(logging.WARNING, logger="microseg.store"):
        loaded, _ = store.load_project("demo")
    assert any("migrated from format 0" in r.message for r in caplog.records)
    assert loaded.class_names == ("bg", "fg")
    assert loaded.history == []
    assert json.loads(meta_path.read_text())["format_version"] == FORMAT_VERSION

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="microseg.store"):
        store.load_project("demo")
    assert not any("migrated" in r.message for r in caplog.records)


def test_newer_format_is_refused(tmp_path, trained_project):
    store = ProjectStore(tmp_path)
    store.save_project("demo", trained_project)
    meta_path = tmp_path / "demo" / "project.json"
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = FORMAT_VERSION + 1
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="newer|format"):
        store.load_project("demo")


def test_newer_index_format_is_refused(tmp_path):
    ProjectStore(tmp_path)  # writes a current-format index
    index_path = tmp_path / "store.json"
    index = json.loads(index_path.read_text())
    index["format_version"] = FORMAT_VERSION + 1
    index_path.write_text(json.dumps(index))
    with pytest.raises(FormatError):
        ProjectStore(tmp_path)


def test_unknown_id_and_membership(tmp_path, trained_project):
    store = ProjectStore(tmp_path)
    with pytest.raises(StateError, match="no project"):
        store.load_project("ghost")
    assert "ghost" not in store

    store.save_project("demo", trained_project)
    assert "demo" in store
    assert store.project_ids == ("demo",)

    store.delete_project("demo")
    assert "demo" not in store
    assert not (tmp_path / "demo").exists()


def test_model_free_project_roundtrips(tmp_path):
    project = Project(np.zeros((8, 8), np.float32), class_count=3)
    project.labels = SparseLabelMap(
        grid=np.pad(np.full((2, 2), 2, np.int32), ((3, 3), (3, 3))),
        class_count=3)
    store = ProjectStore(tmp_path)
    store.save_project("empty", project)
    loaded, _ = store.load_project("empty")
    assert loaded.model is None
    assert loaded.classical_cached is None
    np.testing.assert_array_equal(loaded.labels.grid, project.labels.grid)


def test_ids_are_unique_and_pathless(tmp_path, trained_project):
    store = ProjectStore(tmp_path)
    ids = {store.new_id() for _ in range(32)}
    assert len(ids) == 32
    with pytest.raises(ValueError):
        store.save_project("a/b", trained_project)
