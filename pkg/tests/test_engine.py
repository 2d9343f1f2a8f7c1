"""Workflow engine tests: projects, caching, training, segmenting, baselines."""

import numpy as np
import pytest

from microseg.classical import FeatureSetConfig, FeatureStack, featurize_classical
from microseg.classify import TrainConfig, fit, LabeledSamples
from microseg.engine import (
    Project,
    Segmentation,
    SparseLabelMap,
    TrainedModel,
    add_baseline_channels,
    apply_rle,
    build_feature_stack,
    load_labels_png,
    rle_records,
    save_labels_png,
    save_segmentation_png,
    segment,
    train_on_labels,
)
from microseg.errors import ShapeError, StateError

RNG = np.random.default_rng(20240814)

# small, fast feature config used everywhere dims allow
SMALL_CONFIG = FeatureSetConfig(sigmas=(0.0, 1.0, 2.0), membrane_kernel_size=9)


def halves_image(h=24, w=24):
    image = np.zeros((h, w), np.float32)
    image[:, w // 2:] = 1.0
    image += RNG.normal(0.0, 0.01, size=(h, w)).astype(np.float32)
    return image


def halves_labels(h=24, w=24, n=8):
    grid = np.zeros((h, w), np.int32)
    rows = RNG.choice(np.arange(2, h - 2), size=n, replace=False)
    grid[rows[: n // 2], 3] = 1
    grid[rows[n // 2:], w - 4] = 2
    return SparseLabelMap(grid=grid, class_count=2)


def halves_project():
    project = Project(halves_image(), feature_config=SMALL_CONFIG, class_count=2)
    project.labels = halves_labels()
    return project


def fake_deep_stack(h, w, k, rng=None, informative_plane=None):
    rng = RNG if rng is None else rng
    data = rng.normal(0.0, 0.05, size=(h, w, k)).astype(np.float32)
    if informative_plane is not None:
        data[:, :, 0] += informative_plane
    return FeatureStack(data, tuple(f"deep_{i}" for i in range(k)), pca_ordered=True)


# ---------------------------------------------------------------------------
# sparse label maps and their interchange formats


def test_label_map_validation():
    with pytest.raises(ValueError):
        SparseLabelMap(grid=np.array([[0, 3]], np.int32), class_count=2)
    with pytest.raises(ValueError):
        SparseLabelMap(grid=np.array([[-1, 0]], np.int32), class_count=2)
    with pytest.raises(ValueError):
        SparseLabelMap(grid=np.zeros((2, 2), np.int32), class_count=2,
                       class_names=("only one",))
    labels = SparseLabelMap(grid=np.array([[0, 1], [2, 0]], np.int32), class_count=3)
    assert labels.labelled_classes() == (1, 2)
    assert labels.class_names == ("class 1", "class 2", "class 3")


def test_rle_roundtrip():
    labels = SparseLabelMap.empty(6, 10, class_count=3)
    records = [
        {"class": 1, "row": 0, "start": 2, "len": 5},
        {"class": 2, "row": 3, "start": 0, "len": 10},
        {"class": 3, "row": 5, "start": 9, "len": 1},
    ]
    painted = apply_rle(labels, records)
    assert painted.grid[0, 2:7].tolist() == [1] * 5
    assert painted.grid[3].tolist() == [2] * 10
    assert painted.grid[5, 9] == 3
    assert rle_records(painted) == records


def test_rle_erase_and_validation():
    labels = SparseLabelMap.empty(4, 4, class_count=2)
    labels = apply_rle(labels, [{"class": 2, "row": 1, "start": 0, "len": 4}])
    erased = apply_rle(labels, [{"class": 0, "row": 1, "start": 1, "len": 2}])
    assert erased.grid[1].tolist() == [2, 0, 0, 2]
    for bad in (
        {"class": 3, "row": 0, "start": 0, "len": 1},
        {"class": 1, "row": 4, "start": 0, "len": 1},
        {"class": 1, "row": 0, "start": 3, "len": 2},
        {"class": 1, "row": 0, "start": 0, "len": 0},
    ):
        with pytest.raises(ValueError):
            apply_rle(labels, [bad])


def test_label_png_roundtrip(tmp_path):
    grid = RNG.integers(0, 4, size=(15, 11)).astype(np.int32)
    labels = SparseLabelMap(grid=grid, class_count=3)
    path = tmp_path / "labels.png"
    save_labels_png(path, labels)
    loaded = load_labels_png(path, class_count=3)
    assert np.array_equal(loaded.grid, grid)
    assert loaded.class_count == 3


# ---------------------------------------------------------------------------
# project caching rules


def test_classical_stack_is_cached_and_labels_do_not_invalidate():
    project = halves_project()
    first = project.classical_stack()
    project.paint([{"class": 1, "row": 0, "start": 0, "len": 3}])
    assert project.classical_stack() is first


def test_image_change_invalidates_feature_caches():
    project = halves_project()
    first = project.classical_stack()
    project.set_deep_stack(fake_deep_stack(24, 24, 4), cache_key="probe")
    project.image = halves_image() * 2.0
    assert project.deep_stack is None
    second = project.classical_stack()
    assert second is not first
    assert not np.array_equal(second.data, first.data)


def test_config_change_invalidates_classical_but_keeps_deep():
    project = halves_project()
    first = project.classical_stack()
    project.set_deep_stack(fake_deep_stack(24, 24, 4), cache_key="probe")
    project.feature_config = FeatureSetConfig(sigmas=(0.0, 1.0), membrane_kernel_size=9)
    assert project.classical_stack() is not first
    assert project.deep_stack is not None


def test_deep_stack_must_match_image_dims():
    project = halves_project()
    with pytest.raises(ShapeError):
        project.set_deep_stack(fake_deep_stack(10, 10, 4), cache_key="bad")


def test_labels_must_match_image_dims():
    project = halves_project()
    with pytest.raises(ShapeError):
        project.labels = SparseLabelMap.empty(3, 3, class_count=2)


# ---------------------------------------------------------------------------
# feature stack assembly


def test_stack_is_classical_then_deep_with_truncation():
    project = halves_project()
    project.set_deep_stack(fake_deep_stack(24, 24, 6), cache_key="probe")
    classical_n = SMALL_CONFIG.channel_count()
    assert build_feature_stack(project, use_deep=False).n_channels == classical_n
    combined = build_feature_stack(project, use_deep=True)
    assert combined.n_channels == classical_n + 6
    truncated = build_feature_stack(project, use_deep=True, j=2)
    assert truncated.n_channels == classical_n + 2
    assert truncated.channel_names[:classical_n] == combined.channel_names[:classical_n]
    assert truncated.channel_names[classical_n:] == ("deep_0", "deep_1")
    np.testing.assert_array_equal(
        combined.data[:, :, :classical_n], project.classical_stack().data)


def test_default_config_yields_63_plus_deep():
    image = RNG.normal(size=(24, 24)).astype(np.float32)
    project = Project(image, class_count=2)  # default feature config
    project.set_deep_stack(fake_deep_stack(24, 24, 16), cache_key="k16")
    assert build_feature_stack(project, use_deep=False).n_channels == 63
    assert build_feature_stack(project, use_deep=True).n_channels == 79
    assert build_feature_stack(project, use_deep=True, j=16).n_channels == 79


def test_missing_deep_cache_is_a_state_error():
    project = halves_project()
    with pytest.raises(StateError, match="[Ee]xtract"):
        build_feature_stack(project, use_deep=True)


def test_channel_order_is_stable_across_calls():
    project = halves_project()
    project.set_deep_stack(fake_deep_stack(24, 24, 3), cache_key="probe")
    a = build_feature_stack(project, use_deep=True)
    b = build_feature_stack(project, use_deep=True)
    assert a.channel_names == b.channel_names
    np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# training and segmenting


def test_train_and_segment_two_halves():
    project = halves_project()
    model, metrics = train_on_labels(project, "gbt", TrainConfig(seed=0))
    assert metrics["train_accuracy"] == 1.0
    assert metrics["per_class_counts"] == {1: 4, 2: 4}
    assert metrics["training_time_s"] > 0
    seg = segment(project)
    w = project.image.shape[1]
    interior = seg.labels[:, 2:w // 2 - 2]
    assert (interior == 1).mean() > 0.95
    interior = seg.labels[:, w // 2 + 2:-2]
    assert (interior == 2).mean() > 0.95
    assert seg.probabilities.shape == (24, 24, 2)


def test_retrain_same_labels_and_seed_is_identical():
    project = halves_project()
    train_on_labels(project, "gbt", TrainConfig(seed=1))
    first = segment(project)
    train_on_labels(project, "gbt", TrainConfig(seed=1))
    second = segment(project)
    assert np.array_equal(first.labels, second.labels)
    assert np.array_equal(first.probabilities, second.probabilities)
    assert len(project.history) == 2


def test_single_class_labels_refused_with_guidance():
    project = halves_project()
    grid = np.zeros((24, 24), np.int32)
    grid[0, :5] = 1
    project.labels = SparseLabelMap(grid=grid, class_count=2)
    with pytest.raises(ValueError, match="two"):
        train_on_labels(project, "gbt", TrainConfig())


def test_labelled_pixels_are_not_forced_to_their_label():
    # noise-free halves and interior label pixels make every left-half label
    # row bit-identical, so the single wrong label is unlearnable and the
    # classifier's honest majority answer must win in the output
    image = np.zeros((32, 32), np.float32)
    image[:, 16:] = 1.0
    project = Project(image, feature_config=SMALL_CONFIG, class_count=2)
    grid = np.zeros((32, 32), np.int32)
    for row in (8, 10, 14, 20):
        grid[row, 7] = 1
        grid[row, 24] = 2
    grid[12, 7] = 2  # deliberately wrong: identical features to the class-1 rows
    project.labels = SparseLabelMap(grid=grid, class_count=2)
    train_on_labels(project, "gbt", TrainConfig(seed=0))
    seg = segment(project)
    assert seg.labels[12, 7] == 1


def test_unused_class_ids_survive_round_trip():
    # classes 1 and 3 labelled, 2 left empty: output ids must stay 1 and 3
    image = halves_image()
    project = Project(image, feature_config=SMALL_CONFIG, class_count=3)
    grid = np.zeros((24, 24), np.int32)
    grid[2:22, 2] = 1
    grid[2:22, 21] = 3
    project.labels = SparseLabelMap(grid=grid, class_count=3)
    model, metrics = train_on_labels(project, "linear", TrainConfig(seed=0))
    assert metrics["per_class_counts"] == {1: 20, 3: 20}
    seg = segment(project)
    assert set(np.unique(seg.labels)) <= {1, 3}
    assert seg.probabilities.shape == (24, 24, 3)
    np.testing.assert_array_equal(seg.probabilities[:, :, 1], 0.0)


def test_segment_requires_model_and_fresh_caches():
    project = halves_project()
    with pytest.raises(StateError):
        segment(project)
    train_on_labels(project, "gbt", TrainConfig())
    project.image = halves_image() * 3.0
    with pytest.raises(StateError, match="[Ss]tale"):
        segment(project)


def test_constant_model_segments_uniformly():
    project = halves_project()
    samples = LabeledSamples(features=np.zeros((3, SMALL_CONFIG.channel_count()),
                                               np.float32),
                             labels=np.ones(3, np.int32), class_count=1)
    constant = fit(samples, "gbt", TrainConfig())
    project.model = TrainedModel(classifier=constant, class_ids=(2,),
                                 use_deep=False, j=None,
                                 feature_key=project.feature_key(False, None))
    seg = segment(project)
    assert (seg.labels == 2).all()


def test_deep_channel_separates_what_classical_cannot():
    rng = np.random.default_rng(31)
    h = w = 32
    image = rng.uniform(size=(h, w)).astype(np.float32)  # textureless noise
    indicator = np.zeros((h, w), np.float32)
    indicator[:, w // 2:] = 1.0
    grid = np.zeros((h, w), np.int32)
    grid[4:28, 2] = 1
    grid[4:28, 29] = 2
    truth = np.where(indicator > 0, 2, 1)

    project = Project(image, feature_config=SMALL_CONFIG, class_count=2)
    project.labels = SparseLabelMap(grid=grid, class_count=2)
    project.set_deep_stack(
        fake_deep_stack(h, w, 4, rng=rng, informative_plane=indicator),
        cache_key="oracle")

    train_on_labels(project, "gbt", TrainConfig(seed=0), use_deep=True)
    deep_acc = (segment(project).labels == truth).mean()
    train_on_labels(project, "gbt", TrainConfig(seed=0), use_deep=False)
    classical_acc = (segment(project).labels == truth).mean()
    assert deep_acc >= 0.9
    assert classical_acc <= 0.75


# ---------------------------------------------------------------------------
# baseline channels


def test_baseline_uniform_appends_exact_zeros():
    stack = featurize_classical(halves_image(), SMALL_CONFIG)
    grown = add_baseline_channels(stack, "uniform", 3)
    assert grown.n_channels == stack.n_channels + 3
    np.testing.assert_array_equal(grown.data[:, :, -3:], 0.0)
    np.testing.assert_array_equal(grown.data[:, :, :-3], stack.data)


def test_baseline_duplicate_copies_leading_channels():
    stack = featurize_classical(halves_image(), SMALL_CONFIG)
    grown = add_baseline_channels(stack, "duplicate", 2)
    np.testing.assert_array_equal(grown.data[:, :, -2:], stack.data[:, :, :2])
    with pytest.raises(ValueError):
        add_baseline_channels(stack, "duplicate", stack.n_channels + 1)


def test_baseline_noise_is_seeded_and_unit_uniform():
    stack = featurize_classical(halves_image(), SMALL_CONFIG)
    a = add_baseline_channels(stack, "noise", 2, seed=5)
    b = add_baseline_channels(stack, "noise", 2, seed=5)
    c = add_baseline_channels(stack, "noise", 2, seed=6)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    tail = a.data[:, :, -2:]
    assert tail.min() >= 0.0 and tail.max() < 1.0
    assert 0.3 < tail.mean() < 0.7


def test_baseline_kind_and_count_validation():
    stack = featurize_classical(halves_image(), SMALL_CONFIG)
    with pytest.raises(ValueError):
        add_baseline_channels(stack, "sparkle", 1)
    with pytest.raises(ValueError):
        add_baseline_channels(stack, "noise", 0)


# ---------------------------------------------------------------------------
# segmentation container


def test_segmentation_validates_argmax_rule():
    probs = np.zeros((2, 2, 2), np.float32)
    probs[:, :, 0] = 0.7
    probs[:, :, 1] = 0.3
    Segmentation(labels=np.ones((2, 2), np.int32), probabilities=probs)
    with pytest.raises(ValueError):
        Segmentation(labels=np.full((2, 2), 2, np.int32), probabilities=probs)


def test_segmentation_png_export(tmp_path):
    project = halves_project()
    train_on_labels(project, "gbt", TrainConfig())
    seg = segment(project)
    path = tmp_path / "seg.png"
    save_segmentation_png(path, seg)
    loaded = load_labels_png(path, class_count=2)
    assert np.array_equal(loaded.grid, seg.labels)
