import numpy as np
import pytest

from microseg.classical import FeatureStack
from microseg.deep import (
    LowResFeatures,
    preprocess_shared_pca,
    symmetrize_flips,
    truncate_compressed,
    visualize_pca_rgb,
)
from microseg.errors import ShapeError
from microseg.tensors import pca_project

from .oracles import eig_pca

RNG = np.random.default_rng(20240815)


class TestSharedPCA:
    def test_single_view_equals_plain_pca(self):
        grid = RNG.normal(size=(6, 5, 8)).astype(np.float32)
        model, lrf = preprocess_shared_pca([grid], k=3)
        mean, comps, _ = eig_pca(grid.reshape(-1, 8), 3)
        expected = (grid.reshape(-1, 8) - mean) @ comps.T
        np.testing.assert_allclose(lrf.grid.reshape(-1, 3), expected, atol=1e-4)

    def test_views_of_different_dims_pool(self):
        views = [
            RNG.normal(size=(4, 4, 6)).astype(np.float32),
            RNG.normal(size=(3, 5, 6)).astype(np.float32),
            RNG.normal(size=(5, 2, 6)).astype(np.float32),
        ]
        model, lrf = preprocess_shared_pca(views, k=2)
        assert lrf.grid.shape == (4, 4, 2)
        assert model.n_features == 6

    def test_projection_depends_on_extra_views(self):
        base = RNG.normal(size=(4, 4, 6)).astype(np.float32)
        other = RNG.normal(size=(4, 4, 6)).astype(np.float32) * 3.0
        _, solo = preprocess_shared_pca([base], k=2)
        _, shared = preprocess_shared_pca([base, other], k=2)
        assert np.abs(solo.grid - shared.grid).max() > 1e-3

    def test_metadata_carried_from_lowres_view(self):
        grid = RNG.normal(size=(4, 4, 6)).astype(np.float32)
        view = LowResFeatures(grid, 14, (56, 56))
        _, lrf = preprocess_shared_pca([view], k=2)
        assert lrf.patch_size == 14
        assert lrf.source_image_dims == (56, 56)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            preprocess_shared_pca([], k=2)

    def test_k_above_channel_count_rejected(self):
        grid = RNG.normal(size=(4, 4, 6)).astype(np.float32)
        with pytest.raises(ValueError):
            preprocess_shared_pca([grid], k=7)

    def test_multi_view_error_grows_then_plateaus(self):
        # the deviation from the single-view projection saturates as the
        # pooled basis converges
        base = RNG.normal(size=(6, 6, 8)).astype(np.float32)
        extras = [RNG.normal(size=(6, 6, 8)).astype(np.float32) for _ in range(60)]
        _, ref = preprocess_shared_pca([base], k=3)

        def mae(n):
            _, lrf = preprocess_shared_pca([base] + extras[:n], k=3)
            return float(np.abs(lrf.grid - ref.grid).mean())

        assert mae(0) == 0.0
        assert mae(3) > 0.01
        assert abs(mae(60) - mae(45)) < 0.5 * mae(3)


class TestSymmetrizeFlips:
    def test_constant_provider_passthrough(self):
        def extract(img):
            return np.full((4, 4, 2), 1.5, np.float32)

        out = symmetrize_flips(extract, np.zeros((16, 16), np.float32))
        np.testing.assert_allclose(out.grid, 1.5)

    def test_equivariant_provider_equals_identity_view(self):
        def extract(img):
            # 4x4 mean pooling commutes with flips for even dims
            h, w = img.shape
            return img.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))[:, :, None]

        img = RNG.uniform(size=(16, 16)).astype(np.float32)
        out = symmetrize_flips(extract, img)
        np.testing.assert_allclose(out.grid, extract(img), atol=1e-6)

    def test_additive_gradient_bias_cancels(self):
        bias = np.linspace(0.0, 1.0, 4, dtype=np.float32)[None, :, None]

        def pool(img):
            h, w = img.shape
            return img.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))[:, :, None]

        def biased(img):
            return pool(img) + bias

        img = RNG.uniform(size=(16, 16)).astype(np.float32)
        out = symmetrize_flips(biased, img)
        residual = out.grid - pool(img)
        # the left-to-right ramp averages to a constant across the flip group
        assert np.ptp(residual) < 1e-6

    def test_flip_equivariance_of_output(self):
        def extract(img):
            h, w = img.shape
            grid = img.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))
            return (grid + 0.1 * np.arange(grid.shape[1], dtype=np.float32))[:, :, None]

        img = RNG.uniform(size=(16, 16)).astype(np.float32)
        a = symmetrize_flips(extract, img[:, ::-1]).grid
        b = symmetrize_flips(extract, img).grid[:, ::-1]
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_metadata_from_provider(self):
        def extract(img):
            return LowResFeatures(np.zeros((2, 2, 1), np.float32), 14, (28, 28))

        out = symmetrize_flips(extract, np.zeros((28, 28), np.float32))
        assert out.patch_size == 14

    def test_provider_error_propagates(self):
        def extract(img):
            raise RuntimeError("backbone offline")

        with pytest.raises(RuntimeError, match="backbone offline"):
            symmetrize_flips(extract, np.zeros((8, 8), np.float32))


def stack(data, pca_ordered=False):
    names = [f"c{i}" for i in range(data.shape[2])]
    return FeatureStack(data.astype(np.float32), names, pca_ordered=pca_ordered)


class TestTruncateCompressed:
    def test_identity_at_full_width(self):
        s = stack(RNG.normal(size=(4, 4, 5)))
        t = truncate_compressed(s, 5)
        np.testing.assert_array_equal(t.data, s.data)
        assert t.channel_names == s.channel_names

    def test_first_channels_kept_in_order(self):
        s = stack(RNG.normal(size=(4, 4, 8)), pca_ordered=True)
        t = truncate_compressed(s, 3)
        np.testing.assert_array_equal(t.data, s.data[:, :, :3])
        assert t.channel_names == s.channel_names[:3]
        assert t.pca_ordered

    def test_nested_truncation_consistent(self):
        s = stack(RNG.normal(size=(4, 4, 8)))
        a = truncate_compressed(s, 2)
        b = truncate_compressed(truncate_compressed(s, 5), 2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_j_out_of_range_rejected(self):
        s = stack(RNG.normal(size=(4, 4, 4)))
        with pytest.raises(ValueError):
            truncate_compressed(s, 5)
        with pytest.raises(ValueError):
            truncate_compressed(s, 0)


class TestVisualizePcaRgb:
    def test_pca_ordered_takes_first_three_rescaled(self):
        data = RNG.normal(size=(6, 6, 5)).astype(np.float32)
        out = visualize_pca_rgb(stack(data, pca_ordered=True))
        for c in range(3):
            plane = data[:, :, c]
            expected = (plane - plane.min()) / (plane.max() - plane.min())
            np.testing.assert_allclose(out[:, :, c], expected, atol=1e-6)

    def test_constant_stack_renders_mid_gray(self):
        out = visualize_pca_rgb(stack(np.ones((4, 4, 6))))
        np.testing.assert_allclose(out, 0.5)

    def test_output_in_unit_range(self):
        out = visualize_pca_rgb(stack(RNG.normal(size=(8, 8, 10))))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_matches_eig_oracle_up_to_sign(self):
        data = RNG.normal(size=(8, 8, 10)).astype(np.float32)
        out = visualize_pca_rgb(stack(data))

        pixels = data.reshape(-1, 10).astype(np.float64)
        mean, comps, _ = eig_pca(pixels, 3)
        proj = ((pixels - mean) @ comps.T).reshape(8, 8, 3)
        for c in range(3):
            plane = proj[:, :, c]
            expected = (plane - plane.min()) / (plane.max() - plane.min())
            direct = np.abs(out[:, :, c] - expected).max()
            flipped = np.abs(out[:, :, c] - (1.0 - expected)).max()
            assert min(direct, flipped) < 1e-5

    def test_fewer_than_three_channels_rejected(self):
        with pytest.raises(ShapeError):
            visualize_pca_rgb(stack(RNG.normal(size=(4, 4, 2))))
