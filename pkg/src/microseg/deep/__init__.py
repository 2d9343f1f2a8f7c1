"""Deep patch-feature handling: file formats, guided upsampling, PCA prep."""

from .archive import (
    LowResFeatures,
    UpsamplerSpec,
    WeightArchive,
    expected_layer_dims,
    load_feature_file,
    parse_feature_bytes,
    load_named_tensors,
    load_weight_archive,
    save_named_tensors,
    save_weight_archive,
    write_feature_file,
    zero_archive,
)
from .prep import (
    preprocess_shared_pca,
    symmetrize_flips,
    truncate_compressed,
    visualize_pca_rgb,
)
from .upsampler import pyramid_dims, upsample

__all__ = [
    "LowResFeatures",
    "UpsamplerSpec",
    "WeightArchive",
    "expected_layer_dims",
    "load_feature_file",
    "parse_feature_bytes",
    "load_named_tensors",
    "load_weight_archive",
    "save_named_tensors",
    "save_weight_archive",
    "write_feature_file",
    "zero_archive",
    "preprocess_shared_pca",
    "symmetrize_flips",
    "truncate_compressed",
    "visualize_pca_rgb",
    "pyramid_dims",
    "upsample",
]
