"""Hand-crafted feature extractors and the shared encoding machinery."""

from .encoding import (Dictionary, FeatureVector, LocalDescriptorSet,
                       kmeans, llc_encode, spatial_pyramid_max_pool,
                       KIND_LENGTHS)
from .color import (COLOR_NAMES, lab_histogram, color_name_map,
                    extract_patch_histograms, color_bank)
from .gist import gist
from .sift import dense_sift_descriptors, dense_sift_feature
from .encoding import combine

__all__ = [
    "Dictionary", "FeatureVector", "LocalDescriptorSet", "KIND_LENGTHS",
    "kmeans", "llc_encode", "spatial_pyramid_max_pool", "combine",
    "COLOR_NAMES", "lab_histogram", "color_name_map",
    "extract_patch_histograms", "color_bank",
    "gist", "dense_sift_descriptors", "dense_sift_feature",
]
