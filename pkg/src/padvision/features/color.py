"""Color-space features: L*a*b* histogram and the color-bank pipeline."""

from __future__ import annotations

import numpy as np

from .. import core
from .encoding import (Dictionary, FeatureVector, LocalDescriptorSet,
                       llc_encode, spatial_pyramid_max_pool)

LAB_BINS = 30
LAB_RANGES = ((0.0, 100.0), (-110.0, 110.0), (-110.0, 110.0))

# Fixed color-name prototypes (RGB); matching happens in L*a*b* space.
COLOR_NAMES = (
    ("black", (0, 0, 0)),
    ("blue", (30, 60, 225)),
    ("brown", (130, 80, 30)),
    ("grey", (128, 128, 128)),
    ("green", (40, 160, 60)),
    ("orange", (250, 160, 30)),
    ("pink", (245, 150, 180)),
    ("purple", (150, 60, 200)),
    ("red", (220, 40, 40)),
    ("white", (255, 255, 255)),
    ("yellow", (245, 230, 40)),
)
_NAME_LAB = core.rgb_image_to_lab(
    np.array([rgb for _, rgb in COLOR_NAMES], dtype=np.float64))

PATCH_SIZES = (8, 16, 24)


def lab_histogram(crop: np.ndarray) -> FeatureVector:
    """Three 30-bin marginal L*a*b* histograms, each L1-normalized."""
    lab = core.rgb_image_to_lab(core.validate_raster(crop))
    parts = []
    for c, (lo, hi) in enumerate(LAB_RANGES):
        vals = np.clip(lab[..., c].reshape(-1), lo, hi - 1e-9)
        hist, _ = np.histogram(vals, bins=LAB_BINS, range=(lo, hi))
        parts.append(hist / hist.sum())
    return FeatureVector("lab90", np.concatenate(parts))


def color_name_map(crop: np.ndarray) -> np.ndarray:
    """Index of the nearest color-name prototype per pixel."""
    lab = core.rgb_image_to_lab(core.validate_raster(crop))
    flat = lab.reshape(-1, 3)
    d = ((flat[:, None, :] - _NAME_LAB[None]) ** 2).sum(axis=2)
    return d.argmin(axis=1).astype(np.uint8).reshape(crop.shape[:2])


def extract_patch_histograms(name_map: np.ndarray,
                             patch_sizes=PATCH_SIZES) -> LocalDescriptorSet:
    """L1-normalized color-name histograms of dense overlapping patches.

    Patches of size s are sampled at stride s/2 via per-name integral images.
    """
    h, w = name_map.shape
    n_names = len(COLOR_NAMES)
    if min(patch_sizes) > min(h, w):
        raise ValueError("patch larger than crop")

    # integral images per name, shape (names, h+1, w+1)
    onehot = (name_map[None] == np.arange(n_names)[:, None, None])
    integral = np.zeros((n_names, h + 1, w + 1), dtype=np.int64)
    integral[:, 1:, 1:] = onehot.cumsum(axis=1).cumsum(axis=2)

    descs, positions, sizes = [], [], []
    for s in patch_sizes:
        stride = s // 2
        xs = np.arange(0, w - s + 1, stride)
        ys = np.arange(0, h - s + 1, stride)
        gx, gy = np.meshgrid(xs, ys)
        gx, gy = gx.reshape(-1), gy.reshape(-1)
        counts = (integral[:, gy + s, gx + s] - integral[:, gy, gx + s]
                  - integral[:, gy + s, gx] + integral[:, gy, gx]).T
        descs.append(counts / (s * s))
        positions.append(np.stack([gx + s / 2.0, gy + s / 2.0], axis=1))
        sizes.append(np.full(gx.size, s))
    return LocalDescriptorSet(
        descriptors=np.concatenate(descs).astype(np.float64),
        positions=np.concatenate(positions),
        patch_sizes=np.concatenate(sizes),
    )


def color_bank(crop: np.ndarray, dictionary: Dictionary,
               kappa: int = 5, lam: float = 1e-4) -> FeatureVector:
    """Color names -> patch histograms -> LLC -> pyramid pooling (420-d)."""
    if dictionary.k != 20:
        raise ValueError("color bank expects a 20-word dictionary")
    patches = extract_patch_histograms(color_name_map(crop))
    codes = llc_encode(patches.descriptors, dictionary, kappa, lam)
    pooled = spatial_pyramid_max_pool(codes, patches.positions,
                                      (crop.shape[1], crop.shape[0]))
    return FeatureVector("colorbank420", pooled)
