"""Dense SIFT descriptors and the pooled 5376-d image feature."""

from __future__ import annotations

import numpy as np

from .. import core
from .encoding import (Dictionary, FeatureVector, LocalDescriptorSet,
                       llc_encode, spatial_pyramid_max_pool)

SIFT_STRIDE = 8
SIFT_SIZES = (16, 24, 32)
SIFT_ORIENT_BINS = 8
SIFT_GRID = 4                    # 4x4 spatial cells -> 128-d descriptors
SIFT_CLIP = 0.2


def _orientation_maps(gray: np.ndarray) -> np.ndarray:
    """Soft-binned gradient magnitude maps, shape (8, h, w)."""
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)

    pos = ang * SIFT_ORIENT_BINS / (2.0 * np.pi)
    lo = np.floor(pos).astype(np.int64) % SIFT_ORIENT_BINS
    frac = pos - np.floor(pos)
    hi = (lo + 1) % SIFT_ORIENT_BINS

    maps = np.zeros((SIFT_ORIENT_BINS,) + gray.shape)
    idx = np.indices(gray.shape)
    maps[lo, idx[0], idx[1]] += mag * (1.0 - frac)
    maps[hi, idx[0], idx[1]] += mag * frac
    return maps


def _triangular_kernel(radius: int) -> np.ndarray:
    taps = radius - np.abs(np.arange(-radius + 1, radius))
    return taps / taps.sum()


def dense_sift_descriptors(crop: np.ndarray,
                           stride: int = SIFT_STRIDE,
                           sizes=SIFT_SIZES) -> LocalDescriptorSet:
    """SIFT descriptors on a dense grid at several patch sizes.

    Each patch is split into a 4x4 grid of cells; per-cell orientation
    histograms come from triangular spatial weighting of the gradient maps,
    sampled at the cell centers.
    """
    from scipy.ndimage import convolve1d

    gray = core.to_gray(core.validate_raster(crop))
    h, w = gray.shape
    maps = _orientation_maps(gray)

    descs, positions, patch_sizes = [], [], []
    for s in sizes:
        cell = s // SIFT_GRID
        kernel = _triangular_kernel(cell)
        smooth = convolve1d(maps, kernel, axis=1, mode="nearest")
        smooth = convolve1d(smooth, kernel, axis=2, mode="nearest")

        x0 = np.arange(0, w - s + 1, stride)
        y0 = np.arange(0, h - s + 1, stride)
        if x0.size == 0 or y0.size == 0:
            continue
        # cell centers relative to the patch origin
        centers = cell * (np.arange(SIFT_GRID) + 0.5) - 0.5
        cx = np.clip(np.rint(x0[:, None] + centers[None]).astype(np.int64),
                     0, w - 1)
        cy = np.clip(np.rint(y0[:, None] + centers[None]).astype(np.int64),
                     0, h - 1)

        # gather (ny, nx, 4, 4, 8) histograms from the smoothed maps
        block = smooth[:, cy[:, None, :, None], cx[None, :, None, :]]
        block = np.moveaxis(block, 0, -1)
        d = block.reshape(y0.size * x0.size, -1)

        norms = np.linalg.norm(d, axis=1, keepdims=True)
        d = d / np.where(norms > 1e-12, norms, 1.0)
        d = np.minimum(d, SIFT_CLIP)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        d = d / np.where(norms > 1e-12, norms, 1.0)

        gx, gy = np.meshgrid(x0, y0)
        descs.append(d)
        positions.append(np.stack([gx.reshape(-1) + s / 2.0,
                                   gy.reshape(-1) + s / 2.0], axis=1))
        patch_sizes.append(np.full(gx.size, s))

    if not descs:
        raise ValueError("crop too small for dense SIFT")
    return LocalDescriptorSet(
        descriptors=np.concatenate(descs),
        positions=np.concatenate(positions),
        patch_sizes=np.concatenate(patch_sizes),
    )


def dense_sift_feature(crop: np.ndarray, dictionary: Dictionary,
                       kappa: int = 5, lam: float = 1e-4) -> FeatureVector:
    """Dense SIFT -> LLC over 256 words -> pyramid pooling (5376-d)."""
    if dictionary.k != 256:
        raise ValueError("dense SIFT expects a 256-word dictionary")
    dset = dense_sift_descriptors(crop)
    codes = llc_encode(dset.descriptors, dictionary, kappa, lam)
    pooled = spatial_pyramid_max_pool(codes, dset.positions,
                                      (crop.shape[1], crop.shape[0]))
    return FeatureVector("dsift5376", pooled)
