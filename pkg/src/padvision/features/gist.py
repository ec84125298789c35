"""GIST scene descriptor: log-Gabor energies pooled on a coarse grid."""

from __future__ import annotations

import numpy as np

from .. import core
from .encoding import FeatureVector

GIST_SIZE = 256
GIST_SCALES = 4
GIST_ORIENTATIONS = 8
GIST_GRID = 4

_BANK_CACHE: dict[tuple, np.ndarray] = {}


def _resize_gray(gray: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample a float image to size x size."""
    from scipy.ndimage import map_coordinates

    h, w = gray.shape
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(gray, [gy, gx], order=1, mode="nearest")


def log_gabor_bank(size: int = GIST_SIZE, scales: int = GIST_SCALES,
                   orientations: int = GIST_ORIENTATIONS) -> np.ndarray:
    """Frequency-domain log-Gabor filters, shape (scales*orients, size, size).

    Filters are symmetric under rotation by pi, so filtering stays real.
    The DC coefficient is zero for every filter.
    """
    key = (size, scales, orientations)
    cached = _BANK_CACHE.get(key)
    if cached is not None:
        return cached

    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    radius[0, 0] = 1.0                       # avoid log(0); DC zeroed below
    theta = np.arctan2(fy, fx)

    sigma_on_f = 0.65
    ang_sigma = np.pi / orientations / 1.2
    filters = np.empty((scales * orientations, size, size))
    for s in range(scales):
        f0 = 0.25 / (2.0 ** s)
        radial = np.exp(-(np.log(radius / f0) ** 2)
                        / (2.0 * np.log(sigma_on_f) ** 2))
        radial[0, 0] = 0.0
        for o in range(orientations):
            angle = o * np.pi / orientations
            # orientation distance folded onto (-pi/2, pi/2]
            d = np.mod(theta - angle + np.pi / 2, np.pi) - np.pi / 2
            filters[s * orientations + o] = radial * np.exp(
                -(d ** 2) / (2.0 * ang_sigma ** 2))
    _BANK_CACHE[key] = filters
    return filters


def gist(crop: np.ndarray) -> FeatureVector:
    """512-d GIST: 4 scales x 8 orientations x 4x4 average-pooled energy."""
    gray = core.to_gray(core.validate_raster(crop))
    if gray.max() == gray.min():
        # constant input carries no structure; without this check FFT
        # roundoff noise would be normalized up to a unit vector
        return FeatureVector("gist512", np.zeros(
            GIST_SCALES * GIST_ORIENTATIONS * GIST_GRID * GIST_GRID))
    img = _resize_gray(gray, GIST_SIZE)
    spectrum = np.fft.fft2(img)
    bank = log_gabor_bank()

    cell = GIST_SIZE // GIST_GRID
    out = np.empty((bank.shape[0], GIST_GRID, GIST_GRID))
    for i, filt in enumerate(bank):
        energy = np.abs(np.fft.ifft2(spectrum * filt))
        out[i] = energy.reshape(GIST_GRID, cell, GIST_GRID, cell).mean(axis=(1, 3))
    vec = out.reshape(-1)
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
    return FeatureVector("gist512", vec)
