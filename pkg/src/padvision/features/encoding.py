"""Dictionary learning, locality-constrained coding and pyramid pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import core

KIND_LENGTHS = {
    "lab90": 90,
    "gist512": 512,
    "colorbank420": 420,
    "dsift5376": 5376,
    "combined5796": 5796,
}

PYRAMID_LEVELS = (1, 2, 4)
PYRAMID_CELLS = sum(l * l for l in PYRAMID_LEVELS)      # 21


@dataclass(frozen=True)
class FeatureVector:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_LENGTHS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        expected = KIND_LENGTHS[self.kind]
        if self.values.shape != (expected,):
            raise ValueError(
                f"{self.kind} must have length {expected}, "
                f"got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")


@dataclass(frozen=True)
class LocalDescriptorSet:
    descriptors: np.ndarray          # (n, d)
    positions: np.ndarray            # (n, 2) patch centers, crop coordinates
    patch_sizes: np.ndarray          # (n,)

    def __post_init__(self):
        n = self.descriptors.shape[0]
        if n < 1:
            raise ValueError("descriptor set is empty")
        if self.positions.shape != (n, 2) or self.patch_sizes.shape != (n,):
            raise ValueError("inconsistent descriptor set shapes")


@dataclass(frozen=True)
class Dictionary:
    words: np.ndarray                # (k, d)
    digest: str

    @property
    def k(self) -> int:
        return self.words.shape[0]

    def save(self, path) -> None:
        core.save_arrays(path, {"digest": self.digest, "type": "dictionary"},
                         {"words": self.words})

    @classmethod
    def load(cls, path) -> "Dictionary":
        meta, arrays = core.load_arrays(path)
        return cls(words=arrays["words"], digest=meta["digest"])


def _pairwise_sq(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] \
        - 2.0 * (x @ c.T)
    return np.maximum(d, 0.0)


def kmeans(descriptors: np.ndarray, k: int, seed: int,
           max_iter: int = 300, move_tol: float = 1e-6,
           source_digest: str = "") -> Dictionary:
    """Seeded k-means++ / Lloyd dictionary learning.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid; the objective is checked to be non-increasing.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} descriptors, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ initialization
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _pairwise_sq(x, centers[0:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _pairwise_sq(x, centers[j:j + 1])[:, 0])

    prev_obj = np.inf
    for _ in range(max_iter):
        dist = _pairwise_sq(x, centers)
        assign = dist.argmin(axis=1)
        point_d = dist[np.arange(n), assign]
        obj = point_d.sum()
        if obj > prev_obj * (1 + 1e-9) + 1e-9:
            raise AssertionError("k-means objective increased")
        prev_obj = obj

        new_centers = centers.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(point_d.argmax())
            new_centers[j] = x[far]
            point_d[far] = 0.0
        move = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if move < move_tol:
            break

    digest = core.digest_bytes(
        np.ascontiguousarray(centers).tobytes()
        + f"{k}|{seed}|{source_digest}".encode())
    return Dictionary(words=centers, digest=digest)


def llc_encode(descriptors: np.ndarray, dictionary: Dictionary,
               kappa: int = 5, lam: float = 1e-4) -> np.ndarray:
    """Locality-constrained linear coding over the kappa nearest words.

    Returns dense (n, k) codes with at most kappa nonzeros per row, each row
    summing to 1.
    """
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    words = dictionary.words
    k = words.shape[0]
    if kappa > k:
        raise ValueError(f"kappa {kappa} exceeds dictionary size {k}")
    if x.shape[1] != words.shape[1]:
        raise ValueError("descriptor dimension does not match dictionary")
    n = x.shape[0]

    dist = _pairwise_sq(x.astype(np.float32), words.astype(np.float32))
    idx = np.argpartition(dist, kappa - 1, axis=1)[:, :kappa]
    neigh = words[idx]                               # (n, kappa, d)
    z = neigh - x[:, None, :]
    g = np.einsum("nkd,nld->nkl", z, z)
    tr = np.trace(g, axis1=1, axis2=2)
    reg = lam * np.where(tr > 0, tr, 1.0)
    g = g + reg[:, None, None] * np.eye(kappa)[None]
    ones = np.ones((n, kappa, 1))
    w = np.linalg.solve(g, ones)[..., 0]
    sums = w.sum(axis=1)
    bad = np.abs(sums) < 1e-12
    w[bad] = 1.0 / kappa
    sums[bad] = 1.0
    w = w / sums[:, None]

    codes = np.zeros((n, k))
    np.put_along_axis(codes, idx, w, axis=1)
    return codes


def spatial_pyramid_max_pool(codes: np.ndarray, positions: np.ndarray,
                             crop_size: tuple[int, int],
                             levels=PYRAMID_LEVELS) -> np.ndarray:
    """Per-word max pooling over a 1x1 / 2x2 / 4x4 pyramid (21 cells).

    Concatenation is level-major, row-major within each level; cells with no
    patches stay zero.
    """
    w, h = crop_size
    codes = np.asarray(codes)
    k = codes.shape[1]
    x = positions[:, 0]
    y = positions[:, 1]
    if ((x < 0) | (x > w) | (y < 0) | (y > h)).any():
        raise ValueError("patch positions outside the crop")
    n_cells = sum(l * l for l in levels)
    pooled = np.zeros((n_cells, k))
    offset = 0
    for level in levels:
        cx = np.minimum((x * level / w).astype(np.int64), level - 1)
        cy = np.minimum((y * level / h).astype(np.int64), level - 1)
        cell = offset + cy * level + cx
        np.maximum.at(pooled, cell, codes)
        offset += level * level
    return pooled.reshape(-1)


def combine(colorbank: FeatureVector, dsift: FeatureVector) -> FeatureVector:
    """Concatenate the two banked features, color bank first."""
    if colorbank.kind != "colorbank420" or dsift.kind != "dsift5376":
        raise ValueError("combine expects colorbank420 + dsift5376")
    return FeatureVector("combined5796",
                         np.concatenate([colorbank.values, dsift.values]))
