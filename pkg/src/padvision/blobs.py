"""Per-lane reaction blob extraction and card color fingerprints.

Each lane is seeded at the centroids of five equal-height bands, regions are
grown by color similarity to the running region mean, heavily overlapping
regions are merged, and the most chromatic surviving blob (largest channel
spread of the mean color) is kept as the lane's reaction blob.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import CardLayout, Rect

DEFAULT_TAU = 40.0
MERGE_FRACTION = 0.35


@dataclass
class Region:
    """A grown connected region inside one lane rectangle."""
    lane: int
    mask: np.ndarray                    # boolean, lane-rect local
    mean_rgb: np.ndarray
    size: int
    bbox: Rect
    image: np.ndarray = field(repr=False, default=None)   # lane-rect pixels

    def pixels(self):
        """Lane-local (x, y) coordinates of member pixels."""
        ys, xs = np.nonzero(self.mask)
        return list(zip(xs.tolist(), ys.tolist()))


@dataclass(frozen=True)
class ReactionBlob:
    lane: int
    mean_rgb: np.ndarray
    max_diff: float
    size: int
    bbox: Rect


@dataclass
class Fingerprint:
    lane_colors: np.ndarray             # (n_lanes, 3)
    drug: str | None = None

    @property
    def flattened(self) -> np.ndarray:
        return self.lane_colors.reshape(-1)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "lanes": [[round(float(c), 3) for c in lane]
                      for lane in self.lane_colors],
            **({"drug": self.drug} if self.drug else {}),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Fingerprint":
        return cls(lane_colors=np.array(obj["lanes"], dtype=np.float64),
                   drug=obj.get("drug"))


def max_diff(mean_rgb) -> float:
    """Largest absolute difference between any two mean channel values."""
    r, g, b = (float(c) for c in mean_rgb)
    return max(abs(r - g), abs(g - b), abs(b - r))


def seed_regions(crop: np.ndarray, lane_rect: Rect) -> list[tuple[int, int]]:
    """Centroids of five equal-height bands of the lane area."""
    if lane_rect.h < 5:
        raise ValueError(f"lane height {lane_rect.h} < 5")
    if (lane_rect.x < 0 or lane_rect.y < 0
            or lane_rect.x1 > crop.shape[1] or lane_rect.y1 > crop.shape[0]):
        raise ValueError("lane rectangle leaves the crop")
    cx = lane_rect.x + lane_rect.w // 2
    return [(cx, lane_rect.y + int((2 * i + 1) * lane_rect.h / 10))
            for i in range(5)]


@njit(cache=True)
def _grow_mask(rgb, seed_y, seed_x, tau):
    h, w = rgb.shape[0], rgb.shape[1]
    mask = np.zeros((h, w), np.uint8)
    qy = np.empty(h * w, np.int32)
    qx = np.empty(h * w, np.int32)
    head, tail = 0, 1
    qy[0], qx[0] = seed_y, seed_x
    mask[seed_y, seed_x] = 1
    sr = float(rgb[seed_y, seed_x, 0])
    sg = float(rgb[seed_y, seed_x, 1])
    sb = float(rgb[seed_y, seed_x, 2])
    count = 1.0
    tau2 = tau * tau
    while head < tail:
        y, x = qy[head], qx[head]
        head += 1
        for k in range(4):
            ny = y + (1 if k == 0 else -1 if k == 1 else 0)
            nx = x + (1 if k == 2 else -1 if k == 3 else 0)
            if ny < 0 or ny >= h or nx < 0 or nx >= w or mask[ny, nx]:
                continue
            dr = rgb[ny, nx, 0] - sr / count
            dg = rgb[ny, nx, 1] - sg / count
            db = rgb[ny, nx, 2] - sb / count
            if dr * dr + dg * dg + db * db <= tau2:
                mask[ny, nx] = 1
                qy[tail], qx[tail] = ny, nx
                tail += 1
                sr += rgb[ny, nx, 0]
                sg += rgb[ny, nx, 1]
                sb += rgb[ny, nx, 2]
                count += 1.0
    return mask


def _region_from_mask(lane: int, mask: np.ndarray,
                      lane_img: np.ndarray) -> Region:
    ys, xs = np.nonzero(mask)
    mean = lane_img[mask].mean(axis=0)
    bbox = Rect(int(xs.min()), int(ys.min()),
                int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return Region(lane=lane, mask=mask, mean_rgb=mean,
                  size=int(mask.sum()), bbox=bbox, image=lane_img)


def grow_region(crop: np.ndarray, lane_rect: Rect, seed: tuple[int, int],
                tau: float = DEFAULT_TAU, lane: int = 0) -> Region:
    """Grow a 4-connected region from a seed by distance to the running mean."""
    sx, sy = seed
    if not (lane_rect.x <= sx < lane_rect.x1 and lane_rect.y <= sy < lane_rect.y1):
        raise ValueError("seed outside lane rectangle")
    lane_img = crop[lane_rect.y:lane_rect.y1,
                    lane_rect.x:lane_rect.x1].astype(np.float64)
    mask = _grow_mask(lane_img.astype(np.float32),
                      sy - lane_rect.y, sx - lane_rect.x, float(tau)) \
        .astype(bool)
    return _region_from_mask(lane, mask, lane_img)


def merge_overlapping(regions: list[Region]) -> list[Region]:
    """Merge region pairs whose overlap exceeds 0.35x the bigger region."""
    regions = list(regions)
    while True:
        pairs = [(i, j) for i in range(len(regions))
                 for j in range(i + 1, len(regions))]
        pairs.sort(key=lambda ij: -(regions[ij[0]].size + regions[ij[1]].size))
        merged = None
        for i, j in pairs:
            a, b = regions[i], regions[j]
            overlap = int((a.mask & b.mask).sum())
            if overlap > MERGE_FRACTION * max(a.size, b.size):
                union = a.mask | b.mask
                merged = (i, j, _region_from_mask(a.lane, union, a.image))
                break
        if merged is None:
            return regions
        i, j, region = merged
        regions = [r for k, r in enumerate(regions) if k not in (i, j)]
        regions.append(region)


def select_reaction_blob(regions: list[Region]) -> ReactionBlob:
    """Keep the region with the most chromatic mean color.

    Ties go to the larger region, then to the one whose bounding box starts
    higher in the lane.
    """
    if not regions:
        raise ValueError("no regions to select from")
    best = max(regions, key=lambda r: (max_diff(r.mean_rgb), r.size, -r.bbox.y))
    return ReactionBlob(lane=best.lane, mean_rgb=best.mean_rgb.copy(),
                        max_diff=max_diff(best.mean_rgb), size=best.size,
                        bbox=best.bbox)


def extract_lane_blob(crop: np.ndarray, lane_rect: Rect, lane: int,
                      tau: float = DEFAULT_TAU) -> ReactionBlob:
    seeds = seed_regions(crop, lane_rect)
    grown = [grow_region(crop, lane_rect, s, tau, lane) for s in seeds]
    return select_reaction_blob(merge_overlapping(grown))


def extract_fingerprint(crop: np.ndarray, layout: CardLayout,
                        tau: float = DEFAULT_TAU,
                        drop_timer: bool = False,
                        drug: str | None = None) -> Fingerprint:
    """Mean reaction-blob RGB per active lane, in lane order."""
    if crop.shape[0] != layout.crop_window.h or crop.shape[1] != layout.crop_window.w:
        raise ValueError(
            f"crop shape {crop.shape[:2]} does not match layout "
            f"{(layout.crop_window.h, layout.crop_window.w)}")
    colors = []
    for lane, rect in enumerate(layout.lane_rects):
        if drop_timer and layout.lane_count == 12 and lane == 0:
            continue
        blob = extract_lane_blob(crop, rect, lane, tau)
        colors.append(blob.mean_rgb)
    return Fingerprint(lane_colors=np.array(colors), drug=drug)
