"""Card geometry, raster helpers, color conversion and shared numerics.

All card constants (canonical size, crop window, lane rectangles, fiducial
positions) live here so that the generator and the analysis side agree on a
single set of coordinates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# Errors

class PadError(Exception):
    """Base class for pipeline errors."""


class NotEnoughFiducials(PadError):
    """Fewer than four usable reference points were found in the image."""


class DegenerateFiducials(PadError):
    """The fiducial configuration does not determine a homography."""


class WaxMarkNotFound(PadError):
    """Template matching could not locate a wax fiducial mark."""


class DecodeError(PadError):
    """An input image file could not be decoded."""


class ConfigError(PadError):
    """Invalid configuration value."""


# ---------------------------------------------------------------------------
# Card geometry

class Rect(NamedTuple):
    """Axis-aligned rectangle, inclusive origin, exclusive end."""
    x: int
    y: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    def contains(self, other: "Rect") -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def intersects(self, other: "Rect") -> bool:
        return not (other.x >= self.x1 or other.x1 <= self.x
                    or other.y >= self.y1 or other.y1 <= self.y)


CANONICAL_SIZE = (730, 1220)          # (width, height) of the rectified card
CROP_WINDOW = Rect(47, 560, 636, 490)  # salient region within the canonical card
SWIPE_LINE_Y = 1020                   # canonical row of the drug swipe band
SWIPE_BAND_H = 10

LANE_SLOTS = 12
LANE_SLOT_W = 51
LANE_GUTTER = 2
LANE_X0 = 1                           # crop-relative x of the first lane slot
LANE_PITCH = LANE_SLOT_W + LANE_GUTTER
LANE_TOP = 0                          # crop-relative top of the lane area
LANE_H = SWIPE_LINE_Y - CROP_WINDOW.y - LANE_TOP   # 460: lane area above swipe

# Large finder patterns at three card corners plus a small QR-style block in
# the remaining corner: up to six reference points in total.
FINDER_MODULE = 10
FINDER_CENTERS = ((660, 70), (70, 1150), (660, 1150))   # TR, BL, BR
QR_MODULE = 6
QR_FINDER_CENTERS = ((60, 60), (144, 60), (60, 144))    # block in the TL corner

WAX_FIDUCIALS = ((90, 520), (640, 520))
WAX_TEMPLATE_SIZE = 21

# Lane slots left empty on single-reagent cards (three groups of three lanes).
SPACER_SLOTS_9 = (3, 7, 11)


@dataclass(frozen=True)
class CardLayout:
    """Fixed geometry of one card variant.

    Lane rectangles are expressed in crop coordinates (origin at the top-left
    corner of the salient crop window).
    """
    lane_count: int
    canonical_size: tuple[int, int]
    crop_window: Rect
    lane_rects: tuple[Rect, ...]
    active_slots: tuple[int, ...]
    swipe_line_y: int
    finder_centers: tuple[tuple[int, int], ...]
    qr_finder_centers: tuple[tuple[int, int], ...]
    finder_module: int
    qr_module: int
    wax_fiducials: tuple[tuple[int, int], ...]
    wax_template_size: int

    @property
    def swipe_row_in_crop(self) -> int:
        return self.swipe_line_y - self.crop_window.y

    def reference_points(self) -> list[tuple[float, float]]:
        """All canonical reference point coordinates, QR block first."""
        return [(float(x), float(y)) for x, y in
                tuple(self.qr_finder_centers) + tuple(self.finder_centers)]


def _slot_rect(slot: int) -> Rect:
    return Rect(LANE_X0 + slot * LANE_PITCH, LANE_TOP, LANE_SLOT_W, LANE_H)


def canonical_layout(lane_count: int) -> CardLayout:
    """Return the fixed card layout for 12-lane panel or 9-lane cards."""
    if lane_count == 12:
        active = tuple(range(12))
    elif lane_count == 9:
        active = tuple(s for s in range(12) if s not in SPACER_SLOTS_9)
    else:
        raise ConfigError(f"lane_count must be 9 or 12, got {lane_count}")
    rects = tuple(_slot_rect(s) for s in active)
    layout = CardLayout(
        lane_count=lane_count,
        canonical_size=CANONICAL_SIZE,
        crop_window=CROP_WINDOW,
        lane_rects=rects,
        active_slots=active,
        swipe_line_y=SWIPE_LINE_Y,
        finder_centers=FINDER_CENTERS,
        qr_finder_centers=QR_FINDER_CENTERS,
        finder_module=FINDER_MODULE,
        qr_module=QR_MODULE,
        wax_fiducials=WAX_FIDUCIALS,
        wax_template_size=WAX_TEMPLATE_SIZE,
    )
    _check_layout(layout)
    return layout


def _check_layout(layout: CardLayout) -> None:
    w, h = layout.canonical_size
    crop = layout.crop_window
    if not Rect(0, 0, w, h).contains(crop):
        raise ConfigError("crop window leaves the canonical card")
    crop_local = Rect(0, 0, crop.w, crop.h)
    for i, r in enumerate(layout.lane_rects):
        if not crop_local.contains(r):
            raise ConfigError(f"lane {i} leaves the crop window")
        for r2 in layout.lane_rects[i + 1:]:
            if r.intersects(r2):
                raise ConfigError("lane rectangles overlap")


# ---------------------------------------------------------------------------
# Rasters

def validate_raster(image: np.ndarray) -> np.ndarray:
    """Check that an array is an 8-bit RGB raster and return it."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {arr.dtype}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("raster must be at least 1x1")
    return arr


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def save_png(path, image: np.ndarray) -> None:
    validate_raster(image)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luminance as float64 in [0, 255]."""
    arr = image.astype(np.float64)
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


# ---------------------------------------------------------------------------
# Color conversion (sRGB, D65 white point)

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65 = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float


def _srgb_linearize(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)


def rgb_image_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert an (..., 3) array of 8-bit RGB values to CIE L*a*b*."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    lin = _srgb_linearize(rgb)
    xyz = lin @ _SRGB_TO_XYZ.T
    f = _lab_f(xyz / _D65)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def rgb_to_lab(r: float, g: float, b: float) -> LabColor:
    for v in (r, g, b):
        if not 0 <= v <= 255:
            raise ValueError(f"channel value {v} outside [0, 255]")
    lab = rgb_image_to_lab(np.array([r, g, b]))
    return LabColor(float(lab[0]), float(lab[1]), float(lab[2]))


def lab_to_rgb(L: float, a: float, b: float) -> tuple[float, float, float]:
    """Inverse conversion, used for round-trip checks and color tables."""
    delta = 6.0 / 29.0
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    f = np.array([fx, fy, fz])
    t = np.where(f > delta, f ** 3, 3 * delta ** 2 * (f - 4.0 / 29.0))
    xyz = t * _D65
    lin = xyz @ np.linalg.inv(_SRGB_TO_XYZ).T
    srgb = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * np.clip(lin, 0, None) ** (1 / 2.4) - 0.055)
    out = np.clip(srgb, 0.0, 1.0) * 255.0
    return float(out[0]), float(out[1]), float(out[2])


# ---------------------------------------------------------------------------
# Homography warps

def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map an (n, 2) array of points through a 3x3 homography."""
    pts = np.asarray(points, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    q = np.hstack([pts, ones]) @ h.T
    return q[:, :2] / q[:, 2:3]


def warp_bilinear(image: np.ndarray, h: np.ndarray, out_size: tuple[int, int],
                  fill: Sequence[float] = (255, 255, 255)) -> np.ndarray:
    """Warp `image` so that output pixel p shows image at h(p).

    `h` maps output (canonical) coordinates to source coordinates.
    `out_size` is (width, height). Out-of-source samples take `fill`.
    """
    from scipy.ndimage import map_coordinates

    out_w, out_h = out_size
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float32),
                         np.arange(out_h, dtype=np.float32))
    denom = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    sx = (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / denom
    sy = (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / denom

    src = image.astype(np.float32)
    coords = np.stack([sy, sx])
    out = np.empty((out_h, out_w, src.shape[2]), dtype=np.float32)
    for c in range(src.shape[2]):
        map_coordinates(src[..., c], coords, output=out[..., c],
                        order=1, mode="constant", cval=fill[c])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_bilinear(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resize with bilinear sampling; `out_size` is (width, height)."""
    out_w, out_h = out_size
    hgt, wid = image.shape[:2]
    h = np.array([[wid / out_w, 0.0, 0.0],
                  [0.0, hgt / out_h, 0.0],
                  [0.0, 0.0, 1.0]])
    # sample at scaled pixel centers
    h[0, 2] = 0.5 * wid / out_w - 0.5
    h[1, 2] = 0.5 * hgt / out_h - 0.5
    if image.ndim == 2:
        warped = warp_bilinear(image[..., None].astype(np.uint8), h,
                               (out_w, out_h), fill=(0,))
        return warped[..., 0]
    return warp_bilinear(image, h, (out_w, out_h))


# ---------------------------------------------------------------------------
# Deterministic serialization helpers

_TENSOR_MAGIC = b"PADTENSOR1\n"


def digest_json(obj) -> str:
    """Stable SHA-256 digest of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def digest_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a byte-deterministic container: JSON header + raw array data."""
    header = {
        "meta": meta,
        "arrays": [
            {"name": name, "dtype": str(a.dtype), "shape": list(a.shape)}
            for name, a in arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a).tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(_TENSOR_MAGIC))
        if magic != _TENSOR_MAGIC:
            raise DecodeError(f"{path} is not a tensor container")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            dtype = np.dtype(spec["dtype"])
            data = f.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)
