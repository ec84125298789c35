"""Raw photo -> rectified card -> salient crop.

Finder patterns are located with a scanline search for the 1:1:3:1:1
dark/light module ratio, cross-checked on both axes. The perspective
transform is estimated from the matched reference points with a normalized
DLT and the lane alignment is refined by template matching on the two wax
fiducial marks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter

from . import core
from .core import (CardLayout, DegenerateFiducials, NotEnoughFiducials, Rect)


@dataclass(frozen=True)
class FiducialDetection:
    center: tuple[float, float]
    kind: str                   # "finder" | "corner_mark" | "wax"
    score: float
    module: float               # estimated module width in pixels


@dataclass
class RefineResult:
    image: np.ndarray
    found: bool
    offset: tuple[float, float]
    rotation_deg: float


# ---------------------------------------------------------------------------
# Finder pattern detection

_RATIO_TOL = 0.55        # run width tolerance relative to the module width
_MIN_MODULE = 2.0


def _binarize(image: np.ndarray) -> np.ndarray:
    gray = core.to_gray(image)
    local_mean = uniform_filter(gray, size=31, mode="nearest")
    return gray < local_mean - 5.0


def _scan_candidates(dark: np.ndarray) -> np.ndarray:
    """Find 1:1:3:1:1 run groups along rows; returns (center, line, module)."""
    out = []
    n_rows, n_cols = dark.shape
    for row in range(n_rows):
        line = dark[row]
        changes = np.flatnonzero(np.diff(line))
        if changes.size < 4:
            continue
        starts = np.concatenate(([0], changes + 1))
        ends = np.concatenate((changes + 1, [n_cols]))
        widths = (ends - starts).astype(np.float64)
        values = line[starts]
        if widths.size < 5:
            continue
        win = sliding_window_view(widths, 5)
        total = win.sum(axis=1)
        m = total / 7.0
        lo = (1 - _RATIO_TOL) * m
        hi = (1 + _RATIO_TOL) * m
        ok = (values[:win.shape[0]]
              & (m >= _MIN_MODULE)
              & (win[:, 0] >= lo) & (win[:, 0] <= hi)
              & (win[:, 1] >= lo) & (win[:, 1] <= hi)
              & (win[:, 3] >= lo) & (win[:, 3] <= hi)
              & (win[:, 2] >= 2.0 * m) & (win[:, 2] <= 4.0 * m)
              & (win[:, 4] >= lo) & (win[:, 4] <= hi))
        for i in np.flatnonzero(ok):
            out.append((starts[i] + total[i] / 2.0, float(row), m[i]))
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def _cluster(points: np.ndarray, radius: float) -> list[np.ndarray]:
    clusters: list[list[np.ndarray]] = []
    means: list[np.ndarray] = []
    for p in points:
        placed = False
        for i, mean in enumerate(means):
            if np.hypot(*(p[:2] - mean[:2])) <= radius * p[2]:
                clusters[i].append(p)
                means[i] = np.mean(clusters[i], axis=0)
                placed = True
                break
        if not placed:
            clusters.append([p])
            means.append(p.copy())
    return [np.array(c) for c in clusters]


def detect_finder_patterns(image: np.ndarray) -> list[FiducialDetection]:
    """Locate concentric-square reference marks; strongest first."""
    image = core.validate_raster(image)
    if image.shape[0] < 64 or image.shape[1] < 64:
        raise NotEnoughFiducials("image too small to carry finder patterns")
    dark = _binarize(image)
    horiz = _scan_candidates(dark)              # (x_center, y_row, module)
    vert = _scan_candidates(dark.T)             # (y_center, x_col, module)
    if horiz.shape[0] == 0 or vert.shape[0] == 0:
        raise NotEnoughFiducials("no finder pattern candidates")

    # pair each horizontal candidate with its best vertical counterpart
    hx, hy, hm = horiz[:, 0], horiz[:, 1], horiz[:, 2]
    vy, vx, vm = vert[:, 0], vert[:, 1], vert[:, 2]
    pts = []
    for i in range(horiz.shape[0]):
        dx = np.abs(vx - hx[i])
        dy = np.abs(vy - hy[i])
        ok = (dx <= 1.8 * hm[i]) & (dy <= 1.8 * hm[i]) & \
             (np.abs(vm - hm[i]) <= 0.6 * hm[i])
        if not ok.any():
            continue
        j = np.argmin(np.where(ok, dx + dy, np.inf))
        pts.append((hx[i], vy[j], 0.5 * (hm[i] + vm[j])))
    if not pts:
        raise NotEnoughFiducials("no cross-checked finder candidates")

    detections = []
    for cluster in _cluster(np.array(pts), radius=2.0):
        if cluster.shape[0] < 3:
            continue
        cx, cy, m = cluster.mean(axis=0)
        score = min(1.0, cluster.shape[0] / (3.0 * m))
        detections.append(FiducialDetection((cx, cy), "finder", score, m))
    detections.sort(key=lambda d: -d.score)
    detections = detections[:6]
    if len(detections) < 4:
        raise NotEnoughFiducials(
            f"only {len(detections)} finder patterns found")
    return detections


def match_reference_points(detections: list[FiducialDetection],
                           layout: CardLayout) -> list[tuple]:
    """Assign detections to canonical reference points.

    The card carries three large corner marks and a small QR-style block of
    three finder patterns in the fourth corner; the two scales are separated
    by the estimated module width.
    """
    modules = sorted(d.module for d in detections)
    gaps = [modules[i + 1] / modules[i] for i in range(len(modules) - 1)]
    if not gaps or max(gaps) < 1.25:
        raise NotEnoughFiducials("cannot separate finder pattern scales")
    split = modules[int(np.argmax(gaps))] * 1.01
    small = [d for d in detections if d.module <= split]
    large = [d for d in detections if d.module > split]
    if len(small) < 3 or len(large) < 3:
        raise NotEnoughFiducials(
            f"need 3 small + 3 large marks, got {len(small)}+{len(large)}")
    small = sorted(small, key=lambda d: -d.score)[:3]
    large = sorted(large, key=lambda d: -d.score)[:3]

    q = np.mean([d.center for d in small], axis=0)
    lp = np.array([d.center for d in large])
    far = int(np.argmax(np.hypot(*(lp - q).T)))
    br = lp[far]
    rest = [lp[i] for i in range(3) if i != far]
    crosses = [(p - q)[0] * (br - q)[1] - (p - q)[1] * (br - q)[0]
               for p in rest]
    if crosses[0] > 0:
        tr, bl = rest[0], rest[1]
    else:
        tr, bl = rest[1], rest[0]

    sp = np.array([d.center for d in small])
    best, best_cos = 0, np.inf
    for i in range(3):
        u = sp[(i + 1) % 3] - sp[i]
        v = sp[(i + 2) % 3] - sp[i]
        c = abs(np.dot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-12)
        if c < best_cos:
            best, best_cos = i, c
    corner = sp[best]
    others = [sp[(best + 1) % 3], sp[(best + 2) % 3]]
    ref = tr - corner
    dots = [np.dot(p - corner, ref) / (np.linalg.norm(p - corner) + 1e-12)
            for p in others]
    x_small, y_small = (others[0], others[1]) if dots[0] >= dots[1] else \
        (others[1], others[0])

    qc = layout.qr_finder_centers
    fc = layout.finder_centers
    pairs = [
        (qc[0], tuple(corner)),
        (qc[1], tuple(x_small)),
        (qc[2], tuple(y_small)),
        (fc[0], tuple(tr)),
        (fc[1], tuple(bl)),
        (fc[2], tuple(br)),
    ]
    return [(np.array(s, float), np.array(d, float)) for s, d in pairs]


# ---------------------------------------------------------------------------
# Homography estimation (normalized DLT)

def _normalizer(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / dist if dist > 1e-12 else 1.0
    return np.array([[s, 0, -s * centroid[0]],
                     [0, s, -s * centroid[1]],
                     [0, 0, 1]])


def _collinear(a, b, c, tol: float = 1e-6) -> bool:
    area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    scale = max(np.linalg.norm(b - a), np.linalg.norm(c - a), 1.0)
    return area < tol * scale * scale


def estimate_homography(correspondences) -> np.ndarray:
    """Least-squares DLT homography from >= 4 point pairs."""
    pairs = [(np.asarray(s, float), np.asarray(d, float))
             for s, d in correspondences]
    n = len(pairs)
    if n < 4:
        raise DegenerateFiducials(f"need at least 4 correspondences, got {n}")
    src = np.array([p[0] for p in pairs])
    dst = np.array([p[1] for p in pairs])
    if n == 4:
        for i in range(4):
            for j in range(i + 1, 4):
                for k in range(j + 1, 4):
                    if _collinear(src[i], src[j], src[k]):
                        raise DegenerateFiducials("3 source points collinear")

    ts = _normalizer(src)
    td = _normalizer(dst)
    sn = core.apply_homography(ts, src)
    dn = core.apply_homography(td, dst)

    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y = sn[i]
        u, v = dn[i]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, s, vt = np.linalg.svd(a)
    if s[0] > 0 and s[-2] / s[0] < 1e-10:
        raise DegenerateFiducials("rank-deficient correspondence system")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateFiducials("homography has vanishing scale")
    h = h / h[2, 2]
    det2 = h[0, 0] * h[1, 1] - h[0, 1] * h[1, 0]
    if abs(det2) < 1e-12:
        raise DegenerateFiducials("degenerate affine part")
    return h


def reprojection_error(h: np.ndarray, correspondences) -> float:
    src = np.array([np.asarray(s, float) for s, _ in correspondences])
    dst = np.array([np.asarray(d, float) for _, d in correspondences])
    proj = core.apply_homography(h, src)
    return float(np.sqrt(((proj - dst) ** 2).sum(axis=1)).mean())


# ---------------------------------------------------------------------------
# Warping, refinement, cropping

def warp_to_canonical(image: np.ndarray, h: np.ndarray,
                      layout: CardLayout) -> np.ndarray:
    """Resample the photo into the canonical card frame (730x1220)."""
    core.validate_raster(image)
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateFiducials("invalid homography")
    return core.warp_bilinear(image, h / h[2, 2], layout.canonical_size,
                              fill=(255, 255, 255))


def _ncc_match(gray: np.ndarray, template: np.ndarray,
               expected: tuple[int, int], window: int) -> tuple[float, float, float]:
    """Best normalized cross-correlation offset around an expected center."""
    th, tw = template.shape
    ex, ey = expected
    x0 = ex - tw // 2 - window
    y0 = ey - th // 2 - window
    x1 = x0 + tw + 2 * window
    y1 = y0 + th + 2 * window
    if x0 < 0 or y0 < 0 or y1 > gray.shape[0] + 0 or x1 > gray.shape[1]:
        raise ValueError("search window leaves the image")
    region = gray[y0:y1, x0:x1]
    windows = sliding_window_view(region, (th, tw))
    t = template - template.mean()
    tn = np.sqrt((t * t).sum())
    wmean = windows.mean(axis=(2, 3), keepdims=True)
    wc = windows - wmean
    wn = np.sqrt((wc * wc).sum(axis=(2, 3)))
    corr = np.einsum("ijkl,kl->ij", wc, t)
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(wn * tn > 1e-9, corr / (wn * tn), 0.0)
    peak = np.unravel_index(np.argmax(ncc), ncc.shape)
    cy = y0 + peak[0] + th // 2
    cx = x0 + peak[1] + tw // 2
    return float(cx), float(cy), float(ncc[peak])


def refine_lane_alignment(rectified: np.ndarray, layout: CardLayout,
                          window: int = 15,
                          min_score: float = 0.5) -> RefineResult:
    """Correct residual lane offset/rotation from the two wax marks."""
    w, h = layout.canonical_size
    if rectified.shape[1] != w or rectified.shape[0] != h:
        raise ValueError("refine expects a canonical-size raster")
    from .synth import wax_mark_template
    template = core.to_gray(wax_mark_template(layout))
    gray = core.to_gray(rectified)

    matched = []
    for expected in layout.wax_fiducials:
        cx, cy, score = _ncc_match(gray, template, expected, window)
        if score < min_score:
            return RefineResult(rectified, False, (0.0, 0.0), 0.0)
        matched.append((cx, cy))

    e = np.array(layout.wax_fiducials, dtype=np.float64)
    m = np.array(matched)
    ev = e[1] - e[0]
    mv = m[1] - m[0]
    theta = np.arctan2(ev[1], ev[0]) - np.arctan2(mv[1], mv[0])
    ec, mc = e.mean(axis=0), m.mean(axis=0)
    offset = tuple(ec - mc)

    # output pixel p samples the input at R(-theta)(p - ec) + mc
    cos, sin = np.cos(-theta), np.sin(-theta)
    hmat = np.array([
        [cos, -sin, mc[0] - cos * ec[0] + sin * ec[1]],
        [sin, cos, mc[1] - sin * ec[0] - cos * ec[1]],
        [0.0, 0.0, 1.0],
    ])
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float)
    displacement = np.abs(core.apply_homography(hmat, corners) - corners).max()
    if displacement < 0.05:
        return RefineResult(rectified, True, offset, float(np.rad2deg(theta)))
    corrected = core.warp_bilinear(rectified, hmat, (w, h), fill=(255, 255, 255))
    return RefineResult(corrected, True, offset, float(np.rad2deg(theta)))


def crop_salient(rectified: np.ndarray, layout: CardLayout) -> np.ndarray:
    """Extract the 636x490 salient region above the swipe area."""
    w, h = layout.canonical_size
    if rectified.shape[1] != w or rectified.shape[0] != h:
        raise ValueError("crop expects a canonical-size raster")
    r = layout.crop_window
    return rectified[r.y:r.y1, r.x:r.x1].copy()


@dataclass
class RectifyResult:
    crop: np.ndarray
    rectified: np.ndarray
    homography: np.ndarray               # canonical -> photo
    detections: list
    refine: RefineResult
    reprojection_error: float


def rectify_card(image: np.ndarray, layout: CardLayout,
                 refine: bool = True) -> RectifyResult:
    """Full rectification with intermediate artifacts."""
    detections = detect_finder_patterns(image)
    pairs = match_reference_points(detections, layout)
    h = estimate_homography(pairs)
    err = reprojection_error(h, pairs)
    rectified = warp_to_canonical(image, h, layout)
    if refine:
        refined = refine_lane_alignment(rectified, layout)
    else:
        refined = RefineResult(rectified, True, (0.0, 0.0), 0.0)
    crop = crop_salient(refined.image, layout)
    return RectifyResult(crop, refined.image, h, detections, refined, err)


def rectify_pipeline(image: np.ndarray, layout: CardLayout,
                     refine: bool = True) -> np.ndarray:
    """Photo in, 636x490 salient crop out."""
    return rectify_card(image, layout, refine=refine).crop
