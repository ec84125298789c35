"""Seeded synthetic card generator.

Renders cards with known drug labels, fiducial marks, reaction blobs and
photographic distortion, and records the ground truth needed by the tests
(true homography, blob masks and colors).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import core
from .core import CardLayout, Rect

DRUGS = (
    "acetaminophen", "acetylsalicylic-acid", "amodiaquine", "amoxicillin",
    "ampicillin", "artesunate", "azithromycin", "calcium-carbonate",
    "chloramphenicol", "chloroquine", "ciprofloxacin", "corn-starch",
    "di-water", "diethylcarbamazine", "dried-wheat-starch", "ethambutol",
    "isoniazid", "penicillin-g", "potato-starch", "primaquine", "quinine",
    "rifampicin", "streptomycin", "sulfadoxine", "talc", "tetracycline",
)
N_DRUGS = len(DRUGS)
N_REAGENTS = 24

WHITE = np.array([255.0, 255.0, 255.0])
CARD_BG = (245, 243, 238)
BACKDROP = (42, 40, 38)
INK = (25, 25, 30)
WAX_LINE = (190, 185, 178)
SWIPE_COLOR = (150, 130, 110)
WAX_MARK = (80, 80, 90)
TIMER_COLOR = (235, 150, 180)

# Concentration of the swiped drug in the three lane groups of a
# single-reagent card (light, medium, heavy).
GROUP_CONCENTRATIONS = (0.4, 0.7, 1.0)


def max_diff_of(color) -> float:
    r, g, b = (float(c) for c in color)
    return max(abs(r - g), abs(g - b), abs(b - r))


# ---------------------------------------------------------------------------
# Color models

@dataclass(frozen=True)
class ReactionColorModel:
    """Colors produced by each drug in each lane (or with each reagent).

    `table[d, j]` is the base RGB of drug d's reaction in lane/reagent j.
    For panel cards j indexes the 12 lanes (lane 0 = timer); for
    single-reagent cards j indexes the 24 candidate reagents.
    """
    table: np.ndarray
    jitter_sigma: float = 6.0
    blob_ax_range: tuple[float, float] = (14.0, 20.0)
    blob_ay_range: tuple[float, float] = (20.0, 32.0)
    blob_y_range: tuple[float, float] = (60.0, 380.0)
    residual_blob_rate: float = 0.5
    residual_margin: float = 20.0
    timer_slot: int | None = 0

    @property
    def n_drugs(self) -> int:
        return self.table.shape[0]


def _hsv_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h, s, v)) * 255.0


_GROUP_VALUE_LEVELS = ((0.85, 0.60), (0.70, 0.50), (0.60, 0.42))


def _palette12(level: int = 0, hue_shift: float = 0.0) -> np.ndarray:
    """Twelve saturated, well separated reaction colors."""
    v_hi, v_lo = _GROUP_VALUE_LEVELS[level]
    colors = []
    for i in range(12):
        hue = (i / 12.0 + hue_shift) % 1.0
        val = v_hi if i % 2 == 0 else v_lo
        colors.append(_hsv_rgb(hue, 0.90, val))
    return np.array(colors)


def panel_color_model(seed: int = 0) -> ReactionColorModel:
    """Color table for the 12-lane panel cards.

    Drugs are grouped in threes; members of a group share the same multiset
    of lane colors in different lane arrangements, so that group members can
    only be told apart reliably by where the colors sit, not by which colors
    occur. Each group draws from its own palette (distinct hue offset and
    brightness pattern), so color statistics alone identify the group.
    """
    rng = np.random.default_rng(seed)
    table = np.zeros((N_DRUGS, 12, 3))
    d = 0
    g = 0
    while d < N_DRUGS:
        group = min(3, N_DRUGS - d)
        palette = _palette12(level=g % 3, hue_shift=(g // 3) / 36.0)
        _check_separation(palette)
        chosen = rng.permutation(12)[:11]
        colors = palette[chosen]
        for member in range(group):
            table[d + member, 0] = TIMER_COLOR
            table[d + member, 1:] = np.roll(colors, -4 * member, axis=0)
        d += group
        g += 1
    return ReactionColorModel(table=table)


def single_reagent_color_model(seed: int = 0) -> ReactionColorModel:
    """Base reaction colors for every (drug, candidate reagent) pair."""
    rng = np.random.default_rng(seed)
    table = np.zeros((N_DRUGS, N_REAGENTS, 3))
    for d in range(N_DRUGS):
        for r in range(N_REAGENTS):
            while True:
                c = _hsv_rgb(rng.uniform(), rng.uniform(0.6, 0.95),
                             rng.uniform(0.45, 0.85))
                if max_diff_of(c) >= 60.0:
                    break
            table[d, r] = c
    return ReactionColorModel(table=table, timer_slot=None)


def _check_separation(palette: np.ndarray, min_dist: float = 50.0) -> None:
    for i in range(len(palette)):
        if max_diff_of(palette[i]) < 60.0:
            raise core.ConfigError("palette color insufficiently chromatic")
        for j in range(i + 1, len(palette)):
            if np.linalg.norm(palette[i] - palette[j]) < min_dist:
                raise core.ConfigError("palette colors too close")


def single_card_lane_colors(model: ReactionColorModel, drug: int,
                            reagent: int) -> np.ndarray:
    """Base colors of the 9 active lanes of a single-reagent card."""
    base = model.table[drug, reagent]
    out = np.zeros((9, 3))
    for lane in range(9):
        conc = GROUP_CONCENTRATIONS[lane // 3]
        out[lane] = WHITE + conc * (base - WHITE)
    return out


# ---------------------------------------------------------------------------
# Distortion

@dataclass(frozen=True)
class DistortionParams:
    corner_jitter_px: float = 40.0
    rotation_deg: float = 10.0
    scale: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 5.0
    background: tuple[int, int, int] = CARD_BG

    def __post_init__(self):
        if self.corner_jitter_px < 0 or self.rotation_deg < 0 or self.noise_sigma < 0:
            raise core.ConfigError("distortion ranges must be nonnegative")
        if min(self.scale) <= 0:
            raise core.ConfigError("scale range must exclude 0")

    @property
    def is_identity(self) -> bool:
        return (self.corner_jitter_px == 0 and self.rotation_deg == 0
                and self.scale == (1.0, 1.0) and self.noise_sigma == 0)


IDENTITY_DISTORTION = DistortionParams(
    corner_jitter_px=0.0, rotation_deg=0.0, scale=(1.0, 1.0), noise_sigma=0.0)


# ---------------------------------------------------------------------------
# Drawing primitives (canonical frame)

def _draw_rect(img: np.ndarray, x: int, y: int, w: int, h: int, color) -> None:
    img[max(y, 0):y + h, max(x, 0):x + w] = color


def _draw_finder(img: np.ndarray, cx: int, cy: int, module: int) -> None:
    for half, color in ((7 * module // 2, INK),
                        (5 * module // 2, (255, 255, 255)),
                        (3 * module // 2, INK)):
        _draw_rect(img, cx - half, cy - half, 2 * half, 2 * half, color)


def _draw_wax_mark(img: np.ndarray, cx: int, cy: int, size: int) -> None:
    arm = size // 2
    thick = 2
    _draw_rect(img, cx - arm, cy - thick, 2 * arm + 1, 2 * thick + 1, WAX_MARK)
    _draw_rect(img, cx - thick, cy - arm, 2 * thick + 1, 2 * arm + 1, WAX_MARK)


def wax_mark_template(layout: CardLayout) -> np.ndarray:
    """The wax fiducial mark as drawn by the renderer, on card background."""
    size = layout.wax_template_size
    patch = np.full((size, size, 3), CARD_BG, dtype=np.uint8)
    _draw_wax_mark(patch, size // 2, size // 2, size - 4)
    return patch


@dataclass
class LaneTruth:
    lane: int
    center_crop: tuple[float, float]      # blob center in crop coordinates
    color: np.ndarray                     # drawn reaction color (pre-noise)
    base_color: np.ndarray
    residual_colors: list
    mask: np.ndarray | None               # lane-local boolean mask


@dataclass
class GroundTruth:
    homography: np.ndarray                # canonical -> photo
    lanes: list
    drug_index: int
    lane_offset: tuple[float, float] = (0.0, 0.0)
    lane_rotation_deg: float = 0.0


def _blob_mask(rect: Rect, cx: float, cy: float, ax: float, ay: float,
               wobble: np.ndarray) -> np.ndarray:
    """Rasterize an irregular ellipse inside a lane rectangle (crop coords)."""
    ys, xs = np.mgrid[rect.y:rect.y1, rect.x:rect.x1]
    dx = (xs - cx) / ax
    dy = (ys - cy) / ay
    rho = np.sqrt(dx * dx + dy * dy)
    phi = np.arctan2(dy, dx)
    bound = 1.0
    for k, (amp, phase) in enumerate(wobble, start=2):
        bound = bound + amp * np.cos(k * phi + phase)
    return rho <= bound


def _color_signature(color) -> int:
    """Small integer characterizing a reagent color (not the jittered pixel)."""
    r, g, b = (int(round(float(c))) for c in color)
    return (r * 3 + g * 5 + b * 7) // 8


def _sample_blob_geometry(model: ReactionColorModel, rect: Rect,
                          rng: np.random.Generator,
                          ax_range=None, ay_range=None,
                          band: int | None = None,
                          size_scale: float = 1.0):
    ax = size_scale * rng.uniform(*(ax_range or model.blob_ax_range))
    ay = size_scale * rng.uniform(*(ay_range or model.blob_ay_range))
    y_lo = max(model.blob_y_range[0], ay + 2)
    y_hi = min(model.blob_y_range[1], rect.h - ay - 2)
    cx = rect.x + rect.w / 2.0 + rng.uniform(-4, 4)
    if band is not None:
        # reaction blobs develop near one of the five analysis bands so a
        # band centroid always falls inside the blob
        center = (2 * band + 1) * rect.h / 10.0
        cy = rect.y + float(np.clip(center + rng.uniform(-8, 8),
                                    ay + 2, rect.h - ay - 2))
    else:
        cy = rect.y + rng.uniform(y_lo, y_hi)
    wobble = [(rng.uniform(0, 0.08), rng.uniform(0, 2 * np.pi)) for _ in (2, 3)]
    return cx, cy, ax, ay, np.array(wobble)


def _paint_lane_blobs(card: np.ndarray, layout: CardLayout, lane: int,
                      base_color: np.ndarray, model: ReactionColorModel,
                      rng: np.random.Generator, keep_mask: bool) -> LaneTruth:
    rect = layout.lane_rects[lane]
    crop = layout.crop_window
    # where the reaction develops, and how large the stain grows, is a
    # property of the chemistry: tie both to the reagent color so the same
    # reagent always produces the same blob geometry
    sig = _color_signature(base_color)
    cx, cy, ax, ay, wobble = _sample_blob_geometry(
        model, rect, rng, band=int(sig % 5),
        size_scale=0.8 + 0.4 * ((sig // 5) % 5) / 4.0)
    mask = _blob_mask(rect, cx, cy, ax, ay, wobble)
    color = np.clip(np.rint(base_color + rng.normal(0, model.jitter_sigma, 3)),
                    0, 255)
    view = card[crop.y + rect.y:crop.y + rect.y1, crop.x + rect.x:crop.x + rect.x1]
    view[mask] = color

    # fainter residual blobs, well below the reaction blob's chroma
    residuals = []
    md = max_diff_of(color)
    t_max = (md - model.residual_margin - 3.0) / md if md > 0 else 0.0
    if t_max >= 0.15:
        for _ in range(2):
            if rng.random() >= model.residual_blob_rate:
                continue
            for _attempt in range(20):
                rcx, rcy, rax, ray, rwob = _sample_blob_geometry(
                    model, rect, rng, ax_range=(8, 14), ay_range=(10, 18))
                if abs(rcy - cy) > ay + ray + 6:
                    break
            else:
                continue
            t = rng.uniform(0.15, t_max)
            rcolor = np.clip(np.rint(WHITE + t * (color - WHITE)), 0, 255)
            rmask = _blob_mask(rect, rcx, rcy, rax, ray, rwob)
            rmask &= ~mask
            view[rmask] = rcolor
            residuals.append(rcolor)

    return LaneTruth(
        lane=lane,
        center_crop=(cx, cy),
        color=color,
        base_color=np.array(base_color, dtype=float),
        residual_colors=residuals,
        mask=mask if keep_mask else None,
    )


def draw_canonical_card(drug_index: int, layout: CardLayout,
                        model: ReactionColorModel, rng: np.random.Generator,
                        lane_offset: tuple[float, float] = (0.0, 0.0),
                        lane_rotation_deg: float = 0.0,
                        keep_masks: bool = False) -> tuple[np.ndarray, list]:
    """Render the un-warped card and return it with per-lane ground truth."""
    w, h = layout.canonical_size
    card = np.full((h, w, 3), CARD_BG, dtype=np.uint8)

    # ink layer: corner finder patterns + small QR-style block
    for cx, cy in layout.finder_centers:
        _draw_finder(card, cx, cy, layout.finder_module)
    for cx, cy in layout.qr_finder_centers:
        _draw_finder(card, cx, cy, layout.qr_module)

    # wax layer + blobs, drawn into their own layer so a printing offset can
    # be simulated; all wax/blob colors are nonzero, so layer.any() recovers
    # the stamped mask
    offset = (lane_offset != (0.0, 0.0)) or (lane_rotation_deg != 0.0)
    layer = card if not offset else np.zeros_like(card)

    crop = layout.crop_window
    for slot in range(core.LANE_SLOTS + 1):
        x = crop.x + core.LANE_X0 + slot * core.LANE_PITCH - core.LANE_GUTTER
        _draw_rect(layer, x, crop.y, core.LANE_GUTTER, core.LANE_H + 40, WAX_LINE)
    _draw_rect(layer, crop.x, layout.swipe_line_y,
               crop.w, core.SWIPE_BAND_H, SWIPE_COLOR)
    for cx, cy in layout.wax_fiducials:
        _draw_wax_mark(layer, cx, cy, layout.wax_template_size - 4)

    lane_truths = []
    for i in range(len(layout.lane_rects)):
        base = model.table[drug_index, i]
        truth = _paint_lane_blobs(layer, layout, i, base, model, rng, keep_masks)
        lane_truths.append(truth)

    if offset:
        layer_mask = layer.any(axis=2)
        theta = np.deg2rad(lane_rotation_deg)
        cx0, cy0 = w / 2.0, h / 2.0
        cos, sin = np.cos(theta), np.sin(theta)
        # maps output pixel back to layer coordinates (inverse rigid motion)
        dx, dy = lane_offset
        hmat = np.array([
            [cos, sin, cx0 - cos * (cx0 + dx) - sin * (cy0 + dy)],
            [-sin, cos, cy0 + sin * (cx0 + dx) - cos * (cy0 + dy)],
            [0.0, 0.0, 1.0],
        ])
        hinv = np.linalg.inv(hmat)
        warped = core.warp_bilinear(layer, hinv, (w, h), fill=(0, 0, 0))
        alpha = core.warp_bilinear(
            (layer_mask[..., None] * np.uint8(255)).astype(np.uint8),
            hinv, (w, h), fill=(0,))[..., 0] / 255.0
        card = np.clip(np.rint(card * (1 - alpha[..., None])
                               + warped * alpha[..., None]), 0, 255).astype(np.uint8)
    return card, lane_truths


# ---------------------------------------------------------------------------
# Photographic warp

_CANONICAL_QUAD = None


def _canonical_corners(layout: CardLayout) -> np.ndarray:
    w, h = layout.canonical_size
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def render_card(drug, layout: CardLayout, color_model: ReactionColorModel,
                distortion: DistortionParams, seed: int,
                lane_offset: tuple[float, float] = (0.0, 0.0),
                lane_rotation_deg: float = 0.0,
                keep_masks: bool = False) -> tuple[np.ndarray, GroundTruth]:
    """Render one distorted card photo. Deterministic for a fixed seed."""
    if isinstance(drug, str):
        if drug not in DRUGS:
            raise core.ConfigError(f"unknown drug label {drug!r}")
        drug_index = DRUGS.index(drug)
    else:
        drug_index = int(drug)
        if not 0 <= drug_index < color_model.n_drugs:
            raise core.ConfigError(f"drug index {drug_index} out of range")

    rng = np.random.default_rng(seed)
    card, lane_truths = draw_canonical_card(
        drug_index, layout, color_model, rng,
        lane_offset=lane_offset, lane_rotation_deg=lane_rotation_deg,
        keep_masks=keep_masks)

    if distortion.is_identity:
        truth = GroundTruth(np.eye(3), lane_truths, drug_index,
                            lane_offset, lane_rotation_deg)
        return card, truth

    from .rectify import estimate_homography  # cycle-free: rectify imports core only

    theta = np.deg2rad(rng.uniform(-distortion.rotation_deg,
                                   distortion.rotation_deg))
    scale = rng.uniform(*distortion.scale)
    corners = _canonical_corners(layout)
    center = corners.mean(axis=0)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    target = (corners - center) @ (scale * rot).T + center
    target += rng.uniform(-distortion.corner_jitter_px,
                          distortion.corner_jitter_px, (4, 2))
    margin = 20.0
    target -= target.min(axis=0) - margin
    canvas_w = int(np.ceil(target[:, 0].max() + margin))
    canvas_h = int(np.ceil(target[:, 1].max() + margin))

    hmat = estimate_homography(list(zip(corners, target)))
    photo = core.warp_bilinear(card, np.linalg.inv(hmat),
                               (canvas_w, canvas_h), fill=BACKDROP)
    if distortion.noise_sigma > 0:
        noise = rng.normal(0, distortion.noise_sigma, photo.shape)
        photo = np.clip(np.rint(photo.astype(np.float64) + noise),
                        0, 255).astype(np.uint8)
    truth = GroundTruth(hmat, lane_truths, drug_index,
                        lane_offset, lane_rotation_deg)
    return photo, truth


def crop_with_truth(photo: np.ndarray, truth: GroundTruth,
                    layout: CardLayout) -> np.ndarray:
    """Salient crop obtained with the generator's own homography."""
    rect = layout.crop_window
    w, h = layout.canonical_size
    canonical = core.warp_bilinear(photo, truth.homography, (w, h))
    return canonical[rect.y:rect.y1, rect.x:rect.x1]


# ---------------------------------------------------------------------------
# Lane permutation

def permute_lanes(crop: np.ndarray, layout: CardLayout,
                  permutation) -> np.ndarray:
    """Reorder lane contents; output lane i shows input lane permutation[i]."""
    perm = list(permutation)
    n = len(layout.lane_rects)
    if sorted(perm) != list(range(n)):
        raise ValueError(f"permutation must be a bijection on 0..{n - 1}")
    out = crop.copy()
    for i, src in enumerate(perm):
        dst_rect = layout.lane_rects[i]
        src_rect = layout.lane_rects[src]
        out[dst_rect.y:dst_rect.y1, dst_rect.x:dst_rect.x1] = \
            crop[src_rect.y:src_rect.y1, src_rect.x:src_rect.x1]
    return out


# ---------------------------------------------------------------------------
# Fingerprint record synthesis (bypasses the image pipeline)

def synthesize_fingerprint_records(model: ReactionColorModel,
                                   replicates: int = 3,
                                   seed: int = 0) -> dict:
    """Replicate 9-lane fingerprints for every (drug, reagent) pair."""
    rng = np.random.default_rng(seed)
    records = {}
    for d in range(model.n_drugs):
        for r in range(model.table.shape[1]):
            base = single_card_lane_colors(model, d, r)
            reps = []
            for _ in range(replicates):
                fp = np.clip(base + rng.normal(0, model.jitter_sigma, base.shape),
                             0, 255)
                reps.append(fp)
            records[(d, r)] = reps
    return records


def synthesize_panel_fingerprints(model: ReactionColorModel,
                                  replicates: int = 5,
                                  seed: int = 0) -> dict:
    """Replicate 12-lane fingerprints per drug from the panel color table."""
    rng = np.random.default_rng(seed)
    out = {}
    for d in range(model.n_drugs):
        base = model.table[d]
        out[d] = [np.clip(base + rng.normal(0, model.jitter_sigma, base.shape),
                          0, 255) for _ in range(replicates)]
    return out


# ---------------------------------------------------------------------------
# Dataset generation

@dataclass(frozen=True)
class DatasetConfig:
    out_dir: str
    drugs: tuple[str, ...] = DRUGS
    images_per_drug: int = 30
    layout: int = 12
    folds: int = 3
    distortion: DistortionParams = field(default_factory=DistortionParams)
    color_seed: int = 0
    rectifier: str = "pipeline"           # "pipeline" or "oracle"

    def to_json(self) -> dict:
        return {
            "drugs": list(self.drugs),
            "images_per_drug": self.images_per_drug,
            "layout": self.layout,
            "folds": self.folds,
            "distortion": {
                "corner_jitter_px": self.distortion.corner_jitter_px,
                "rotation_deg": self.distortion.rotation_deg,
                "scale": list(self.distortion.scale),
                "noise_sigma": self.distortion.noise_sigma,
                "background": list(self.distortion.background),
            },
            "color_seed": self.color_seed,
            "rectifier": self.rectifier,
        }


def dataset_config_from_json(obj: dict, out_dir: str) -> DatasetConfig:
    dist = obj.get("distortion", {})
    return DatasetConfig(
        out_dir=out_dir,
        drugs=tuple(obj.get("drugs", DRUGS)),
        images_per_drug=int(obj.get("images_per_drug", 30)),
        layout=int(obj.get("layout", 12)),
        folds=int(obj.get("folds", 3)),
        distortion=DistortionParams(
            corner_jitter_px=float(dist.get("corner_jitter_px", 40.0)),
            rotation_deg=float(dist.get("rotation_deg", 10.0)),
            scale=tuple(dist.get("scale", (0.8, 1.2))),
            noise_sigma=float(dist.get("noise_sigma", 5.0)),
            background=tuple(dist.get("background", CARD_BG)),
        ),
        color_seed=int(obj.get("color_seed", 0)),
        rectifier=str(obj.get("rectifier", "pipeline")),
    )


def _entry_seed(base_seed: int, drug_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([base_seed, drug_index, rep])
               .generate_state(1)[0])


def generate_dataset(config: DatasetConfig, seed: int) -> dict:
    """Render the dataset to disk and return the manifest (also written)."""
    from .rectify import rectify_pipeline

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layout = core.canonical_layout(config.layout)
    model = panel_color_model(config.color_seed)
    if config.layout == 9:
        # 9 informative lanes, no timer slot
        model = replace(model, table=model.table[:, 1:10], timer_slot=None)

    fold_rng = np.random.default_rng(seed)
    entries = []
    rectify_failures = 0
    for d, drug in enumerate(config.drugs):
        drug_index = DRUGS.index(drug)
        order = fold_rng.permutation(config.images_per_drug)
        per_fold = max(1, config.images_per_drug // config.folds)
        fold_of = {}
        for rep_pos, rep in enumerate(order):
            fold_of[int(rep)] = min(rep_pos // per_fold, config.folds - 1)
        for rep in range(config.images_per_drug):
            s = _entry_seed(seed, drug_index, rep)
            photo, truth = render_card(drug_index, layout, model,
                                       config.distortion, s)
            crop = None
            if config.rectifier == "pipeline" and not config.distortion.is_identity:
                try:
                    crop = rectify_pipeline(photo, layout)
                except core.PadError:
                    rectify_failures += 1
            if crop is None:
                crop = crop_with_truth(photo, truth, layout)
            name = f"{drug}_{rep:03d}.png"
            core.save_png(out_dir / name, crop)
            entries.append({
                "image_path": name,
                "drug_label": drug,
                "drug_index": d,
                "fold": fold_of[rep],
                "split": "test" if fold_of[rep] == 0 else "train",
                "seed": s,
            })

    manifest = {
        "version": 1,
        "layout": config.layout,
        "folds": config.folds,
        "seed": seed,
        "rectify_failures": rectify_failures,
        "config": config.to_json(),
        "config_digest": core.digest_json(config.to_json()),
        "entries": entries,
    }
    core.write_json(out_dir / "manifest.json", manifest)
    return manifest
