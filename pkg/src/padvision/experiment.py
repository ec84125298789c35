"""Dataset-level experiment orchestration: Table-style accuracy grids.

Given a dataset manifest, trains per-fold dictionaries on the training split
only, extracts the requested features with on-disk caching, runs the chosen
classifiers fold by fold, and writes a JSON report plus a plain-text table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, features, learn, synth

FEATURE_KINDS = ("lab", "gist", "colorbank", "dsift", "combined")
CLASSIFIERS = ("knn", "svm")
KIND_TAGS = {"lab": "lab90", "gist": "gist512", "colorbank": "colorbank420",
             "dsift": "dsift5376", "combined": "combined5796"}

MAX_DICT_SAMPLES = 100_000
DICT_MAX_ITER = 80


@dataclass(frozen=True)
class ExperimentConfig:
    manifest_path: str
    out_dir: str
    feature_kinds: tuple[str, ...] = ("lab", "combined")
    classifiers: tuple[str, ...] = ("knn", "svm")
    perturbation: str = "none"           # "none" or "lane_permutation"
    seed: int = 0
    grid_search: bool = True
    svm_c: float = 4.0                   # used when grid_search is off
    svm_gamma: float = 2.0 ** -8
    cache_dir: str | None = None         # defaults to out_dir/cache

    def __post_init__(self):
        for kind in self.feature_kinds:
            if kind not in FEATURE_KINDS:
                raise core.ConfigError(f"unknown feature kind {kind!r}")
        for clf in self.classifiers:
            if clf not in CLASSIFIERS:
                raise core.ConfigError(f"unknown classifier {clf!r}")
        if self.perturbation not in ("none", "lane_permutation"):
            raise core.ConfigError(
                f"unknown perturbation {self.perturbation!r}")

    def to_json(self) -> dict:
        return {
            "feature_kinds": list(self.feature_kinds),
            "classifiers": list(self.classifiers),
            "perturbation": self.perturbation,
            "seed": self.seed,
            "grid_search": self.grid_search,
            "svm_c": self.svm_c,
            "svm_gamma": self.svm_gamma,
        }


# ---------------------------------------------------------------------------
# Manifest access

@dataclass
class DatasetView:
    root: Path
    layout: "core.CardLayout"
    entries: list
    drugs: list
    folds: int

    @classmethod
    def open(cls, manifest_path) -> "DatasetView":
        manifest_path = Path(manifest_path)
        manifest = core.read_json(manifest_path)
        if manifest.get("version") != 1:
            raise core.DecodeError("unsupported manifest version")
        drugs = list(manifest["config"]["drugs"])
        return cls(root=manifest_path.parent,
                   layout=core.canonical_layout(int(manifest["layout"])),
                   entries=list(manifest["entries"]),
                   drugs=drugs,
                   folds=int(manifest["folds"]))

    def load_crop(self, entry: dict) -> np.ndarray:
        return core.load_png(self.root / entry["image_path"])

    def labels(self) -> np.ndarray:
        return np.array([e["drug_index"] for e in self.entries],
                        dtype=np.int64)

    def fold_of(self) -> np.ndarray:
        return np.array([e["fold"] for e in self.entries], dtype=np.int64)


def fold_permutation(layout: "core.CardLayout", seed: int, fold: int):
    """Non-identity lane permutation for one fold's test crops."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, fold, 0x9e37]))
    n = len(layout.lane_rects)
    perm = rng.permutation(n)
    while np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return [int(p) for p in perm]


# ---------------------------------------------------------------------------
# Feature cache

class FeatureCache:
    """On-disk cache keyed by (image digest, feature kind, dictionary digest)."""

    def __init__(self, cache_dir):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, image_digest: str, tag: str, dict_digest: str) -> Path:
        key = core.digest_bytes(
            f"{image_digest}|{tag}|{dict_digest}".encode())
        return self.dir / f"{key}.bin"

    def get(self, image_digest: str, tag: str,
            dict_digest: str = "") -> np.ndarray | None:
        path = self._path(image_digest, tag, dict_digest)
        if not path.exists():
            return None
        meta, arrays = core.load_arrays(path)
        return arrays["values"]

    def put(self, image_digest: str, tag: str, dict_digest: str,
            values: np.ndarray) -> None:
        path = self._path(image_digest, tag, dict_digest)
        core.save_arrays(path, {"kind": tag, "image": image_digest,
                                "dictionary": dict_digest},
                         {"values": values})


def _image_digest(crop: np.ndarray) -> str:
    return core.digest_bytes(np.ascontiguousarray(crop).tobytes())


# ---------------------------------------------------------------------------
# Dictionary training (train split only)

def _descriptor_sample(crop: np.ndarray, need_color: bool, need_sift: bool,
                       per_image: int, seed: int):
    """Seeded uniform subsample of an image's local descriptors."""
    rng = np.random.default_rng(seed)
    out = {}
    if need_color:
        patches = features.extract_patch_histograms(
            features.color_name_map(crop))
        take = min(per_image, patches.descriptors.shape[0])
        out["color"] = patches.descriptors[
            rng.choice(patches.descriptors.shape[0], take, replace=False)]
    if need_sift:
        dset = features.dense_sift_descriptors(crop)
        take = min(per_image, dset.descriptors.shape[0])
        out["sift"] = dset.descriptors[
            rng.choice(dset.descriptors.shape[0], take, replace=False)]
    return out


def train_fold_dictionaries(view: DatasetView, need_color: bool,
                            need_sift: bool, seed: int,
                            max_samples: int = MAX_DICT_SAMPLES) -> dict:
    """Per-fold color (k=20) and SIFT (k=256) dictionaries.

    Each fold's dictionaries see descriptors sampled from that fold's
    training images only.
    """
    if not (need_color or need_sift):
        return {}
    folds = view.fold_of()
    n_train = int((folds != 0).sum())
    per_image = max(1, int(np.ceil(max_samples / max(n_train, 1))))

    samples = []
    for i, entry in enumerate(view.entries):
        crop = view.load_crop(entry)
        samples.append(_descriptor_sample(
            crop, need_color, need_sift, per_image,
            seed=int(np.random.SeedSequence([seed, i, 0x5a17])
                     .generate_state(1)[0])))

    out = {}
    for fold in range(view.folds):
        train_idx = np.flatnonzero(folds != fold)
        fold_dicts = {}
        for name, k in (("color", 20), ("sift", 256)):
            if name not in samples[train_idx[0]]:
                continue
            pool = np.concatenate([samples[i][name] for i in train_idx])
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, fold, k]))
            if pool.shape[0] > max_samples:
                pool = pool[rng.choice(pool.shape[0], max_samples,
                                       replace=False)]
            fold_dicts[name] = features.kmeans(
                pool, k, seed=int(rng.integers(2 ** 31)),
                max_iter=DICT_MAX_ITER,
                source_digest=f"fold{fold}")
        out[fold] = fold_dicts
    return out


# ---------------------------------------------------------------------------
# Feature extraction

def _extract_features(crop: np.ndarray, kinds, dicts_by_fold: dict,
                      cache: FeatureCache) -> dict:
    """All requested feature vectors for one crop.

    Returns {tag: vector} for fold-independent kinds and
    {(tag, fold): vector} for dictionary-based kinds.
    """
    digest = _image_digest(crop)
    out = {}

    need = set(kinds)
    if "combined" in need:
        need.update(("colorbank", "dsift"))

    if "lab" in need:
        cached = cache.get(digest, "lab90")
        if cached is None:
            cached = features.lab_histogram(crop).values
            cache.put(digest, "lab90", "", cached)
        out["lab90"] = cached
    if "gist" in need:
        cached = cache.get(digest, "gist512")
        if cached is None:
            cached = features.gist(crop).values
            cache.put(digest, "gist512", "", cached)
        out["gist512"] = cached

    color_patches = sift_set = None
    for fold, dicts in dicts_by_fold.items():
        if "colorbank" in need:
            dd = dicts["color"].digest
            cached = cache.get(digest, "colorbank420", dd)
            if cached is None:
                if color_patches is None:
                    color_patches = features.extract_patch_histograms(
                        features.color_name_map(crop))
                codes = features.llc_encode(color_patches.descriptors,
                                            dicts["color"])
                cached = features.spatial_pyramid_max_pool(
                    codes, color_patches.positions,
                    (crop.shape[1], crop.shape[0]))
                cache.put(digest, "colorbank420", dd, cached)
            out[("colorbank420", fold)] = cached
        if "dsift" in need:
            dd = dicts["sift"].digest
            cached = cache.get(digest, "dsift5376", dd)
            if cached is None:
                if sift_set is None:
                    sift_set = features.dense_sift_descriptors(crop)
                codes = features.llc_encode(sift_set.descriptors,
                                            dicts["sift"])
                cached = features.spatial_pyramid_max_pool(
                    codes, sift_set.positions,
                    (crop.shape[1], crop.shape[0]))
                cache.put(digest, "dsift5376", dd, cached)
            out[("dsift5376", fold)] = cached
    return out


def _feature_matrix(per_image: list, kind: str, fold: int,
                    indices: np.ndarray) -> np.ndarray:
    tag = KIND_TAGS[kind]
    rows = []
    for i in indices:
        feats = per_image[i]
        if kind in ("lab", "gist"):
            rows.append(feats[tag])
        elif kind == "combined":
            rows.append(np.concatenate([feats[("colorbank420", fold)],
                                        feats[("dsift5376", fold)]]))
        else:
            rows.append(feats[(tag, fold)])
    return np.array(rows)


def extract_single(crop: np.ndarray, kind: str, dicts: dict) -> np.ndarray:
    """One feature vector for one crop; `dicts` maps color/sift names."""
    for name in dictionaries_for_kind(kind):
        if name not in dicts:
            raise core.ConfigError(
                f"feature kind {kind!r} needs the {name!r} dictionary")
    if kind == "lab":
        return features.lab_histogram(crop).values
    if kind == "gist":
        return features.gist(crop).values
    if kind == "colorbank":
        return features.color_bank(crop, dicts["color"]).values
    if kind == "dsift":
        return features.dense_sift_feature(crop, dicts["sift"]).values
    if kind == "combined":
        return features.combine(
            features.color_bank(crop, dicts["color"]),
            features.dense_sift_feature(crop, dicts["sift"])).values
    raise core.ConfigError(f"unknown feature kind {kind!r}")


def dictionaries_for_kind(kind: str) -> tuple[str, ...]:
    """Dictionary names a feature kind depends on."""
    return {"colorbank": ("color",), "dsift": ("sift",),
            "combined": ("color", "sift")}.get(kind, ())


# ---------------------------------------------------------------------------
# Experiment runner

def run_experiment(config: ExperimentConfig) -> dict:
    """Train/evaluate every (feature, classifier) cell over all folds."""
    view = DatasetView.open(config.manifest_path)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(config.cache_dir or out_dir / "cache")

    labels = view.labels()
    folds = view.fold_of()
    n_classes = len(view.drugs)

    need_color = bool({"colorbank", "combined"} & set(config.feature_kinds))
    need_sift = bool({"dsift", "combined"} & set(config.feature_kinds))
    dicts_by_fold = train_fold_dictionaries(view, need_color, need_sift,
                                            config.seed)

    permutations = {}
    if config.perturbation == "lane_permutation":
        permutations = {f: fold_permutation(view.layout, config.seed, f)
                        for f in range(view.folds)}

    per_image = []
    for i, entry in enumerate(view.entries):
        crop = view.load_crop(entry)
        if permutations:
            # only the fold where this image is a test item sees it permuted;
            # training always uses the canonical lane order
            test_fold = int(folds[i])
            permuted = synth.permute_lanes(crop, view.layout,
                                           permutations[test_fold])
            feats = _extract_features(crop, config.feature_kinds,
                                      dicts_by_fold, cache)
            pfeats = _extract_features(permuted, config.feature_kinds,
                                       {test_fold:
                                        dicts_by_fold.get(test_fold, {})}
                                       if dicts_by_fold else {},
                                       cache)
            feats["permuted"] = pfeats
            per_image.append(feats)
        else:
            per_image.append(_extract_features(crop, config.feature_kinds,
                                               dicts_by_fold, cache))

    cells = {}
    for kind in config.feature_kinds:
        for clf in config.classifiers:
            cells[(kind, clf)] = _run_cell(config, view, per_image, labels,
                                           folds, n_classes, kind, clf)

    report = _build_report(config, view, cells, n_classes)
    core.write_json(out_dir / "report.json", report)
    (out_dir / "report.txt").write_text(render_table(report))
    return report


def _run_cell(config: ExperimentConfig, view: DatasetView, per_image: list,
              labels: np.ndarray, folds: np.ndarray, n_classes: int,
              kind: str, clf: str) -> dict:
    fold_acc = []
    counts = np.zeros((n_classes, n_classes))
    confidence = np.zeros((n_classes, n_classes))
    chosen = []
    for fold in range(view.folds):
        tr = np.flatnonzero(folds != fold)
        te = np.flatnonzero(folds == fold)
        train_x = _feature_matrix(per_image, kind, fold, tr)
        if config.perturbation == "lane_permutation":
            test_x = _feature_matrix([per_image[i]["permuted"] for i in te],
                                     kind, fold, np.arange(te.size))
        else:
            test_x = _feature_matrix(per_image, kind, fold, te)
        train_y, test_y = labels[tr], labels[te]

        mean, std = learn.standardize_fit(train_x)
        xs = learn.standardize_apply(train_x, mean, std)
        xt = learn.standardize_apply(test_x, mean, std)

        if clf == "knn":
            pred, conf = learn.knn_predict(xs, train_y, xt, n_classes)
            params = {}
        else:
            if config.grid_search:
                grid = learn.cross_validate_hyperparams(
                    xs, train_y, n_classes, seed=config.seed + fold)
                c, gamma = grid.c, grid.gamma
            else:
                c, gamma = config.svm_c, config.svm_gamma
            model = learn.svm_train(xs, train_y, c, gamma, n_classes,
                                    seed=config.seed + fold)
            pred, conf = learn.svm_predict(model, xt)
            params = {"c": c, "gamma": gamma}
        acc, cm = learn.evaluate(test_y, pred, conf, n_classes)
        fold_acc.append(acc)
        counts += cm.counts
        confidence += cm.confidence
        chosen.append(params)

    confidence /= view.folds
    return {
        "fold_accuracy": [round(a, 6) for a in fold_acc],
        "mean_accuracy": round(float(np.mean(fold_acc)), 6),
        "hyperparams": chosen,
        "confusion_counts": counts.astype(int).tolist(),
        "confidence": [[round(float(v), 4) for v in row]
                       for row in confidence],
    }


def _build_report(config: ExperimentConfig, view: DatasetView, cells: dict,
                  n_classes: int) -> dict:
    return {
        "version": 1,
        "seed": config.seed,
        "config": config.to_json(),
        "config_digest": core.digest_json(config.to_json()),
        "n_classes": n_classes,
        "drugs": list(view.drugs),
        "folds": view.folds,
        "perturbation": config.perturbation,
        "cells": {f"{kind}+{clf}": cell
                  for (kind, clf), cell in sorted(cells.items())},
    }


def render_table(report: dict) -> str:
    """Plain-text accuracy table, features as rows, classifiers as columns."""
    cells = report["cells"]
    kinds, clfs = [], []
    for key in cells:
        kind, clf = key.split("+")
        if kind not in kinds:
            kinds.append(kind)
        if clf not in clfs:
            clfs.append(clf)
    kinds.sort()
    clfs.sort()
    width = 14
    lines = ["Mean top-1 accuracy over %d folds (perturbation: %s)"
             % (report["folds"], report["perturbation"]), ""]
    header = "feature".ljust(width) + "".join(c.rjust(width) for c in clfs)
    lines.append(header)
    lines.append("-" * len(header))
    for kind in kinds:
        row = kind.ljust(width)
        for clf in clfs:
            cell = cells.get(f"{kind}+{clf}")
            row += (("%.4f" % cell["mean_accuracy"]) if cell else "-"
                    ).rjust(width)
        lines.append(row)
    lines.append("")
    lines.append("config digest: %s  seed: %d"
                 % (report["config_digest"], report["seed"]))
    return "\n".join(lines) + "\n"
