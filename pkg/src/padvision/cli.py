"""Command-line interface: `pad` pipeline, training, and experiment driver."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import core, synth, rectify, blobs, reagentsel, features, learn
from . import experiment as exp


@click.group()
@click.option("--seed", default=0, show_default=True, help="Global RNG seed.")
@click.option("--jobs", default=os.cpu_count() or 1, show_default="cores",
              help="Worker processes for batch stages.")
@click.option("--layout", default="12", type=click.Choice(["9", "12"]),
              show_default=True, help="Card lane layout.")
@click.pass_context
def cli(ctx, seed, jobs, layout):
    """PAD card image analysis pipeline."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["jobs"] = jobs
    ctx.obj["layout"] = int(layout)


def _layout(ctx, override=None):
    return core.canonical_layout(int(override or ctx.obj["layout"]))


# ---------------------------------------------------------------------------
# Dataset synthesis

@cli.command("synth")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Generator config JSON; flags below override nothing in it.")
@click.option("--images-per-drug", default=30, show_default=True)
@click.option("--folds", default=3, show_default=True)
@click.option("--color-seed", default=0, show_default=True)
@click.option("--rectifier", default="pipeline", show_default=True,
              type=click.Choice(["pipeline", "oracle"]))
@click.pass_context
def synth_cmd(ctx, out_dir, config_path, images_per_drug, folds, color_seed,
              rectifier):
    """Render a synthetic card dataset and write its manifest."""
    if config_path:
        config = synth.dataset_config_from_json(
            core.read_json(config_path), out_dir)
    else:
        config = synth.DatasetConfig(
            out_dir=out_dir, images_per_drug=images_per_drug,
            layout=ctx.obj["layout"], folds=folds, color_seed=color_seed,
            rectifier=rectifier)
    manifest = synth.generate_dataset(config, seed=ctx.obj["seed"])
    click.echo(f"{len(manifest['entries'])} images -> {out_dir} "
               f"({manifest['rectify_failures']} rectification fallbacks)")


@cli.command("synth-db")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--replicates", default=5, show_default=True)
@click.option("--color-seed", default=0, show_default=True)
@click.pass_context
def synth_db_cmd(ctx, out_path, replicates, color_seed):
    """Write a synthetic single-reagent fingerprint database as JSON."""
    model = synth.single_reagent_color_model(seed=color_seed)
    records = synth.synthesize_fingerprint_records(
        model, replicates=replicates, seed=ctx.obj["seed"])
    db = reagentsel.FingerprintDatabase(
        drugs=list(synth.DRUGS),
        reagents=[f"r{j:02d}" for j in range(model.table.shape[1])],
        records=records)
    core.write_json(out_path, db.to_json())
    click.echo(f"{len(db.drugs)} drugs x {len(db.reagents)} reagents "
               f"-> {out_path}")


# ---------------------------------------------------------------------------
# Single-image pipeline stages

@cli.command("rectify")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--save-rectified", type=click.Path(),
              help="Also write the full 730x1220 rectified card.")
@click.pass_context
def rectify_cmd(ctx, in_path, out_path, save_rectified):
    """Rectify a raw photo and write the salient crop."""
    layout = _layout(ctx)
    image = core.load_png(in_path)
    result = rectify.rectify_card(image, layout)
    core.save_png(out_path, result.crop)
    if save_rectified:
        core.save_png(save_rectified, result.rectified)
    click.echo(f"rectified {in_path} -> {out_path}")


@cli.command("fingerprint")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--drop-timer", is_flag=True,
              help="Skip the timer lane on 12-lane cards.")
@click.pass_context
def fingerprint_cmd(ctx, in_path, out_path, drop_timer):
    """Extract the per-lane reaction fingerprint from a salient crop."""
    layout = _layout(ctx)
    crop = core.load_png(in_path)
    fp = blobs.extract_fingerprint(crop, layout, drop_timer=drop_timer)
    core.write_json(out_path, fp.to_json())
    click.echo(f"{fp.lane_colors.shape[0]} lanes -> {out_path}")


@cli.command("select-reagents")
@click.option("--db", "db_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path())
@click.option("--mode", default="white", show_default=True,
              type=click.Choice(["white", "blank"]))
@click.option("--blank-baseline", type=click.Path(exists=True),
              help="JSON with per-reagent baseline RGB (blank mode only).")
def select_reagents_cmd(db_path, out_path, report_path, mode, blank_baseline):
    """Rank reagents by SVD contribution and assemble the 12-slot panel."""
    db = reagentsel.FingerprintDatabase.from_json(core.read_json(db_path))
    matrix_mode = (reagentsel.MatrixMode.DISTANCE_FROM_WHITE
                   if mode == "white"
                   else reagentsel.MatrixMode.DISTANCE_FROM_BLANK)
    baseline = None
    if matrix_mode is reagentsel.MatrixMode.DISTANCE_FROM_BLANK:
        if not blank_baseline:
            raise core.ConfigError("--blank-baseline required for blank mode")
        baseline = np.array(core.read_json(blank_baseline), dtype=np.float64)
    m = reagentsel.build_distance_matrix(db, matrix_mode, baseline)
    svd_result = reagentsel.svd(m)
    panel = reagentsel.select_panel(m, svd_result)
    core.write_json(out_path, {
        "version": 1,
        "panel": panel,
        "reagents": ["timer" if r == reagentsel.TIMER_SLOT
                     else db.reagents[r] for r in panel],
    })
    if report_path:
        fps = reagentsel.panel_fingerprints_from_db(db, panel)
        report = reagentsel.verify_uniqueness(fps)
        core.write_json(report_path, report.to_json())
        click.echo("uniqueness: %s (worst margin %.2f)"
                   % ("pass" if report.passed else "FAIL",
                      report.worst_margin))
    click.echo("panel: " + ",".join(str(r) for r in panel))


# ---------------------------------------------------------------------------
# Feature extraction

def _load_dictionary(path) -> features.Dictionary:
    return features.Dictionary.load(path)


def _train_dictionaries(manifest_path, names, seed):
    view = exp.DatasetView.open(manifest_path)
    return exp.train_fold_dictionaries(
        view, need_color="color" in names, need_sift="sift" in names,
        seed=seed)


@cli.command("features")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--kind", required=True,
              type=click.Choice(list(exp.FEATURE_KINDS)))
@click.option("--dict", "dict_path", type=click.Path(),
              help="Dictionary file for colorbank or dsift.")
@click.option("--dict-color", type=click.Path(),
              help="Color dictionary (combined kind).")
@click.option("--dict-sift", type=click.Path(),
              help="SIFT dictionary (combined kind).")
@click.option("--train-dict", is_flag=True,
              help="Train missing dictionaries on the train split first.")
@click.option("--out-dir", required=True, type=click.Path())
@click.pass_context
def features_cmd(ctx, manifest_path, kind, dict_path, dict_color, dict_sift,
                 train_dict, out_dir):
    """Extract one feature kind for every manifest image into a cache dir."""
    seed = ctx.obj["seed"]
    needed = exp.dictionaries_for_kind(kind)
    paths = {}
    if needed == ("color",) or needed == ("sift",):
        if not dict_path:
            raise core.ConfigError(f"--dict required for kind {kind!r}")
        paths[needed[0]] = dict_path
    elif needed:
        if not (dict_color and dict_sift):
            raise core.ConfigError(
                "--dict-color and --dict-sift required for combined")
        paths = {"color": dict_color, "sift": dict_sift}

    dicts = {}
    missing = [n for n in needed if not Path(paths[n]).exists()]
    if missing:
        if not train_dict:
            raise core.ConfigError(
                "dictionary files missing; pass --train-dict to create them")
        trained = _train_dictionaries(manifest_path, missing, seed)
        # dictionary of fold 0 = trained on that fold's training split
        for name in missing:
            trained[0][name].save(paths[name])
    for name in needed:
        dicts[name] = _load_dictionary(paths[name])

    view = exp.DatasetView.open(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry in view.entries:
        crop = view.load_crop(entry)
        values = exp.extract_single(crop, kind, dicts)
        stem = Path(entry["image_path"]).stem
        core.save_arrays(out / f"{stem}.{kind}.bin",
                         {"kind": exp.KIND_TAGS[kind],
                          "image": entry["image_path"],
                          "dictionaries": {n: dicts[n].digest for n in dicts}},
                         {"values": values})
    click.echo(f"{len(view.entries)} feature files -> {out_dir}")


# ---------------------------------------------------------------------------
# Training, prediction, evaluation

@cli.command("train")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--feature", "kind", required=True,
              type=click.Choice(list(exp.FEATURE_KINDS)))
@click.option("--classifier", required=True,
              type=click.Choice(list(exp.CLASSIFIERS)))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--grid-search/--no-grid-search", default=True,
              show_default=True)
@click.option("--c", "c_value", default=4.0, show_default=True,
              help="SVM C when grid search is off.")
@click.option("--gamma", default=2.0 ** -8, show_default=True,
              help="SVM gamma when grid search is off.")
@click.pass_context
def train_cmd(ctx, manifest_path, kind, classifier, out_path, grid_search,
              c_value, gamma):
    """Train a classifier on the manifest's training split."""
    seed = ctx.obj["seed"]
    view = exp.DatasetView.open(manifest_path)
    needed = exp.dictionaries_for_kind(kind)
    dicts = {}
    if needed:
        trained = _train_dictionaries(manifest_path, needed, seed)
        dicts = {name: trained[0][name] for name in needed}

    rows, labels = [], []
    for entry in view.entries:
        if entry["split"] != "train":
            continue
        crop = view.load_crop(entry)
        rows.append(exp.extract_single(crop, kind, dicts))
        labels.append(entry["drug_index"])
    model = learn.fit_model(
        classifier, exp.KIND_TAGS[kind], view.drugs,
        np.array(rows), np.array(labels), seed=seed,
        c=c_value, gamma=gamma,
        grid_search=(classifier == "svm" and grid_search),
        dictionaries=dicts)
    model.save(out_path)
    click.echo(f"trained {classifier} on {len(rows)} images -> {out_path}")


_KIND_BY_TAG = {tag: kind for kind, tag in exp.KIND_TAGS.items()}


@cli.command("predict")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--dump-rectified", type=click.Path())
@click.option("--dump-fingerprint", type=click.Path())
@click.option("--dump-feature", type=click.Path())
@click.pass_context
def predict_cmd(ctx, model_path, in_path, dump_rectified, dump_fingerprint,
                dump_feature):
    """Rectify a raw photo, extract features, and classify."""
    layout = _layout(ctx)
    model = learn.TrainedModel.load(model_path)
    image = core.load_png(in_path)
    result = rectify.rectify_card(image, layout)
    if dump_rectified:
        core.save_png(dump_rectified, result.rectified)
    if dump_fingerprint:
        fp = blobs.extract_fingerprint(result.crop, layout)
        core.write_json(dump_fingerprint, fp.to_json())
    kind = _KIND_BY_TAG[model.feature_kind]
    values = exp.extract_single(result.crop, kind, model.dictionaries)
    if dump_feature:
        core.write_json(dump_feature, {
            "kind": model.feature_kind,
            "values": [round(float(v), 6) for v in values]})
    pred, conf = model.predict(values[None])
    label = model.class_names[int(pred[0])]
    click.echo(json.dumps({
        "label": label,
        "confidence": [round(float(v), 4) for v in conf[0]],
    }, sort_keys=True))


@cli.command("eval")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
@click.pass_context
def eval_cmd(ctx, manifest_path, model_path, report_path):
    """Evaluate a trained model on the manifest's test split."""
    view = exp.DatasetView.open(manifest_path)
    model = learn.TrainedModel.load(model_path)
    kind = _KIND_BY_TAG[model.feature_kind]
    rows, labels = [], []
    for entry in view.entries:
        if entry["split"] != "test":
            continue
        crop = view.load_crop(entry)
        rows.append(exp.extract_single(crop, kind, model.dictionaries))
        labels.append(entry["drug_index"])
    pred, conf = model.predict(np.array(rows))
    acc, cm = learn.evaluate(np.array(labels), pred, conf,
                             len(model.class_names))
    report = {
        "version": 1,
        "seed": ctx.obj["seed"],
        "model": str(model_path),
        "feature_kind": model.feature_kind,
        "algorithm": model.algorithm,
        "n_test": len(rows),
        "accuracy": round(acc, 6),
        "confusion": cm.to_json(model.class_names),
    }
    core.write_json(report_path, report)
    click.echo(f"accuracy {acc:.4f} on {len(rows)} test images")


# ---------------------------------------------------------------------------
# Full experiment protocol

@cli.command("experiment")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--features", "kinds", default="lab,combined",
              show_default=True, help="Comma-separated feature kinds.")
@click.option("--classifiers", default="knn,svm", show_default=True)
@click.option("--perturbation", default="none", show_default=True,
              type=click.Choice(["none", "lane_permutation"]))
@click.option("--grid-search/--no-grid-search", default=True,
              show_default=True)
@click.option("--c", "c_value", default=4.0, show_default=True)
@click.option("--gamma", default=2.0 ** -8, show_default=True)
@click.option("--cache-dir", default=None, type=click.Path(),
              help="Feature cache directory (default: OUT_DIR/cache). "
                   "Point several runs at one directory to share features.")
@click.pass_context
def experiment_cmd(ctx, manifest_path, out_dir, kinds, classifiers,
                   perturbation, grid_search, c_value, gamma, cache_dir):
    """Run the full per-fold train/eval grid and write reports."""
    config = exp.ExperimentConfig(
        manifest_path=manifest_path, out_dir=out_dir,
        feature_kinds=tuple(k.strip() for k in kinds.split(",") if k.strip()),
        classifiers=tuple(c.strip() for c in classifiers.split(",")
                          if c.strip()),
        perturbation=perturbation, seed=ctx.obj["seed"],
        grid_search=grid_search, svm_c=c_value, svm_gamma=gamma,
        cache_dir=cache_dir)
    report = exp.run_experiment(config)
    click.echo(exp.render_table(report))


# ---------------------------------------------------------------------------
# Entry point with pipeline exit codes

def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
    except click.exceptions.Abort:
        sys.exit(1)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(4)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except (core.NotEnoughFiducials, core.DegenerateFiducials) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except core.DecodeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    except core.ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(4)
    sys.exit(0)


if __name__ == "__main__":
    main()
