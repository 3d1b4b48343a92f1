"""Command-line surface.

Subcommands: ``synth`` (generate a labeled cohort), ``train gmic|drc|gbm|
logreg``, ``select`` (random hyperparameter search), ``eval`` (test-split
metrics, curve CSVs, bootstrap intervals), ``predict`` (one exam in, risks
and saliency out), and ``export-report`` (markdown rendering of a run
report).  Every run writes ``report.json`` — config echo, seed, version,
metrics — and reruns with the same seed and config produce byte-identical
reports.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data, ensemble, gmic, imaging, metrics, survival, tabular, training

VERSION_STRING = "v1.0.0"

_WINDOW_LABELS = tuple(int(h) for h in data.HORIZONS_H)


class CliError(Exception):
    """Fatal, user-facing; the message becomes the diagnostic."""


# ----------------------------------------------------------------- config


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(x) for x in s.split(","))


def _ints(s):
    return tuple(int(x) for x in s.split(","))


_IMAGE_ARCH_KEYS = {
    "input_side": (int, 64),
    "saliency_side": (int, 8),
    "stage_channels": (_ints, None),   # None -> flavor default
    "crop_side": (int, 16),
    "patch_side": (int, 14),
    "num_patches": (int, 6),
    "local_stage_channels": (_ints, (8, 16, 32)),
    "local_pool_stages": (int, 1),
    "attention_dim": (int, 16),
    "pool_fraction": (float, 0.5),
    "sparsity_weight": (float, 1e-4),
}

_IMAGE_TRAIN_KEYS = {
    "epochs": (int, 8),
    "batch_size": (int, 8),
    "learning_rate": (float, 2e-3),
    "val_fraction": (float, 0.2),
    "augment": (_bool, False),
    "augment_flip": (float, 0.5),
    "augment_rotation": (float, 45.0),
    "augment_translation": (float, 0.1),
}

SCHEMAS = {
    "synth": {
        "num_patients": (int, 2000),
        "image_side": (int, 64),
        "blob_rate": (float, 1.5),
        "area_base": (float, 40.0),
        "area_slope": (float, 380.0),
        "hazard_anchors": (_floats, (-8.0, -6.8, -5.6, -4.4, -3.2, -2.0, 0.0, 2.0)),
        "hazard_slope": (float, 20.0),
        "tabular_mix": (float, 0.0),
        "tabular_noise": (float, 0.15),
        "lab_missing_rate": (float, 0.2),
        "exam_time_h": (float, 12.0),
        "censor_time_h": (float, 240.0),
    },
    "train gmic": {**_IMAGE_ARCH_KEYS, **_IMAGE_TRAIN_KEYS},
    "train drc": {**_IMAGE_ARCH_KEYS, **_IMAGE_TRAIN_KEYS,
                  "learning_rate": (float, 5e-4), "epochs": (int, 60)},
    "train gbm": {
        "learning_rate": (float, 0.1),
        "num_trees": (int, 200),
        "max_leaves": (int, 8),
    },
    "train logreg": {
        "l2_weight": (float, 1e-4),
        "iterations": (int, 500),
    },
    "select": {
        "family": (str, "gbm"),
        "second_family": (str, ""),
        "universe_percent": (float, 100.0),
        "num_configs": (int, 30),
        "num_seeds": (int, 3),
        "epochs": (int, 2),
        "batch_size": (int, 8),
        "input_side": (int, 64),
    },
    "eval": {
        "bootstrap_iterations": (int, 1000),
        "val_fraction": (float, 0.2),
        "tta_n": (int, 0),
    },
    "predict": {
        "tta_n": (int, 10),
        "tta_flip": (float, 0.5),
        "tta_rotation": (float, 45.0),
        "tta_translation": (float, 0.1),
        "reference_time_h": (float, 12.0),
    },
    "export-report": {},
}


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment; duplicates rejected."""
    raw = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    for num, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"{path}:{num}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if not key:
            raise CliError(f"{path}:{num}: empty key")
        if key in raw:
            raise CliError(f"{path}:{num}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(command, config_path):
    """Defaults overlaid with the config file; unknown keys are fatal."""
    schema = SCHEMAS[command]
    values = {k: default for k, (_, default) in schema.items()}
    if config_path is None:
        return values
    raw = parse_config_file(config_path)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise CliError(
            f"unknown config key(s) for {command}: {', '.join(unknown)}; "
            f"allowed: {', '.join(sorted(schema))}")
    for key, text in raw.items():
        conv = schema[key][0]
        try:
            values[key] = conv(text)
        except ValueError as e:
            raise CliError(f"config key {key}: {e}") from e
    return values


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def write_report(out_dir, command, config, seed, metrics_dict, inputs=None):
    payload = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in config.items()},
        "inputs": inputs or {},
        "metrics": metrics_dict,
        "seed": seed,
        "version": VERSION_STRING,
    }
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _require_file(path, hint):
    if not os.path.isfile(path):
        raise CliError(f"missing {hint}: {path}")
    return path


# ----------------------------------------------------------------- helpers


def _load_cohorts(data_dir, side):
    manifest = _require_file(os.path.join(data_dir, "manifest.csv"), "manifest")
    cohort = training.load_image_cohort(manifest, side=side)
    return cohort.split("train"), cohort.split("test")


def _split_features(data_dir, train_c, test_c):
    manifest = os.path.join(data_dir, "manifest.csv")
    clinical = os.path.join(data_dir, "clinical.csv")
    if not os.path.isfile(clinical):
        return None, None
    records = {r.exam_id: r for r in data.load_manifest(manifest)}
    feats = {}
    histories = tabular.load_clinical_csv(clinical)
    for split_c in (train_c, test_c):
        rows = [tabular.featurize(histories.get(pid),
                                  records[eid].exam_time_h)
                for eid, pid in zip(split_c.exam_ids, split_c.patient_ids)]
        feats[id(split_c)] = (np.stack(rows)
                              if rows else np.zeros((0, tabular.NUM_FEATURES)))
    return feats[id(train_c)], feats[id(test_c)]


def _build_image_config(flavor, cfg, seed):
    arch = {k: cfg[k] for k in _IMAGE_ARCH_KEYS if cfg[k] is not None}
    arch["seed"] = seed
    try:
        if flavor == "drc":
            return gmic.drc_config(**arch)
        return gmic.GmicConfig(num_windows=4, **arch)
    except ValueError as e:
        raise CliError(f"invalid architecture: {e}") from e


def _augment_policy(cfg, seed):
    if not cfg["augment"]:
        return imaging.IDENTITY_POLICY
    return imaging.AugmentPolicy(
        flip_probability=cfg["augment_flip"],
        rotation_degrees=(-cfg["augment_rotation"], cfg["augment_rotation"]),
        max_translation_fraction=cfg["augment_translation"],
        seed=seed)


def _round_history(history):
    return [{"epoch": h.epoch,
             "train_loss": round(h.train_loss, 10),
             "val_score": (None if not np.isfinite(h.val_score)
                           else round(h.val_score, 10))}
            for h in history]


# ------------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = resolve_config("synth", args.config)
    try:
        spec = data.SyntheticSpec(seed=args.seed, **cfg)
    except ValueError as e:
        raise CliError(f"invalid synthetic spec: {e}") from e
    out = _ensure_dir(args.out_dir)
    records = data.generate_synthetic(spec, out)
    events = sum(1 for r in records if r.event_time_h is not None)
    m = {"num_exams": len(records), "num_events": events,
         "event_rate": round(events / len(records), 10)}
    write_report(out, "synth", cfg, args.seed, m)
    print(f"synth: {len(records)} exams -> {out}")
    return 0


def cmd_train(args):
    command = f"train {args.model}"
    cfg = resolve_config(command, args.config)
    out = _ensure_dir(args.out_dir)
    if args.model in ("gmic", "drc"):
        return _train_image(args, command, cfg, out)
    return _train_tabular(args, command, cfg, out)


def _train_image(args, command, cfg, out):
    model_cfg = _build_image_config(args.model, cfg, args.seed)
    train_c, _ = _load_cohorts(args.data, model_cfg.input_side)
    if len(train_c) == 0:
        raise CliError("train split is empty")
    policy = _augment_policy(cfg, args.seed)
    trainer = training.train_gmic if args.model == "gmic" else training.train_drc
    try:
        res = trainer(train_c, model_cfg, learning_rate=cfg["learning_rate"],
                      epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                      seed=args.seed, val_fraction=cfg["val_fraction"],
                      augment_policy=policy)
    except (ValueError, metrics.DegenerateCohort) as e:
        raise CliError(f"training failed: {e}") from e
    ckpt = os.path.join(out, f"{args.model}.ckpt")
    res.model.save(ckpt)
    m = {"best_epoch": res.best_epoch,
         "best_val_score": round(res.best_val_score, 10),
         "history": _round_history(res.history)}
    write_report(out, command, cfg, args.seed, m, inputs={"data": args.data})
    print(f"{command}: best epoch {res.best_epoch} "
          f"val {res.best_val_score:.4f} -> {ckpt}")
    return 0


def _train_tabular(args, command, cfg, out):
    manifest = _require_file(os.path.join(args.data, "manifest.csv"), "manifest")
    _require_file(os.path.join(args.data, "clinical.csv"), "clinical data")
    records = [r for r in data.load_manifest(manifest)
               if r.split == "train" and data.derive_labels(r) is not None]
    if not records:
        raise CliError("train split is empty")
    feats = training.tabular_features(
        manifest, os.path.join(args.data, "clinical.csv"), records)
    y = np.stack([data.derive_labels(r).y for r in records])
    m = {}
    if args.model == "gbm":
        models = training.train_window_gbms(
            feats, y, learning_rate=cfg["learning_rate"],
            num_trees=cfg["num_trees"], max_leaves=cfg["max_leaves"],
            seed=args.seed)
        for t, hours in enumerate(_WINDOW_LABELS):
            tabular.dump_gbm(models[t], os.path.join(out, f"gbm_{hours}.txt"))
            m[f"final_train_loss_{hours}"] = round(models[t].train_losses[-1], 10)
    else:
        models = training.train_window_logregs(
            feats, y, l2_weight=cfg["l2_weight"], iterations=cfg["iterations"])
        for t, hours in enumerate(_WINDOW_LABELS):
            tabular.dump_logreg(models[t], os.path.join(out, f"logreg_{hours}.json"))
    preds = (training.predict_window_gbms(models, feats)
             if args.model == "gbm"
             else training.predict_window_logregs(models, feats))
    for t, hours in enumerate(_WINDOW_LABELS):
        try:
            m[f"train_auc_{hours}"] = round(metrics.roc_auc(preds[:, t], y[:, t]), 10)
        except metrics.DegenerateCohort:
            m[f"train_auc_{hours}"] = None
    write_report(out, command, cfg, args.seed, m, inputs={"data": args.data})
    print(f"{command}: {len(records)} exams -> {out}")
    return 0


def _make_family(name, cfg):
    base = {"input_side": cfg["input_side"]}
    if name == "gmic":
        return ensemble.GmicImageFamily(epochs=cfg["epochs"],
                                        batch_size=cfg["batch_size"],
                                        base_config=base)
    if name == "drc":
        return ensemble.DrcImageFamily(epochs=cfg["epochs"],
                                       batch_size=cfg["batch_size"],
                                       base_config=base)
    if name == "gbm":
        return ensemble.GbmTabularFamily()
    raise CliError(f"unknown family {name!r}; choose gmic, drc, or gbm")


def cmd_select(args):
    cfg = resolve_config("select", args.config)
    out = _ensure_dir(args.out_dir)
    train_c, test_c = _load_cohorts(args.data, cfg["input_side"])
    train_f, test_f = _split_features(args.data, train_c, test_c)
    train_data = ensemble.SelectionData(train_c, train_f)
    test_data = ensemble.SelectionData(test_c, test_f)

    def run(name):
        fam = _make_family(name, cfg)
        try:
            return fam, ensemble.run_model_selection(
                train_data, test_data, cfg["universe_percent"], fam,
                args.seed, num_configs=cfg["num_configs"],
                num_seeds=cfg["num_seeds"])
        except (ValueError, metrics.DegenerateCohort) as e:
            raise CliError(f"selection ({name}) failed: {e}") from e

    fam1, res1 = run(cfg["family"])
    lines = []
    m = {f"{fam1.name}_test_score": round(res1.test_score, 10),
         f"{fam1.name}_top3": res1.top3}
    lam = None
    if cfg["second_family"]:
        fam2, res2 = run(cfg["second_family"])
        m[f"{fam2.name}_test_score"] = round(res2.test_score, 10)
        m[f"{fam2.name}_top3"] = res2.top3
        pool_ids = sorted(set(res1.pool_exam_ids) | set(res2.pool_exam_ids))
        pool_set = set(pool_ids)
        pooled = train_data.subset([e in pool_set for e in train_data.exam_ids])
        p1 = ensemble.ensemble_member_predictions(fam1, res1.members, pooled)
        p2 = ensemble.ensemble_member_predictions(fam2, res2.members, pooled)
        try:
            weights = ensemble.fit_ensemble_weights(p1, p2, pooled.cohort.y)
        except metrics.DegenerateCohort as e:
            raise CliError(f"lambda selection failed: {e}") from e
        lam = list(weights.lam)
        combined = ensemble.ensemble_predict(res1.test_predictions,
                                             res2.test_predictions, weights)
        for t, hours in enumerate(_WINDOW_LABELS):
            m[f"ensemble_test_auc_{hours}"] = round(
                metrics.roc_auc(combined[:, t], test_c.y[:, t]), 10)
        m["lambda"] = [round(v, 10) for v in lam]
        with open(os.path.join(out, "weights.json"), "w") as fh:
            json.dump({"lambda": list(weights.lam),
                       "gbm_imputation_mean": list(weights.gbm_imputation_mean)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        lines.extend(ensemble.selection_report_lines(
            res2, fam2.name, lam=lam,
            test_metrics={k: v for k, v in m.items() if k.startswith("ensemble")}))
    lines = ensemble.selection_report_lines(
        res1, fam1.name, lam=lam,
        test_metrics={f"{fam1.name}_test_score": round(res1.test_score, 10)}) + lines
    with open(os.path.join(out, "selection.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_report(out, "select", cfg, args.seed, m, inputs={"data": args.data})
    print(f"select: top3 {res1.top3} -> {out}")
    return 0


def _load_image_model(model_dir, name):
    path = os.path.join(model_dir, f"{name}.ckpt")
    if not (os.path.isfile(path) and os.path.isfile(path + ".json")):
        return None
    return gmic.GmicModel.load(path)


def _load_gbms(model_dir):
    paths = [os.path.join(model_dir, f"gbm_{h}.txt") for h in _WINDOW_LABELS]
    if not all(os.path.isfile(p) for p in paths):
        return None
    return [tabular.load_gbm(p) for p in paths]


def cmd_eval(args):
    cfg = resolve_config("eval", args.config)
    out = _ensure_dir(args.out_dir)
    gmic_model = _load_image_model(args.model_dir, "gmic")
    drc_model = _load_image_model(args.model_dir, "drc")
    gbms = _load_gbms(args.model_dir)
    if gmic_model is None and drc_model is None and gbms is None:
        raise CliError(f"no models found under {args.model_dir}")
    side = (gmic_model or drc_model).cfg.input_side if (gmic_model or drc_model) else 64
    train_c, test_c = _load_cohorts(args.data, side)
    if len(test_c) == 0:
        raise CliError("test split is empty")
    train_f, test_f = _split_features(args.data, train_c, test_c)
    m = {}
    pats = np.array(test_c.patient_ids)

    def cis(scores, labels, prefix):
        for t, hours in enumerate(_WINDOW_LABELS):
            col, lab = scores[:, t], labels[:, t]
            try:
                auc, lo, hi = metrics.bootstrap_ci(
                    lambda idx: metrics.roc_auc(col[idx], lab[idx]),
                    len(col), iterations=cfg["bootstrap_iterations"],
                    seed=args.seed, groups=pats)
                pr, plo, phi = metrics.bootstrap_ci(
                    lambda idx: metrics.pr_auc(col[idx], lab[idx]),
                    len(col), iterations=cfg["bootstrap_iterations"],
                    seed=args.seed, groups=pats)
            except metrics.DegenerateCohort as e:
                raise CliError(f"eval failed on the {hours} h window: {e}") from e
            m[f"{prefix}_auc_{hours}"] = [round(v, 10) for v in (auc, lo, hi)]
            m[f"{prefix}_pr_auc_{hours}"] = [round(v, 10) for v in (pr, plo, phi)]

    gmic_test = None
    if gmic_model is not None:
        gmic_test = training.predict_image_model(gmic_model, test_c.images)
        cis(gmic_test, test_c.y, "gmic")
        for t, hours in enumerate(_WINDOW_LABELS):
            metrics.write_roc_csv(os.path.join(out, f"roc_{hours}.csv"),
                                  gmic_test[:, t], test_c.y[:, t])
            metrics.write_pr_csv(os.path.join(out, f"pr_{hours}.csv"),
                                 gmic_test[:, t], test_c.y[:, t])

    gbm_test = None
    if gbms is not None:
        if test_f is None:
            raise CliError("gbm models present but clinical.csv is missing")
        gbm_test = training.predict_window_gbms(gbms, test_f)
        cis(gbm_test, test_c.y, "gbm")

    if gmic_test is not None and gbm_test is not None:
        rng = np.random.default_rng((args.seed, 0xE5))
        val_mask = training.split_by_patient(train_c.patient_ids,
                                             cfg["val_fraction"], rng)
        val_c = train_c.subset(val_mask)
        val_f = train_f[np.nonzero(val_mask)[0]]
        try:
            weights = ensemble.fit_ensemble_weights(
                training.predict_image_model(gmic_model, val_c.images),
                training.predict_window_gbms(gbms, val_f), val_c.y)
        except metrics.DegenerateCohort as e:
            raise CliError(f"lambda selection failed: {e}") from e
        m["lambda"] = [round(v, 10) for v in weights.lam]
        combined = ensemble.ensemble_predict(gmic_test, gbm_test, weights)
        cis(combined, test_c.y, "ensemble")
        with open(os.path.join(out, "weights.json"), "w") as fh:
            json.dump({"lambda": list(weights.lam),
                       "gbm_imputation_mean": list(weights.gbm_imputation_mean)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")

    if drc_model is not None:
        curves = training.predict_drc_curves(drc_model, test_c.images)
        col96 = survival.TIME_GRID_HOURS.index(96.0)
        try:
            conc = metrics.concordance_at(curves[:, col96], test_c.event_times,
                                          test_c.event_observed)
        except metrics.DegenerateCohort:
            conc = None
        m["drc_concordance_96"] = None if conc is None else round(conc, 10)
        rows = metrics.reliability_table(curves, test_c.event_times,
                                         test_c.event_observed,
                                         survival.TIME_GRID_HOURS)
        metrics.write_reliability_csv(os.path.join(out, "reliability.csv"), rows)
        gap = max(abs(r.mean_predicted - r.event_fraction)
                  for r in rows if r.time_h == 96.0)
        m["drc_reliability_gap_96"] = round(gap, 10)
        m["drc_auc_96"] = round(metrics.roc_auc(curves[:, col96], test_c.y[:, 3]), 10)
        with open(os.path.join(out, "drc.csv"), "w", newline="") as fh:
            fh.write("exam_id,t_hours,drc_value\n")
            for i, eid in enumerate(test_c.exam_ids):
                for j, t in enumerate(survival.TIME_GRID_HOURS):
                    fh.write(f"{eid},{t!r},{float(curves[i, j])!r}\n")

    write_report(out, "eval", cfg, args.seed, m,
                 inputs={"data": args.data, "model_dir": args.model_dir})
    keyline = ", ".join(f"{k}={v}" for k, v in sorted(m.items())
                        if not isinstance(v, list))
    print(f"eval: {keyline or 'done'} -> {out}")
    return 0


def cmd_predict(args):
    cfg = resolve_config("predict", args.config)
    out = _ensure_dir(args.out_dir)
    gmic_model = _load_image_model(args.model_dir, "gmic")
    drc_model = _load_image_model(args.model_dir, "drc")
    if gmic_model is None and drc_model is None:
        raise CliError(f"no image model checkpoints under {args.model_dir}")
    _require_file(args.image, "image")
    raw = imaging.read_pgm(args.image)
    exam_id = os.path.splitext(os.path.basename(args.image))[0]
    policy = imaging.AugmentPolicy(
        flip_probability=cfg["tta_flip"],
        rotation_degrees=(-cfg["tta_rotation"], cfg["tta_rotation"]),
        max_translation_fraction=cfg["tta_translation"], seed=args.seed)

    def averaged(model, to_outputs):
        img = imaging.preprocess(raw, model.cfg.input_side)
        if cfg["tta_n"] > 0:
            return imaging.tta_average(to_outputs, img, policy, n=cfg["tta_n"])
        return to_outputs(img)

    m = {}
    if gmic_model is not None:
        probs = averaged(gmic_model, lambda im: gmic_model.predict(im)[0])
        if np.any((probs <= 0.0) | (probs >= 1.0)):
            raise CliError("degenerate probabilities; checkpoint may be corrupt")
        with open(os.path.join(out, "probabilities.csv"), "w", newline="") as fh:
            fh.write("window_h,probability\n")
            for hours, p in zip(_WINDOW_LABELS, probs):
                fh.write(f"{hours},{float(p)!r}\n")
        m["probabilities"] = {str(h): round(float(p), 10)
                              for h, p in zip(_WINDOW_LABELS, probs)}
        img = imaging.preprocess(raw, gmic_model.cfg.input_side)
        outputs = gmic_model.forward(img)
        gmic.export_saliency(out, outputs.saliency.data[0], outputs.rois[0],
                             [f"{h}h" for h in _WINDOW_LABELS])

    if drc_model is not None:
        curve = averaged(
            drc_model,
            lambda im: survival.drc_from_conditionals(drc_model.predict(im)[0]))
        if np.any(np.diff(curve) < -1e-12):
            raise CliError("risk curve is not nondecreasing; checkpoint corrupt")
        with open(os.path.join(out, "drc.csv"), "w", newline="") as fh:
            fh.write("exam_id,t_hours,drc_value\n")
            for t, v in zip(survival.TIME_GRID_HOURS, curve):
                fh.write(f"{exam_id},{t!r},{float(v)!r}\n")
        m["drc"] = {str(t): round(float(v), 10)
                    for t, v in zip(survival.TIME_GRID_HOURS, curve)}

    write_report(out, "predict", cfg, args.seed, m,
                 inputs={"image": args.image, "model_dir": args.model_dir})
    print(f"predict: {exam_id} -> {out}")
    return 0


def cmd_export_report(args):
    src = _require_file(os.path.join(args.run_dir, "report.json"), "run report")
    with open(src) as fh:
        try:
            rep = json.load(fh)
        except json.JSONDecodeError as e:
            raise CliError(f"malformed report.json: {e}") from e
    lines = [f"# Run report: {rep.get('command', '?')}", ""]
    lines.append(f"- version: `{rep.get('version', '?')}`")
    lines.append(f"- seed: `{rep.get('seed', '?')}`")
    for name, block in (("Inputs", rep.get("inputs", {})),
                        ("Config", rep.get("config", {}))):
        if not block:
            continue
        lines += ["", f"## {name}", "", "| key | value |", "| --- | --- |"]
        for k in sorted(block):
            lines.append(f"| {k} | `{block[k]}` |")
    met = rep.get("metrics", {})
    lines += ["", "## Metrics", ""]
    if met:
        lines += ["| metric | value |", "| --- | --- |"]
        for k in sorted(met):
            lines.append(f"| {k} | `{met[k]}` |")
    else:
        lines.append("(none recorded)")
    dest = args.out or os.path.join(args.run_dir, "report.md")
    with open(dest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"export-report: {dest}")
    return 0


# ------------------------------------------------------------------ driver


def build_parser():
    parser = argparse.ArgumentParser(
        prog="detrisk",
        description="Deterioration-risk modeling on chest radiographs "
                    "plus routine clinical variables.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_arg=True):
        if data_arg:
            p.add_argument("--data", required=True,
                           help="dataset directory (manifest.csv, images/, clinical.csv)")
        p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p, data_arg=False)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("model", choices=("gmic", "drc", "gbm", "logreg"))
    common(p)

    p = sub.add_parser("select", help="random hyperparameter search")
    common(p)

    p = sub.add_parser("eval", help="test-split metrics and curve exports")
    p.add_argument("--model-dir", required=True)
    common(p)

    p = sub.add_parser("predict", help="score one exam")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--image", required=True, help="input PGM")
    common(p, data_arg=False)

    p = sub.add_parser("export-report", help="render report.json to markdown")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "select": cmd_select,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-report": cmd_export_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
