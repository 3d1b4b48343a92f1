"""Two-modality ensembling and the random-search model-selection harness.

The ensemble is a per-window convex combination of image-model and
tabular-model probabilities; the mixing weight is grid-searched on
validation data.  Model selection draws random hyperparameter
configurations, scores each with repeated patient-level 80/20 splits, and
averages the members of the best three configurations.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, gmic, metrics, survival, tabular, training

LAMBDA_GRID = np.round(np.arange(0, 101) * 0.01, 2)
WINDOW_GRID_COLUMNS = tuple(survival.TIME_GRID_HOURS.index(float(h))
                            for h in data.HORIZONS_H)


@dataclass(frozen=True)
class EnsembleWeights:
    """Per-window mixing weights plus fallback means for missing tabular
    predictions."""

    lam: tuple
    gbm_imputation_mean: tuple

    def __post_init__(self):
        if len(self.lam) != len(data.HORIZONS_H):
            raise ValueError(f"lam must have {len(data.HORIZONS_H)} entries")
        if len(self.gbm_imputation_mean) != len(data.HORIZONS_H):
            raise ValueError("gbm_imputation_mean must match the window count")
        for v in self.lam:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"lambda {v} outside [0, 1]")
        for v in self.gbm_imputation_mean:
            if not 0.0 < v < 1.0:
                raise ValueError(f"imputation mean {v} outside (0, 1)")


def ensemble_predict(y_image, y_tabular, weights):
    """Convex combination per window; NaN tabular entries fall back to the
    stored imputation means.  Accepts single vectors or (N, 4) batches."""
    yi = np.asarray(y_image, dtype=np.float64)
    single = yi.ndim == 1
    yi = np.atleast_2d(yi)
    if y_tabular is None:
        yt = np.full_like(yi, np.nan)
    else:
        yt = np.atleast_2d(np.asarray(y_tabular, dtype=np.float64))
    if yi.shape[1] != len(data.HORIZONS_H) or yt.shape != yi.shape:
        raise ValueError(f"ensemble_predict: shapes {yi.shape} vs {yt.shape}")
    if np.any((yi < 0.0) | (yi > 1.0)) or not np.all(np.isfinite(yi)):
        raise ValueError("ensemble_predict: image predictions outside [0, 1]")
    with np.errstate(invalid="ignore"):
        if np.any((yt < 0.0) | (yt > 1.0)):
            raise ValueError("ensemble_predict: tabular predictions outside [0, 1]")
    lam = np.asarray(weights.lam, dtype=np.float64)
    fill = np.asarray(weights.gbm_imputation_mean, dtype=np.float64)
    yt = np.where(np.isnan(yt), fill[None, :], yt)
    out = lam[None, :] * yi + (1.0 - lam[None, :]) * yt
    return out[0] if single else out


def select_lambda(val_image, val_tabular, val_labels):
    """Per-window grid search over mixing weights.

    Maximizes (ROC AUC + PR AUC)/2 on the validation predictions; the
    smallest maximizing weight wins ties.  A window whose labels are all
    one class is an error naming that window.
    """
    yi = np.asarray(val_image, dtype=np.float64)
    yt = np.asarray(val_tabular, dtype=np.float64)
    labels = np.asarray(val_labels, dtype=np.float64)
    if yi.shape != yt.shape or yi.shape != labels.shape or yi.ndim != 2:
        raise ValueError("select_lambda: prediction/label shapes disagree")
    lams = []
    for t, hours in enumerate(data.HORIZONS_H):
        col = labels[:, t]
        if len(np.unique(col)) < 2:
            raise metrics.DegenerateCohort(
                f"select_lambda: validation labels for the {hours} h window "
                "contain a single class")
        scores = np.empty(LAMBDA_GRID.size)
        for g, lam in enumerate(LAMBDA_GRID):
            blend = lam * yi[:, t] + (1.0 - lam) * yt[:, t]
            scores[g] = 0.5 * (metrics.roc_auc(blend, col)
                               + metrics.pr_auc(blend, col))
        lams.append(float(LAMBDA_GRID[int(np.argmax(scores))]))
    return np.array(lams)


def fit_ensemble_weights(val_image, val_tabular, val_labels):
    """Grid-searched weights plus validation-mean imputation values."""
    lam = select_lambda(val_image, val_tabular, val_labels)
    means = np.nanmean(np.asarray(val_tabular, dtype=np.float64), axis=0)
    means = np.clip(means, 1e-6, 1.0 - 1e-6)
    return EnsembleWeights(lam=tuple(float(v) for v in lam),
                           gbm_imputation_mean=tuple(float(v) for v in means))


@dataclass
class SelectionData:
    """One cohort with optional aligned tabular features."""

    cohort: training.ImageCohort
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.features is not None and len(self.features) != len(self.cohort):
            raise ValueError(
                f"features rows {len(self.features)} != cohort size {len(self.cohort)}")

    @property
    def patient_ids(self):
        return self.cohort.patient_ids

    @property
    def exam_ids(self):
        return self.cohort.exam_ids

    def subset(self, mask):
        idx = np.nonzero(np.asarray(mask))[0]
        feats = None if self.features is None else self.features[idx]
        return SelectionData(self.cohort.subset(mask), feats)

    def __len__(self):
        return len(self.cohort)


class GmicImageFamily:
    """Search space for the window classifier: log-uniform learning rate in
    10^[-6, -4], log-uniform sparsity weight in 4*10^[-6, -3], linear pool
    fraction in [0.2, 0.8]."""

    name = "gmic"

    def __init__(self, epochs=4, batch_size=8, base_config=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_config = dict(base_config or {})

    def sample_config(self, rng):
        return {
            "learning_rate": float(10.0 ** rng.uniform(-6.0, -4.0)),
            "sparsity_weight": float(4.0 * 10.0 ** rng.uniform(-6.0, -3.0)),
            "pool_fraction": float(rng.uniform(0.2, 0.8)),
        }

    def fit(self, config, dataset, seed):
        cfg = gmic.GmicConfig(**{**self.base_config,
                                 "pool_fraction": config["pool_fraction"],
                                 "sparsity_weight": config["sparsity_weight"],
                                 "seed": seed})
        res = training.train_gmic(dataset.cohort, cfg,
                                  learning_rate=config["learning_rate"],
                                  epochs=self.epochs, batch_size=self.batch_size,
                                  seed=seed)
        return res.model

    def predict(self, model, dataset):
        return training.predict_image_model(model, dataset.cohort.images)

    def score_predictions(self, preds, dataset):
        return training.classifier_score(preds, dataset.cohort.y)

    def score(self, model, dataset):
        return self.score_predictions(self.predict(model, dataset), dataset)


class DrcImageFamily(GmicImageFamily):
    """Risk-curve flavor: fixed learning rate, log-uniform sparsity weight in
    10^[-6, -4], pool fraction drawn from {0.2, 0.5, 0.8}.  Validation score
    is concordance of the 96 h curve value."""

    name = "drc"
    learning_rate = 1.25e-4

    def sample_config(self, rng):
        return {
            "sparsity_weight": float(10.0 ** rng.uniform(-6.0, -4.0)),
            "pool_fraction": float(rng.choice([0.2, 0.5, 0.8])),
        }

    def fit(self, config, dataset, seed):
        cfg = gmic.drc_config(**{**self.base_config,
                                 "pool_fraction": config["pool_fraction"],
                                 "sparsity_weight": config["sparsity_weight"],
                                 "seed": seed})
        res = training.train_drc(dataset.cohort, cfg,
                                 learning_rate=self.learning_rate,
                                 epochs=self.epochs, batch_size=self.batch_size,
                                 seed=seed)
        return res.model

    def predict(self, model, dataset):
        curves = training.predict_drc_curves(model, dataset.cohort.images)
        return curves[:, list(WINDOW_GRID_COLUMNS)]

    def score_predictions(self, preds, dataset):
        return metrics.concordance_at(preds[:, -1], dataset.cohort.event_times,
                                      dataset.cohort.event_observed)


class GbmTabularFamily:
    """Search space for the boosted trees: log-uniform learning rate in
    10^[-2, -1], tree count log-uniform over [100, 1000] rounded to an
    integer, leaf budget uniform over the integers 5..15."""

    name = "gbm"

    def sample_config(self, rng):
        return {
            "learning_rate": float(10.0 ** rng.uniform(-2.0, -1.0)),
            "num_trees": int(round(10.0 ** rng.uniform(2.0, 3.0))),
            "max_leaves": int(rng.integers(5, 16)),
        }

    def fit(self, config, dataset, seed):
        if dataset.features is None:
            raise ValueError("gbm family requires tabular features")
        return training.train_window_gbms(
            dataset.features, dataset.cohort.y,
            learning_rate=config["learning_rate"],
            num_trees=config["num_trees"],
            max_leaves=config["max_leaves"], seed=seed)

    def predict(self, models, dataset):
        if dataset.features is None:
            raise ValueError("gbm family requires tabular features")
        return training.predict_window_gbms(models, dataset.features)

    def score_predictions(self, preds, dataset):
        return training.classifier_score(preds, dataset.cohort.y)

    def score(self, models, dataset):
        return self.score_predictions(self.predict(models, dataset), dataset)


@dataclass
class MemberRun:
    config_index: int
    seed_index: int
    member_seed: int
    config: dict
    val_score: float
    wall_time_s: float
    train_exam_ids: list
    val_exam_ids: list
    model: object


@dataclass
class SelectionResult:
    universe_percent: float
    universe_patients: list
    configs: list
    val_scores: np.ndarray      # (num_configs, num_seeds)
    mean_scores: np.ndarray     # (num_configs,)
    top3: list
    runs: list
    members: list               # [(config_index, seed_index, model)] * 9
    test_predictions: np.ndarray
    test_score: float
    pool_exam_ids: list
    pooled_predictions: np.ndarray
    pooled_data: SelectionData = field(repr=False, default=None)


def ensemble_member_predictions(family, members, dataset):
    """Equal-weight average of the member models' predictions."""
    preds = [family.predict(model, dataset) for _, _, model in members]
    return np.mean(preds, axis=0)


def run_model_selection(train_data, test_data, universe_percent, family, seed,
                        num_configs=30, num_seeds=3, val_fraction=0.2,
                        top_k=3):
    """Random hyperparameter search scored by repeated patient-level splits.

    Protocol, fully determined by ``seed``:
      * universe: permutation of the sorted train patients under
        rng((seed, 0xC0)); the first floor(universe_percent/100 * count) stay;
      * configurations: ``num_configs`` draws from family.sample_config under
        rng((seed, 0xC1));
      * per (config i, repeat j): an 80/20 patient split from
        rng((seed, 0xC2, i, j)); the member trains with an integer seed
        unique to (i, j) and is scored on the held-out 20%.
    Mean validation score ranks configurations; the best ``top_k`` supply
    the equal-weight member ensemble, which is scored on ``test_data``.
    """
    overlap = set(train_data.patient_ids) & set(test_data.patient_ids)
    if overlap:
        raise ValueError(f"train/test share patients: {sorted(overlap)[:3]}")
    if not 0.0 < universe_percent <= 100.0:
        raise ValueError(f"universe_percent {universe_percent} outside (0, 100]")
    if num_configs < top_k:
        raise ValueError(f"need at least {top_k} configurations")
    patients = sorted(set(train_data.patient_ids))
    k = int(np.floor(universe_percent / 100.0 * len(patients)))
    if k < 2:
        raise ValueError(
            f"universe of {k} patients cannot be split; raise universe_percent")
    rng_univ = np.random.default_rng((seed, 0xC0))
    universe = set(list(rng_univ.permutation(patients))[:k])
    uni_data = train_data.subset([p in universe for p in train_data.patient_ids])

    rng_cfg = np.random.default_rng((seed, 0xC1))
    configs = [family.sample_config(rng_cfg) for _ in range(num_configs)]

    runs = []
    val_scores = np.empty((num_configs, num_seeds))
    for i, config in enumerate(configs):
        for j in range(num_seeds):
            rng_split = np.random.default_rng((seed, 0xC2, i, j))
            val_mask = training.split_by_patient(uni_data.patient_ids,
                                                 val_fraction, rng_split)
            fit_data, val_data = uni_data.subset(~val_mask), uni_data.subset(val_mask)
            shared = set(fit_data.patient_ids) & set(val_data.patient_ids)
            if shared:
                raise RuntimeError(f"split leaked patients: {sorted(shared)[:3]}")
            member_seed = (seed * num_configs + i) * num_seeds + j
            t0 = time.perf_counter()
            model = family.fit(config, fit_data, member_seed)
            try:
                score = family.score(model, val_data)
            except metrics.DegenerateCohort:
                score = -np.inf
            val_scores[i, j] = score
            runs.append(MemberRun(
                config_index=i, seed_index=j, member_seed=member_seed,
                config=config, val_score=float(score),
                wall_time_s=time.perf_counter() - t0,
                train_exam_ids=list(fit_data.exam_ids),
                val_exam_ids=list(val_data.exam_ids), model=model))

    mean_scores = val_scores.mean(axis=1)
    top3 = [int(i) for i in np.argsort(-mean_scores, kind="stable")[:top_k]]
    by_key = {(r.config_index, r.seed_index): r for r in runs}
    members = [(i, j, by_key[(i, j)].model) for i in top3 for j in range(num_seeds)]

    test_predictions = ensemble_member_predictions(family, members, test_data)
    test_score = family.score_predictions(test_predictions, test_data)

    pool_ids = sorted({eid for i, j, _ in members
                       for eid in by_key[(i, j)].val_exam_ids})
    pool_set = set(pool_ids)
    pooled_data = uni_data.subset([e in pool_set for e in uni_data.exam_ids])
    pooled_predictions = ensemble_member_predictions(family, members, pooled_data)

    return SelectionResult(
        universe_percent=float(universe_percent),
        universe_patients=sorted(universe),
        configs=configs, val_scores=val_scores, mean_scores=mean_scores,
        top3=top3, runs=runs, members=members,
        test_predictions=test_predictions, test_score=float(test_score),
        pool_exam_ids=list(pooled_data.exam_ids),
        pooled_predictions=pooled_predictions, pooled_data=pooled_data)


def selection_report_lines(result, family_name, lam=None, test_metrics=None):
    """JSON-lines report: one record per training run, then a summary record
    with the chosen configurations and final test metrics."""
    lines = []
    for r in result.runs:
        lines.append(json.dumps({
            "family": family_name, "config_index": r.config_index,
            "seed_index": r.seed_index,
            "hyperparameters": {k: r.config[k] for k in sorted(r.config)},
            "validation_score": r.val_score,
            "wall_time_s": round(r.wall_time_s, 3),
        }, sort_keys=True))
    final = {
        "final": True, "family": family_name,
        "top3": result.top3,
        "mean_validation_scores": [float(v) for v in result.mean_scores],
        "lambda": None if lam is None else [float(v) for v in lam],
        "test_metrics": test_metrics if test_metrics is not None
        else {"ensemble_score": result.test_score},
    }
    lines.append(json.dumps(final, sort_keys=True))
    return lines
