"""Training loops and cohort assembly.

Image models train with Adam on mini-batches of augmented images, score a
held-out patient-level validation slice after every epoch, and keep the
best epoch's parameters.  The tabular side fits one boosted-tree model per
time window.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data, gmic, imaging, metrics, survival, tabular


@dataclass
class ImageCohort:
    exam_ids: list
    patient_ids: list
    images: np.ndarray          # (N, side, side) preprocessed
    y: np.ndarray               # (N, 4) window labels
    survival_labels: list       # N SurvivalLabel
    event_times: np.ndarray     # (N,) hours since exam (event or censor)
    event_observed: np.ndarray  # (N,) bool
    splits: list
    true_risks: np.ndarray | None = None

    def subset(self, mask):
        idx = np.nonzero(np.asarray(mask))[0]
        return ImageCohort(
            exam_ids=[self.exam_ids[i] for i in idx],
            patient_ids=[self.patient_ids[i] for i in idx],
            images=self.images[idx],
            y=self.y[idx],
            survival_labels=[self.survival_labels[i] for i in idx],
            event_times=self.event_times[idx],
            event_observed=self.event_observed[idx],
            splits=[self.splits[i] for i in idx],
            true_risks=None if self.true_risks is None else self.true_risks[idx],
        )

    def split(self, name):
        return self.subset([s == name for s in self.splits])

    def __len__(self):
        return len(self.exam_ids)


def load_image_cohort(manifest_path, side=64):
    """Read a manifest, preprocess every included exam's image, and derive
    labels.  Excluded exams (flag or post-event timing) are dropped."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    records = data.load_manifest(manifest_path)
    kept, images, y, slabels, times, observed, risks = [], [], [], [], [], [], []
    for rec in records:
        labels = data.derive_labels(rec)
        if labels is None:
            continue
        raw = imaging.read_pgm(os.path.join(root, rec.image_path))
        images.append(imaging.preprocess(raw, side))
        kept.append(rec)
        y.append(labels.y)
        slabels.append(labels.survival)
        if labels.survival.event_observed:
            times.append(rec.event_time_h - rec.exam_time_h)
            observed.append(True)
        else:
            times.append(rec.censor_time_h - rec.exam_time_h)
            observed.append(False)
        risks.append(np.nan if rec.true_risk is None else rec.true_risk)
    risks = np.array(risks)
    return ImageCohort(
        exam_ids=[r.exam_id for r in kept],
        patient_ids=[r.patient_id for r in kept],
        images=np.stack(images) if images else np.zeros((0, side, side)),
        y=np.stack(y) if y else np.zeros((0, len(data.HORIZONS_H))),
        survival_labels=slabels,
        event_times=np.array(times),
        event_observed=np.array(observed, dtype=bool),
        splits=[r.split for r in kept],
        true_risks=None if np.all(np.isnan(risks)) else risks,
    )


def tabular_features(manifest_path, clinical_path, records=None):
    """Feature matrix aligned with the manifest's included exams."""
    histories = tabular.load_clinical_csv(clinical_path)
    if records is None:
        records = data.load_manifest(manifest_path)
    rows = []
    for rec in records:
        if data.derive_labels(rec) is None:
            continue
        rows.append(tabular.featurize(histories.get(rec.patient_id), rec.exam_time_h))
    return np.stack(rows) if rows else np.zeros((0, tabular.NUM_FEATURES))


def split_by_patient(patient_ids, holdout_fraction, rng):
    """Boolean mask: True = holdout.  Whole patients move together."""
    unique = sorted(set(patient_ids))
    k = int(round(holdout_fraction * len(unique)))
    if len(unique) >= 2:
        k = min(max(k, 1), len(unique) - 1)
    chosen = set(list(rng.permutation(unique))[:k])
    return np.array([p in chosen for p in patient_ids])


def classifier_score(scores, labels):
    """Mean over windows of (AUC + PR AUC)/2, skipping degenerate windows."""
    vals = []
    for t in range(labels.shape[1]):
        try:
            vals.append(0.5 * (metrics.roc_auc(scores[:, t], labels[:, t])
                               + metrics.pr_auc(scores[:, t], labels[:, t])))
        except metrics.DegenerateCohort:
            continue
    if not vals:
        raise metrics.DegenerateCohort("no window has both classes")
    return float(np.mean(vals))


def predict_image_model(model, images, batch_size=16):
    """Fusion-head outputs for a stack of images, in batches."""
    outs = []
    for start in range(0, images.shape[0], batch_size):
        outs.append(model.predict(images[start:start + batch_size]))
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.cfg.num_windows))


def predict_drc_curves(model, images, batch_size=16):
    """(N, 8) cumulative risk curves from the fusion head."""
    cond = predict_image_model(model, images, batch_size)
    return survival.drc_from_conditionals(cond)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_score: float


@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_val_score: float
    history: list = field(default_factory=list)


def _augmented_batch(images, policy, counters):
    if policy is None:
        return images
    return np.stack([imaging.augment(img, policy, int(c))
                     for img, c in zip(images, counters)])


def _run_image_training(model, cohort, loss_fn, val_score_fn, learning_rate,
                        epochs, batch_size, seed, val_fraction, augment_policy):
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng((seed, 0xA0))
    val_mask = split_by_patient(cohort.patient_ids, val_fraction, rng)
    train, val = cohort.subset(~val_mask), cohort.subset(val_mask)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training requires a non-empty train and validation slice")
    params = model.params
    opt = ad.Adam(params, learning_rate=learning_rate)
    policy = None
    if augment_policy is not None:
        policy = imaging.AugmentPolicy(
            flip_probability=augment_policy.flip_probability,
            rotation_degrees=augment_policy.rotation_degrees,
            max_translation_fraction=augment_policy.max_translation_fraction,
            seed=int(np.random.default_rng((seed, 0xA6)).integers(2 ** 31)),
        )
    best_state = {k: v.data.copy() for k, v in params.items()}
    best_score, best_epoch = -np.inf, 0
    history = []
    draw_counter = 0
    n = len(train)
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng((seed, 0xE0, epoch)).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            counters = np.arange(draw_counter, draw_counter + len(idx))
            draw_counter += len(idx)
            batch = _augmented_batch(train.images[idx], policy, counters)
            loss = loss_fn(model, batch, idx, train)
            opt.step(ad.grad(loss, params))
            losses.append(float(loss.data))
        try:
            score = val_score_fn(model, val)
        except metrics.DegenerateCohort:
            score = -np.inf
        history.append(EpochStats(epoch=epoch, train_loss=float(np.mean(losses)),
                                  val_score=score))
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = {k: v.data.copy() for k, v in params.items()}
    for k, p in params.items():
        p.data = best_state[k]
    return TrainResult(model=model, best_epoch=best_epoch,
                       best_val_score=float(best_score), history=history)


def train_gmic(cohort, cfg=None, learning_rate=2e-3, epochs=8, batch_size=8,
               seed=0, val_fraction=0.2, augment_policy=imaging.IDENTITY_POLICY):
    """Train the 4-window classifier; returns the best-epoch model."""
    cfg = cfg if cfg is not None else gmic.GmicConfig(seed=seed)
    model = gmic.GmicModel(cfg)

    def loss_fn(m, batch, idx, train):
        return gmic.gmic_loss(train.y[idx], m.forward(batch), cfg.sparsity_weight)

    def val_score_fn(m, val):
        return classifier_score(predict_image_model(m, val.images), val.y)

    return _run_image_training(model, cohort, loss_fn, val_score_fn, learning_rate,
                               epochs, batch_size, seed, val_fraction, augment_policy)


def train_drc(cohort, cfg=None, learning_rate=1.25e-4, epochs=8, batch_size=8,
              seed=0, val_fraction=0.2, augment_policy=imaging.IDENTITY_POLICY):
    """Train the 9-channel risk-curve model.

    The per-epoch validation score is the negated mean survival likelihood
    of the fusion head — a proper scoring rule, so the kept epoch is the
    best-calibrated one, not merely the best-ranked one."""
    cfg = cfg if cfg is not None else gmic.drc_config(seed=seed)
    model = gmic.GmicModel(cfg)

    def loss_fn(m, batch, idx, train):
        labels = [train.survival_labels[i] for i in idx]
        return gmic.drc_loss(labels, m.forward(batch), cfg.sparsity_weight)

    def val_score_fn(m, val):
        cond = predict_image_model(m, val.images)
        return -float(np.mean([survival.nll(lab, c)
                               for lab, c in zip(val.survival_labels, cond)]))

    return _run_image_training(model, cohort, loss_fn, val_score_fn, learning_rate,
                               epochs, batch_size, seed, val_fraction, augment_policy)


def train_window_gbms(features, y, learning_rate=0.1, num_trees=200,
                      max_leaves=8, seed=0):
    """One boosted-tree model per time window."""
    return [tabular.fit_gbm(features, y[:, t], learning_rate=learning_rate,
                            num_trees=num_trees, max_leaves=max_leaves, seed=seed)
            for t in range(y.shape[1])]


def predict_window_gbms(models, features):
    return np.stack([tabular.predict_gbm(m, features) for m in models], axis=1)


def train_window_logregs(features, y, l2_weight=1e-4, iterations=500):
    return [tabular.fit_logreg(features, y[:, t], l2_weight=l2_weight,
                               iterations=iterations) for t in range(y.shape[1])]


def predict_window_logregs(models, features):
    return np.stack([tabular.predict_logreg(m, features) for m in models], axis=1)
