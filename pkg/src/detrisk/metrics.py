"""Discrimination, calibration, and uncertainty metrics.

ROC AUC is the Mann-Whitney statistic with ties counted half; PR AUC is
average precision (step integration).  Confidence intervals come from a
percentile bootstrap whose per-iteration RNG is derived from (seed, index),
so iterations are order-independent.  Concordance and decile reliability
operate on deterioration risk curves evaluated at a reference time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class ScoredCohort:
    """Scores and outcomes for one evaluation cohort.

    labels are per-exam binary outcomes for a single horizon.  event_times /
    event_observed / patient_ids are optional extras used by the survival
    metrics and grouped bootstrap.
    """

    scores: np.ndarray
    labels: np.ndarray
    exam_ids: list | None = None
    event_times: np.ndarray | None = None
    event_observed: np.ndarray | None = None
    patient_ids: np.ndarray | None = None


class DegenerateCohort(ValueError):
    """Metric undefined on this sample (single class, no usable pairs, ...)."""


def _validate_binary(scores, labels, name):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"{name}: scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise ValueError(f"{name}: non-finite scores")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError(f"{name}: labels must be 0/1")
    npos = int(labels.sum())
    if npos == 0 or npos == labels.size:
        raise DegenerateCohort(f"{name}: needs both classes, got {npos} positives of {labels.size}")
    return scores, labels


def roc_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    scores, labels = _validate_binary(scores, labels, "roc_auc")
    npos = labels.sum()
    nneg = labels.size - npos
    ranks = rankdata(scores)
    u = ranks[labels == 1.0].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def pr_auc(scores, labels):
    """Average precision: sum over positives of precision at each recall step."""
    scores, labels = _validate_binary(scores, labels, "pr_auc")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    # threshold boundaries: last index of each run of equal scores
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp_t, fp_t = tp[last], fp[last]
    precision = tp_t / (tp_t + fp_t)
    dtp = np.diff(np.concatenate([[0.0], tp_t]))
    return float((precision * dtp).sum() / tp[-1])


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) at each distinct score, plus the all-negative point."""
    scores, labels = _validate_binary(scores, labels, "roc_curve")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tpr = np.concatenate([[0.0], tp[last] / tp[-1]])
    fpr = np.concatenate([[0.0], fp[last] / fp[-1]])
    thresholds = np.concatenate([[np.inf], s[last]])
    return fpr, tpr, thresholds


def pr_curve(scores, labels):
    """(recall, precision, thresholds) at each distinct score."""
    scores, labels = _validate_binary(scores, labels, "pr_curve")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    recall = tp[last] / tp[-1]
    precision = tp[last] / (tp[last] + fp[last])
    return recall, precision, s[last]


def bootstrap_ci(stat_fn, n_items, iterations=1000, seed=0, groups=None, retries=10):
    """Percentile bootstrap of stat_fn over index resamples.

    stat_fn maps an index array into [metric]; the point estimate uses the
    identity index.  groups, when given, resamples whole groups (e.g. all of
    a patient's exams move together).  A resample on which stat_fn raises
    DegenerateCohort is redrawn up to `retries` times, then skipped.
    Iteration i draws from default_rng((seed, i, attempt)) so results do not
    depend on execution order.
    """
    if n_items < 1:
        raise ValueError("bootstrap_ci: empty cohort")
    point = float(stat_fn(np.arange(n_items)))
    if groups is not None:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        members = {g: np.flatnonzero(groups == g) for g in uniq}
    values = []
    for i in range(iterations):
        for attempt in range(retries + 1):
            rng = np.random.default_rng((seed, i, attempt))
            if groups is None:
                idx = rng.integers(0, n_items, size=n_items)
            else:
                chosen = rng.choice(uniq, size=uniq.size, replace=True)
                idx = np.concatenate([members[g] for g in chosen])
            try:
                values.append(float(stat_fn(idx)))
                break
            except DegenerateCohort:
                continue
        # all retries degenerate: skip this iteration
    if not values:
        raise DegenerateCohort("bootstrap_ci: every resample was degenerate")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return point, float(lo), float(hi)


def concordance_at(drc_at_t, event_times, event_observed):
    """Pairwise concordance among observed-event records at one reference time.

    Pairs need distinct event times; the earlier event should carry the
    higher curve value.  Equal curve values count half.
    """
    v = np.asarray(drc_at_t, dtype=np.float64)
    t = np.asarray(event_times, dtype=np.float64)
    obs = np.asarray(event_observed, dtype=bool)
    v, t = v[obs], t[obs]
    if v.size < 2:
        raise DegenerateCohort("concordance_at: fewer than two observed events")
    dt = t[:, None] - t[None, :]
    dv = v[:, None] - v[None, :]
    usable = np.triu(dt != 0.0, k=1)
    n = int(usable.sum())
    if n == 0:
        raise DegenerateCohort("concordance_at: no usable pairs (all event times tied)")
    # concordant when the earlier event has the larger value
    good = (np.sign(dv) == -np.sign(dt)) & usable
    tied = (dv == 0.0) & usable
    return float((good.sum() + 0.5 * tied.sum()) / n)


@dataclass
class ReliabilityRow:
    time_h: float
    decile: int
    count: int
    mean_predicted: float
    event_fraction: float


def reliability_table(drc_matrix, event_times, event_observed, grid_hours):
    """Decile calibration per grid time.

    drc_matrix is (N, len(grid)) predicted cumulative event probabilities.
    Rows are sorted by prediction; the N % 10 leftover records go one each to
    the first deciles.  Empirical rate counts observed events with
    event_time <= t.
    """
    drc_matrix = np.asarray(drc_matrix, dtype=np.float64)
    t_arr = np.asarray(event_times, dtype=np.float64)
    obs = np.asarray(event_observed, dtype=bool)
    n = drc_matrix.shape[0]
    if n < 10:
        raise DegenerateCohort("reliability_table: need at least 10 records")
    base, rem = divmod(n, 10)
    sizes = [base + 1 if d < rem else base for d in range(10)]
    rows = []
    for ti, t in enumerate(grid_hours):
        pred = drc_matrix[:, ti]
        order = np.argsort(pred, kind="stable")
        happened = (obs & (t_arr <= t)).astype(np.float64)
        start = 0
        for d, size in enumerate(sizes):
            sel = order[start:start + size]
            start += size
            rows.append(ReliabilityRow(
                time_h=float(t),
                decile=d + 1,
                count=size,
                mean_predicted=float(pred[sel].mean()),
                event_fraction=float(happened[sel].mean()),
            ))
    return rows


def write_roc_csv(path, scores, labels):
    fpr, tpr, thr = roc_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(fpr, tpr, thr):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


def write_pr_csv(path, scores, labels):
    rec, prec, thr = pr_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision", "threshold"])
        for r, p, th in zip(rec, prec, thr):
            w.writerow([repr(float(r)), repr(float(p)), repr(float(th))])


def write_reliability_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_h", "decile", "count", "mean_predicted", "event_fraction"])
        for r in rows:
            w.writerow([repr(r.time_h), r.decile, r.count, repr(r.mean_predicted), repr(r.event_fraction)])
