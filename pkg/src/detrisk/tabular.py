"""Clinical-variables model: featurization and gradient-boosted trees.

Vitals, demographics, and lab min/max statistics over a 12-hour lookback
are assembled into a fixed-layout vector with explicit missingness flags
(missing values are NaN, never zero).  The classifier is a from-scratch
gradient-boosted ensemble of regression trees on logistic loss with
learned default directions for missing values, plus a logistic-regression
baseline used for sanity comparisons.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

VITAL_NAMES = (
    "heart_rate",
    "respiratory_rate",
    "temperature",
    "systolic_blood_pressure",
    "diastolic_blood_pressure",
    "oxygen_saturation",
)
DEMOGRAPHIC_NAMES = ("age", "weight", "bmi")
LAB_NAMES = (
    "albumin", "alt", "ast", "total_bilirubin", "blood_urea_nitrogen",
    "calcium", "chloride", "creatinine", "d_dimer", "eosinophils_pct",
    "eosinophils_count", "hematocrit", "ldh", "lymphocytes_pct",
    "lymphocytes_count", "platelet_volume", "neutrophils_count",
    "neutrophils_pct", "platelet_count", "potassium", "procalcitonin",
    "total_protein", "sodium", "troponin",
)
ALL_VARIABLE_NAMES = VITAL_NAMES + DEMOGRAPHIC_NAMES + LAB_NAMES
LOOKBACK_HOURS = 12.0

_VALUE_NAMES = tuple(
    list(VITAL_NAMES) + list(DEMOGRAPHIC_NAMES)
    + [f"{lab}_{stat}" for lab in LAB_NAMES for stat in ("min", "max")]
)
FEATURE_NAMES = _VALUE_NAMES + tuple(f"{n}_missing" for n in _VALUE_NAMES)
NUM_FEATURES = len(FEATURE_NAMES)  # 57 values + 57 flags = 114

CLINICAL_CSV_HEADER = ["patient_id", "timestamp_h", "variable_name", "value"]


class PatientHistory:
    """Long-format measurement store for one patient, sorted by time."""

    def __init__(self, patient_id):
        self.patient_id = patient_id
        self._series = {}

    def add(self, name, timestamp_h, value):
        if name not in ALL_VARIABLE_NAMES:
            raise ValueError(f"unknown clinical variable {name!r}")
        t = float(timestamp_h)
        v = float(value)
        if t < 0.0:
            raise ValueError(f"negative timestamp {t} for {name}")
        if not math.isfinite(v):
            raise ValueError(f"non-finite value for {name} at t={t}")
        self._series.setdefault(name, []).append((t, v))
        self._series[name].sort(key=lambda p: p[0])

    def latest_at_or_before(self, name, t):
        best = None
        for ts, v in self._series.get(name, ()):
            if ts <= t:
                best = v
            else:
                break
        return best

    def window_values(self, name, lo_exclusive, hi_inclusive):
        return [v for ts, v in self._series.get(name, ())
                if lo_exclusive < ts <= hi_inclusive]

    def has_any_vitals_at_or_before(self, t):
        return any(self.latest_at_or_before(n, t) is not None for n in VITAL_NAMES)


def load_clinical_csv(path):
    """Read long-format measurements into per-patient histories."""
    histories = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CLINICAL_CSV_HEADER:
            raise ValueError(f"clinical CSV header {header} != {CLINICAL_CSV_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"line {lineno}: expected 4 columns, got {len(row)}")
            pid, ts, name, value = row
            if pid not in histories:
                histories[pid] = PatientHistory(pid)
            try:
                histories[pid].add(name, ts, value)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    return histories


def featurize(history, reference_time):
    """Fixed-layout vector: vitals at-or-before the reference time,
    demographics, per-lab min/max over the 12-hour lookback, then one
    missingness flag per value.  Missing values are NaN.

    No vitals at or before the reference time means the exam has no
    clinical anchor: the vector comes back fully missing (all flags set).
    """
    values = np.full(len(_VALUE_NAMES), np.nan)
    if history is not None and history.has_any_vitals_at_or_before(reference_time):
        pos = 0
        for name in VITAL_NAMES:
            v = history.latest_at_or_before(name, reference_time)
            if v is not None:
                values[pos] = v
            pos += 1
        for name in DEMOGRAPHIC_NAMES:
            v = history.latest_at_or_before(name, reference_time)
            if v is not None:
                values[pos] = v
            pos += 1
        lo = reference_time - LOOKBACK_HOURS
        for name in LAB_NAMES:
            window = history.window_values(name, lo, reference_time)
            if window:
                values[pos] = min(window)
                values[pos + 1] = max(window)
            pos += 2
    flags = np.isnan(values).astype(np.float64)
    return np.concatenate([values, flags])


# ---------------------------------------------------------------------------
# Gradient-boosted trees
# ---------------------------------------------------------------------------

_LAMBDA = 1.0
_MIN_GAIN = 1e-12


def _sigmoid(m):
    out = np.empty_like(m, dtype=np.float64)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _log_loss(margin, y):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _clamped_logit(rate, n):
    p = min(max(rate, 1.0 / (n + 2.0)), (n + 1.0) / (n + 2.0))
    return math.log(p / (1.0 - p))


def _best_split(x, g, h):
    """Best axis-aligned split of one node.

    Returns (gain, feature, threshold, default_left) or None.  Rows with
    value < threshold go left; NaN rows follow the default direction,
    chosen to maximize gain.  Ties resolve to the lowest feature index,
    then the lowest threshold, then default-left.
    """
    n, nf = x.shape
    if n < 2:
        return None
    order = np.argsort(x, axis=0, kind="stable")  # NaN sorts last
    xs = np.take_along_axis(x, order, axis=0)
    gs = g[order]
    hs = h[order]
    cg = np.cumsum(gs, axis=0)
    ch = np.cumsum(hs, axis=0)
    g_total, h_total = g.sum(), h.sum()
    npres = (~np.isnan(x)).sum(axis=0)
    cols = np.arange(nf)
    last = np.clip(npres - 1, 0, None)
    g_present = np.where(npres > 0, cg[last, cols], 0.0)
    h_present = np.where(npres > 0, ch[last, cols], 0.0)
    g_miss = g_total - g_present
    h_miss = h_total - h_present

    gl, hl = cg[:-1], ch[:-1]                      # left block = first i rows
    gr, hr = g_present - gl, h_present - hl
    counts = np.arange(1, n)[:, None]
    valid = (counts <= (npres - 1)[None, :]) & (xs[1:] > xs[:-1])
    parent = g_total * g_total / (h_total + _LAMBDA)
    # rows past a column's last present value divide by zero here; they are
    # masked to -inf below, so just silence the vectorized warning
    with np.errstate(divide="ignore", invalid="ignore"):
        gain_dl = ((gl + g_miss) ** 2 / (hl + h_miss + _LAMBDA)
                   + gr ** 2 / (hr + _LAMBDA) - parent)
        gain_dr = (gl ** 2 / (hl + _LAMBDA)
                   + (gr + g_miss) ** 2 / (hr + h_miss + _LAMBDA) - parent)
    stacked = np.stack([gain_dl, gain_dr], axis=-1)      # (n-1, nf, 2)
    stacked = np.where(valid[:, :, None], stacked, -np.inf)
    scan = stacked.transpose(1, 0, 2)                    # feature-major order
    flat = int(np.argmax(scan))
    gain = float(scan.reshape(-1)[flat])
    if not np.isfinite(gain) or gain <= _MIN_GAIN:
        return None
    f, rest = divmod(flat, (n - 1) * 2)
    pos, direction = divmod(rest, 2)
    threshold = float((xs[pos + 1, f] + xs[pos, f]) / 2.0)
    return gain, int(f), threshold, direction == 0


@dataclass
class _Tree:
    feature: np.ndarray       # (nodes,) int, -1 for leaves
    threshold: np.ndarray     # (nodes,) float
    default_left: np.ndarray  # (nodes,) bool
    left: np.ndarray          # (nodes,) int, -1 for leaves
    right: np.ndarray         # (nodes,) int
    value: np.ndarray         # (nodes,) float, 0 for internal nodes

    def num_leaves(self):
        return int((self.feature < 0).sum())

    def predict(self, x):
        node = np.zeros(x.shape[0], dtype=int)
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            xv = x[rows, f[rows]]
            nid = node[rows]
            go_left = np.where(np.isnan(xv), self.default_left[nid], xv < self.threshold[nid])
            node[rows] = np.where(go_left, self.left[nid], self.right[nid])
        return self.value[node]


def _grow_tree(x, g, h, max_leaves):
    feature, threshold, default_left = [-1], [math.nan], [True]
    left, right, value = [-1], [-1], [0.0]
    rows = {0: np.arange(x.shape[0])}
    candidates = {0: _best_split(x, g, h)}
    while len(rows) < max_leaves:
        best_id, best = None, None
        for nid in sorted(rows):
            cand = candidates[nid]
            if cand is not None and (best is None or cand[0] > best[0]):
                best_id, best = nid, cand
        if best is None:
            break
        _, f, thr, dleft = best
        r = rows.pop(best_id)
        xv = x[r, f]
        go_left = np.where(np.isnan(xv), dleft, xv < thr)
        lid, rid = len(feature), len(feature) + 1
        feature[best_id], threshold[best_id] = f, thr
        default_left[best_id] = dleft
        left[best_id], right[best_id] = lid, rid
        value[best_id] = 0.0
        for nid, sub in ((lid, r[go_left]), (rid, r[~go_left])):
            feature.append(-1)
            threshold.append(math.nan)
            default_left.append(True)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            rows[nid] = sub
            candidates[nid] = _best_split(x[sub], g[sub], h[sub])
    for nid, r in rows.items():
        value[nid] = float(-g[r].sum() / (h[r].sum() + _LAMBDA))
    return _Tree(np.array(feature), np.array(threshold), np.array(default_left, dtype=bool),
                 np.array(left), np.array(right), np.array(value, dtype=np.float64))


@dataclass
class GbmModel:
    trees: list
    learning_rate: float
    max_leaves: int
    base_score: float
    num_features: int
    seed: int = 0
    warning: str | None = None
    train_losses: list = field(default_factory=list)

    @property
    def num_trees(self):
        return len(self.trees)


def fit_gbm(features, labels, learning_rate=0.1, num_trees=100, max_leaves=8, seed=0):
    """Stagewise logistic-loss boosting.  Each round fits one leaf-wise
    regression tree to the gradient/hessian pairs (g = p - y, h = p(1-p))
    and adds learning_rate times its values to the margin.  Fully
    deterministic; the seed is recorded for provenance only."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"fit_gbm: features {x.shape} vs labels {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("fit_gbm: need at least 2 examples")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("fit_gbm: labels must be binary 0/1")
    if learning_rate <= 0.0:
        raise ValueError("fit_gbm: learning_rate must be positive")
    if num_trees < 0 or max_leaves < 1:
        raise ValueError("fit_gbm: need num_trees >= 0 and max_leaves >= 1")
    n = x.shape[0]
    base = _clamped_logit(float(y.mean()), n)
    model = GbmModel(trees=[], learning_rate=learning_rate, max_leaves=max_leaves,
                     base_score=base, num_features=x.shape[1], seed=seed)
    if y.min() == y.max():
        model.warning = "single-class training set; prior-only model"
        return model
    margin = np.full(n, base)
    for _ in range(num_trees):
        p = _sigmoid(margin)
        tree = _grow_tree(x, p - y, p * (1.0 - p), max_leaves)
        margin = margin + learning_rate * tree.predict(x)
        model.trees.append(tree)
        model.train_losses.append(_log_loss(margin, y))
    return model


def predict_gbm(model, features):
    """sigmoid(base + learning_rate * sum of leaf values); accepts one
    vector or a batch."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != model.num_features:
        raise ValueError(f"predict_gbm: expected {model.num_features} features, got shape {np.asarray(features).shape}")
    margin = np.full(x.shape[0], model.base_score)
    for tree in model.trees:
        margin = margin + model.learning_rate * tree.predict(x)
    p = _sigmoid(margin)
    return float(p[0]) if single else p


def feature_importance(model, feature_names=None):
    """Split counts per feature across all trees, descending (stable by
    feature index within ties)."""
    counts = np.zeros(model.num_features, dtype=int)
    for tree in model.trees:
        for f in tree.feature:
            if f >= 0:
                counts[f] += 1
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(model.num_features)]
    if len(feature_names) != model.num_features:
        raise ValueError("feature_importance: name list length mismatch")
    order = sorted(range(model.num_features), key=lambda i: (-counts[i], i))
    return [(feature_names[i], int(counts[i])) for i in order]


def dump_gbm(model, path):
    """Text persistence: one line per node
    (node_id,feature,threshold,default_direction,left,right,leaf_value)."""
    with open(path, "w") as fh:
        fh.write("gbm v1\n")
        fh.write(f"num_features {model.num_features}\n")
        fh.write(f"learning_rate {model.learning_rate!r}\n")
        fh.write(f"base_score {model.base_score!r}\n")
        fh.write(f"max_leaves {model.max_leaves}\n")
        fh.write(f"seed {model.seed}\n")
        fh.write(f"trees {len(model.trees)}\n")
        for ti, tree in enumerate(model.trees):
            fh.write(f"tree {ti} nodes {len(tree.feature)}\n")
            for i in range(len(tree.feature)):
                d = "L" if tree.default_left[i] else "R"
                fh.write(f"{i},{int(tree.feature[i])},{float(tree.threshold[i])!r},{d},"
                         f"{int(tree.left[i])},{int(tree.right[i])},{float(tree.value[i])!r}\n")


def load_gbm(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "gbm v1":
        raise ValueError(f"not a gbm dump: {path}")

    def header(idx, key, cast):
        parts = lines[idx].split(" ")
        if parts[0] != key:
            raise ValueError(f"gbm dump line {idx + 1}: expected {key!r}")
        return cast(parts[1])

    num_features = header(1, "num_features", int)
    learning_rate = header(2, "learning_rate", float)
    base_score = header(3, "base_score", float)
    max_leaves = header(4, "max_leaves", int)
    seed = header(5, "seed", int)
    num_trees = header(6, "trees", int)
    trees = []
    pos = 7
    for _ in range(num_trees):
        parts = lines[pos].split(" ")
        if parts[0] != "tree" or parts[2] != "nodes":
            raise ValueError(f"gbm dump line {pos + 1}: bad tree header")
        count = int(parts[3])
        pos += 1
        cols = [ln.split(",") for ln in lines[pos:pos + count]]
        if len(cols) != count or any(len(c) != 7 for c in cols):
            raise ValueError(f"gbm dump: truncated tree at line {pos + 1}")
        trees.append(_Tree(
            feature=np.array([int(c[1]) for c in cols]),
            threshold=np.array([float(c[2]) for c in cols]),
            default_left=np.array([c[3] == "L" for c in cols], dtype=bool),
            left=np.array([int(c[4]) for c in cols]),
            right=np.array([int(c[5]) for c in cols]),
            value=np.array([float(c[6]) for c in cols]),
        ))
        pos += count
    return GbmModel(trees=trees, learning_rate=learning_rate, max_leaves=max_leaves,
                    base_score=base_score, num_features=num_features, seed=seed)


# ---------------------------------------------------------------------------
# Logistic-regression baseline
# ---------------------------------------------------------------------------

@dataclass
class LogregModel:
    weights: np.ndarray
    bias: float
    column_means: np.ndarray
    column_stds: np.ndarray
    warning: str | None = None


def fit_logreg(features, labels, l2_weight=1e-4, iterations=500, learning_rate=0.5):
    """Mean-imputed, standardized features; full-batch gradient descent on
    L2-regularized logistic loss.  Zero iterations leave the prior."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"fit_logreg: features {x.shape} vs labels {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("fit_logreg: need at least 2 examples")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("fit_logreg: labels must be binary 0/1")
    n, nf = x.shape
    with np.errstate(invalid="ignore"):
        means = np.nanmean(x, axis=0)
    means = np.where(np.isfinite(means), means, 0.0)
    filled = np.where(np.isnan(x), means, x)
    stds = filled.std(axis=0)
    stds = np.where(stds > 0.0, stds, 1.0)
    z = (filled - means) / stds
    bias = _clamped_logit(float(y.mean()), n)
    w = np.zeros(nf)
    model = LogregModel(weights=w, bias=bias, column_means=means, column_stds=stds)
    if y.min() == y.max():
        model.warning = "single-class training set; prior-only model"
        return model
    for _ in range(iterations):
        p = _sigmoid(z @ w + bias)
        err = p - y
        w = w - learning_rate * (z.T @ err / n + l2_weight * w)
        bias = bias - learning_rate * float(err.mean())
    model.weights, model.bias = w, bias
    return model


def predict_logreg(model, features):
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.shape[1] != model.column_means.shape[0]:
        raise ValueError(f"predict_logreg: expected {model.column_means.shape[0]} features")
    filled = np.where(np.isnan(x), model.column_means, x)
    z = (filled - model.column_means) / model.column_stds
    p = _sigmoid(z @ model.weights + model.bias)
    return float(p[0]) if single else p


def dump_logreg(model, path):
    payload = {
        "format": "logreg v1",
        "weights": [float(v) for v in model.weights],
        "bias": float(model.bias),
        "column_means": [float(v) for v in model.column_means],
        "column_stds": [float(v) for v in model.column_stds],
        "warning": model.warning,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_logreg(path):
    with open(path) as fh:
        raw = json.load(fh)
    if raw.get("format") != "logreg v1":
        raise ValueError(f"{path}: not a saved linear model")
    return LogregModel(
        weights=np.array(raw["weights"], dtype=np.float64),
        bias=float(raw["bias"]),
        column_means=np.array(raw["column_means"], dtype=np.float64),
        column_stds=np.array(raw["column_stds"], dtype=np.float64),
        warning=raw.get("warning"))
