"""Cohort manifests, label derivation, and synthetic data generation.

A manifest row ties an exam image to its patient, timing, outcome, and
train/test split.  Label derivation turns absolute times into per-window
binary targets and a discrete survival label.  The synthetic generator
builds a fully deterministic cohort with known latent risk: blob area in
the image encodes risk, clinical variables are noisy monotone transforms
of it, and outcomes are drawn from a risk-conditioned discrete hazard —
so every downstream metric has a computable ground truth.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import imaging, survival, tabular

HORIZONS_H = (24.0, 48.0, 72.0, 96.0)

MANIFEST_FIELDS = ["exam_id", "patient_id", "image_path", "exam_time_h",
                   "event_time_h", "censor_time_h", "split", "exclude"]
RISK_FIELD = "true_risk"


@dataclass(frozen=True)
class ExamRecord:
    exam_id: str
    patient_id: str
    image_path: str
    exam_time_h: float
    event_time_h: float | None
    censor_time_h: float
    split: str
    exclude: bool = False
    true_risk: float | None = None


@dataclass(frozen=True)
class ExamLabels:
    """Per-window binary targets plus the discrete survival label."""
    y: np.ndarray                     # (4,) floats in {0, 1}
    survival: survival.SurvivalLabel


def derive_labels(record, grid=survival.TIME_GRID_HOURS):
    """Targets for one exam, or None when the exam is excluded.

    Exams flagged `exclude` or taken at/after the adverse event are out.
    For the rest, y^w = 1 iff the event falls within w hours of the exam;
    the survival label is built from exam-relative times.
    """
    if record.exclude:
        return None
    if record.event_time_h is not None:
        if record.event_time_h < 0.0:
            raise ValueError(f"exam {record.exam_id}: negative event time {record.event_time_h}")
        if record.exam_time_h >= record.event_time_h:
            return None
        rel_event = record.event_time_h - record.exam_time_h
        y = np.array([1.0 if rel_event <= w else 0.0 for w in HORIZONS_H])
        label = survival.to_label(rel_event, None, grid)
        return ExamLabels(y=y, survival=label)
    rel_censor = record.censor_time_h - record.exam_time_h
    if rel_censor < 0.0:
        raise ValueError(f"exam {record.exam_id}: censored before the exam")
    label = survival.to_label(None, rel_censor, grid)
    return ExamLabels(y=np.zeros(len(HORIZONS_H)), survival=label)


def _parse_bool(text, where):
    if text in ("0", "1"):
        return text == "1"
    raise ValueError(f"{where}: exclude must be 0 or 1, got {text!r}")


def load_manifest(path):
    """Read and validate a manifest CSV.

    Enforces unique exam ids and patient-level split consistency: a patient
    never appears in both train and test.
    """
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (MANIFEST_FIELDS, MANIFEST_FIELDS + [RISK_FIELD]):
            raise ValueError(f"manifest header {header} != {MANIFEST_FIELDS} (+ optional {RISK_FIELD})")
        has_risk = header[-1] == RISK_FIELD
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"manifest line {lineno}: {len(row)} columns, expected {len(header)}")
            (exam_id, patient_id, image_path, exam_t, event_t, censor_t, split, exclude) = row[:8]
            if split not in ("train", "test"):
                raise ValueError(f"manifest line {lineno}: split {split!r} not train/test")
            try:
                record = ExamRecord(
                    exam_id=exam_id, patient_id=patient_id, image_path=image_path,
                    exam_time_h=float(exam_t),
                    event_time_h=float(event_t) if event_t != "" else None,
                    censor_time_h=float(censor_t), split=split,
                    exclude=_parse_bool(exclude, f"manifest line {lineno}"),
                    true_risk=float(row[8]) if has_risk and row[8] != "" else None,
                )
            except ValueError as exc:
                raise ValueError(f"manifest line {lineno}: {exc}") from None
            if record.exam_time_h < 0.0 or record.censor_time_h < 0.0:
                raise ValueError(f"manifest line {lineno}: negative timestamp")
            records.append(record)
    seen = set()
    for r in records:
        if r.exam_id in seen:
            raise ValueError(f"duplicate exam_id {r.exam_id!r}")
        seen.add(r.exam_id)
    patient_split = {}
    for r in records:
        prev = patient_split.setdefault(r.patient_id, r.split)
        if prev != r.split:
            raise ValueError(f"patient {r.patient_id!r} appears in both splits")
    return records


def write_manifest(records, path):
    with_risk = any(r.true_risk is not None for r in records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS + ([RISK_FIELD] if with_risk else []))
        for r in records:
            row = [r.exam_id, r.patient_id, r.image_path, repr(float(r.exam_time_h)),
                   "" if r.event_time_h is None else repr(float(r.event_time_h)),
                   repr(float(r.censor_time_h)), r.split, "1" if r.exclude else "0"]
            if with_risk:
                row.append("" if r.true_risk is None else repr(float(r.true_risk)))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_patients: int = 2000
    image_side: int = 64
    blob_rate: float = 1.5          # extra blobs beyond the first ~ Poisson
    area_base: float = 40.0         # blob area in px^2 at risk 0
    area_slope: float = 380.0       # added area per unit risk
    # staircase hazard: interval i fires once risk crosses 0.5 - a_i / slope,
    # so the event interval is a nearly deterministic step function of risk
    hazard_anchors: tuple = (-8.0, -6.8, -5.6, -4.4, -3.2, -2.0, 0.0, 2.0)
    hazard_slope: float = 20.0
    tabular_mix: float = 0.0        # risk = (1-mix)*u_image + mix*u_tabular
    tabular_noise: float = 0.15
    lab_missing_rate: float = 0.2
    exam_time_h: float = 12.0
    censor_time_h: float = 240.0
    seed: int = 0

    def __post_init__(self):
        if self.num_patients < 2:
            raise ValueError("num_patients must be >= 2")
        if self.image_side < 16:
            raise ValueError("image_side must be >= 16")
        if len(self.hazard_anchors) != survival.NUM_INTERVALS:
            raise ValueError(f"need {survival.NUM_INTERVALS} hazard anchors")
        if not 0.0 <= self.tabular_mix <= 1.0:
            raise ValueError("tabular_mix outside [0, 1]")
        if not 0.0 <= self.lab_missing_rate < 1.0:
            raise ValueError("lab_missing_rate outside [0, 1)")
        if self.censor_time_h <= self.exam_time_h:
            raise ValueError("censor time must exceed exam time")


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def hazard_probabilities(spec, risk):
    """Per-interval conditional event probabilities for a given latent risk."""
    return np.array([_sigmoid(a + spec.hazard_slope * (risk - 0.5))
                     for a in spec.hazard_anchors])


def true_drc(spec, risk):
    """Ground-truth deterioration risk curve implied by the hazard."""
    return survival.drc_from_conditionals(hazard_probabilities(spec, risk))


def sample_event_interval(rng, spec, risk):
    """Draw the 1-based event interval, or None if the patient survives the
    whole grid."""
    for i, p in enumerate(hazard_probabilities(spec, risk), start=1):
        if rng.random() < p:
            return i
    return None


def _blob_image(rng, side, risk, spec):
    """Noise floor plus Gaussian blobs whose combined area tracks risk.

    Blobs land in distinct quadrants with small jitter and near-constant
    peak amplitude, so the visible bright area stays an almost noise-free
    monotone readout of the latent risk after min-max normalization.
    """
    img = rng.uniform(0.02, 0.08, size=(side, side))
    count = min(1 + int(rng.poisson(spec.blob_rate)), 4)
    weights = rng.uniform(0.8, 1.0, size=count)
    weights /= weights.sum()
    target_area = spec.area_base + spec.area_slope * risk
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    rng.shuffle(cells)
    yy, xx = np.mgrid[0:side, 0:side]
    half = side / 2.0
    for w, (ci, cj) in zip(weights, cells):
        sigma = math.sqrt(w * target_area / (2.0 * math.pi))
        cy = ci * half + half / 2.0 + rng.uniform(-4.0, 4.0)
        cx = cj * half + half / 2.0 + rng.uniform(-4.0, 4.0)
        amp = rng.uniform(0.92, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    return img / img.max()


_VITAL_MAPS = {
    "heart_rate": (70.0, 50.0),
    "respiratory_rate": (14.0, 14.0),
    "temperature": (97.5, 4.0),
    "systolic_blood_pressure": (150.0, -50.0),
    "diastolic_blood_pressure": (85.0, -20.0),
    "oxygen_saturation": (99.0, -10.0),
}
_DEMO_MAPS = {"age": (40.0, 35.0), "weight": (60.0, 40.0), "bmi": (22.0, 12.0)}


def _noisy_risk(rng, risk, noise):
    return min(max(risk + noise * rng.standard_normal(), 0.0), 1.0)


def _clinical_rows(rng, patient_id, risk, spec):
    rows = []
    for name, (base, slope) in _DEMO_MAPS.items():
        rows.append((patient_id, 0.0, name, base + slope * _noisy_risk(rng, risk, spec.tabular_noise)))
    for name, (base, slope) in _VITAL_MAPS.items():
        rows.append((patient_id, spec.exam_time_h, name,
                     base + slope * _noisy_risk(rng, risk, spec.tabular_noise)))
    for j, name in enumerate(tabular.LAB_NAMES):
        if rng.random() < spec.lab_missing_rate:
            continue
        count = 1 + int(rng.integers(0, 3))
        direction = 1.0 if j % 2 == 0 else -1.0
        base = 10.0 + 3.0 * j
        for _ in range(count):
            t = rng.uniform(spec.exam_time_h - 8.0, spec.exam_time_h)
            noisy = _noisy_risk(rng, risk, spec.tabular_noise)
            rows.append((patient_id, t, name, base * (1.0 + 0.5 * direction * noisy)))
    return rows


def generate_synthetic(spec, out_dir):
    """Write images/, manifest.csv, clinical.csv, and generator.json.

    Per-patient RNG streams are keyed by (seed, index), so output is
    byte-identical for a fixed spec regardless of generation order.
    Returns the manifest records.
    """
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    grid = survival.TIME_GRID_HOURS
    records = []
    clinical = []
    for i in range(spec.num_patients):
        rng = np.random.default_rng((spec.seed, i))
        u_img = rng.uniform()
        u_tab = rng.uniform()
        risk = (1.0 - spec.tabular_mix) * u_img + spec.tabular_mix * u_tab
        patient_id = f"p{i:05d}"
        exam_id = f"e{i:05d}"
        image = _blob_image(rng, spec.image_side, u_img, spec)
        path = os.path.join(img_dir, f"{exam_id}.pgm")
        imaging.write_pgm(path, np.rint(image * imaging.PGM_MAXVAL).astype(np.uint16))
        interval = sample_event_interval(rng, spec, risk)
        if interval is None:
            event_time = None
        else:
            lo = 0.0 if interval == 1 else grid[interval - 2]
            hi = grid[interval - 1]
            event_time = spec.exam_time_h + rng.uniform(lo, hi)
        clinical.extend(_clinical_rows(rng, patient_id, risk, spec))
        records.append(ExamRecord(
            exam_id=exam_id, patient_id=patient_id,
            image_path=os.path.join("images", f"{exam_id}.pgm"),
            exam_time_h=spec.exam_time_h, event_time_h=event_time,
            censor_time_h=spec.censor_time_h,
            split="train" if i < spec.num_patients // 2 else "test",
            exclude=False, true_risk=risk,
        ))
    write_manifest(records, os.path.join(out_dir, "manifest.csv"))
    clinical.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(os.path.join(out_dir, "clinical.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(tabular.CLINICAL_CSV_HEADER)
        for pid, t, name, value in clinical:
            writer.writerow([pid, repr(float(t)), name, repr(float(value))])
    meta = asdict(spec)
    meta["hazard_anchors"] = list(meta["hazard_anchors"])
    meta["time_grid_hours"] = list(grid)
    with open(os.path.join(out_dir, "generator.json"), "w") as fh:
        json.dump(meta, fh, indent=0, sort_keys=True)
        fh.write("\n")
    return records
