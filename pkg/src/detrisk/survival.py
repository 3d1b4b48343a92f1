"""Discrete-time survival machinery for deterioration risk curves.

Time is partitioned by a fixed grid of boundaries (hours since the exam).
The model predicts conditional event probabilities p_i = P(T <= t_i | T >
t_{i-1}); chaining their complements gives the cumulative deterioration
risk curve DRC(t_i) = 1 - prod_{j<=i} (1 - p_j).

The conditional vector carries one extra trailing entry for events beyond
the last boundary; it never enters the likelihood and exists so saliency
regularization touches every output channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TIME_GRID_HOURS = (3.0, 12.0, 24.0, 48.0, 72.0, 96.0, 144.0, 192.0)
NUM_INTERVALS = len(TIME_GRID_HOURS)
NUM_CHANNELS = NUM_INTERVALS + 1  # trailing beyond-grid channel

_CLAMP = 1e-12


@dataclass(frozen=True)
class SurvivalLabel:
    """Either an observed event in interval `interval_index` (1-based), or a
    censoring at grid index `censor_index` (0 = censored before the first
    boundary, contributing nothing)."""

    event_observed: bool
    interval_index: int | None = None
    censor_index: int | None = None

    def __post_init__(self):
        if self.event_observed:
            if not (self.interval_index and 1 <= self.interval_index <= NUM_INTERVALS):
                raise ValueError(f"event interval_index {self.interval_index} outside 1..{NUM_INTERVALS}")
        else:
            if self.censor_index is None or not 0 <= self.censor_index <= NUM_INTERVALS:
                raise ValueError(f"censor_index {self.censor_index} outside 0..{NUM_INTERVALS}")


def to_label(event_time_hours, censor_time_hours, grid=TIME_GRID_HOURS):
    """Map (event, censor) times in hours since the exam onto the grid.

    An observed event falls in the first interval whose right boundary is >=
    the event time (boundaries belong to their interval).  Events beyond the
    last boundary are censored at the full grid.  Without an event, the
    censor index is the last boundary at or before the censor time.
    """
    grid = tuple(grid)
    if event_time_hours is not None:
        if event_time_hours <= 0.0:
            raise ValueError(f"to_label: event time {event_time_hours} must be positive")
        for i, t in enumerate(grid):
            if event_time_hours <= t:
                return SurvivalLabel(True, interval_index=i + 1)
        return SurvivalLabel(False, censor_index=len(grid))
    if censor_time_hours is None or censor_time_hours < 0.0:
        raise ValueError(f"to_label: bad censor time {censor_time_hours}")
    idx = 0
    for i, t in enumerate(grid):
        if censor_time_hours >= t:
            idx = i + 1
    return SurvivalLabel(False, censor_index=idx)


def drc_from_conditionals(p):
    """Chain conditionals into the cumulative curve: 1 - prod(1 - p_j)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] not in (NUM_INTERVALS, NUM_CHANNELS):
        raise ValueError(f"drc_from_conditionals: last axis {p.shape[-1]}, expected {NUM_INTERVALS} or {NUM_CHANNELS}")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("drc_from_conditionals: conditionals outside [0,1]")
    q = 1.0 - p[..., :NUM_INTERVALS]
    return 1.0 - np.cumprod(q, axis=-1)


def nll(label, p):
    """Negative log-likelihood of one record under conditional vector p.

    Event in interval i:   -sum_{j<i} ln(1-p_j) - ln p_i
    Censored at index c:   -sum_{j<=c} ln(1-p_j)   (zero when c == 0)
    Probabilities are clamped to [1e-12, 1-1e-12].
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape not in ((NUM_INTERVALS,), (NUM_CHANNELS,)):
        raise ValueError(f"nll: expected a conditional vector, got shape {p.shape}")
    pc = np.clip(p[:NUM_INTERVALS], _CLAMP, 1.0 - _CLAMP)
    if label.event_observed:
        i = label.interval_index
        return float(-np.log(1.0 - pc[: i - 1]).sum() - np.log(pc[i - 1]))
    return float(-np.log(1.0 - pc[: label.censor_index]).sum())


def survival_masks(labels):
    """Constant masks for the batched likelihood.

    Returns (survive, event) 0/1 arrays of shape (N, NUM_INTERVALS):
    survive[n, j] marks a -ln(1-p_j) term, event[n, j] a -ln(p_j) term.
    """
    n = len(labels)
    survive = np.zeros((n, NUM_INTERVALS))
    event = np.zeros((n, NUM_INTERVALS))
    for k, lab in enumerate(labels):
        if lab.event_observed:
            survive[k, : lab.interval_index - 1] = 1.0
            event[k, lab.interval_index - 1] = 1.0
        else:
            survive[k, : lab.censor_index] = 1.0
    return survive, event


def nll_tensor(labels, p_hat):
    """Batched likelihood as an autodiff node.

    p_hat is (N, NUM_CHANNELS) or (N, NUM_INTERVALS); the beyond-grid
    channel is dropped.  Returns the per-record NLL vector (N,).
    """
    if p_hat.data.shape[1] == NUM_CHANNELS:
        p_hat = ad.narrow(p_hat, 1, 0, NUM_INTERVALS)
    elif p_hat.data.shape[1] != NUM_INTERVALS:
        raise ValueError(f"nll_tensor: got {p_hat.data.shape[1]} channels")
    survive, event = survival_masks(labels)
    pc = ad.clip(p_hat, _CLAMP, 1.0 - _CLAMP)
    log_p = ad.log(pc)
    log_q = ad.log(ad.add(1.0, ad.mul(pc, -1.0)))
    terms = ad.add(ad.mul(ad.Tensor(-survive), log_q), ad.mul(ad.Tensor(-event), log_p))
    return ad.sum_(terms, axis=1)


def interval_event_counts(labels):
    """(events per interval, at-risk per interval) over a label cohort.

    A record is at risk in interval j if it contributes any factor with
    index j: events with interval >= j+1, censorings with index >= j+1.
    """
    events = np.zeros(NUM_INTERVALS)
    at_risk = np.zeros(NUM_INTERVALS)
    for lab in labels:
        if lab.event_observed:
            events[lab.interval_index - 1] += 1
            at_risk[: lab.interval_index] += 1
        else:
            at_risk[: lab.censor_index] += 1
    return events, at_risk


def closed_form_mle(labels):
    """Per-interval events / at-risk ratio, the NLL minimizer for a shared
    conditional vector.  Intervals nobody reaches get probability 0."""
    events, at_risk = interval_event_counts(labels)
    with np.errstate(invalid="ignore"):
        p = np.where(at_risk > 0, events / np.maximum(at_risk, 1.0), 0.0)
    return p
