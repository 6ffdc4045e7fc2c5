"""Late fusion of per-feature detector outputs.

Each of the m detectors contributes a frame-level score matrix.  Aggregation
is a weighted mean of bias-corrected scores,

    fused = sum_k w_k * (y_k - b_k) / sum_k w_k,

with w_k the reciprocal of detector k's mean squared error against the
ground truth, so more accurate detectors dominate.  The fused scores are
binarized with one threshold per event (>= activates).

Bias and threshold values are fitted by deterministic coordinate descent
over fixed grids, scored block-by-block with the segment-based error rate.
The search starts from the neutral point (all biases 0, all thresholds 0.5)
and only ever moves on strict improvement, so the fitted parameters can
never be worse on the fitting data than that default.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .metrics import EventRoll, SegmentCounts, error_rate, segment_counts

MSE_CLAMP = 1e-12
BIAS_GRID = tuple(round(-0.2 + 0.05 * i, 2) for i in range(9))        # -0.2 .. 0.2
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))      # 0.05 .. 0.95
DEFAULT_BIAS = 0.0
DEFAULT_THRESHOLD = 0.5
MAX_SWEEP_ROUNDS = 10
DEFAULT_BLOCK_LEN = 256


@dataclass
class PredictionSet:
    """Aligned frame-level scores from m detectors plus the ground truth."""

    predictions: list[np.ndarray]     # m matrices (frames, events), scores in [0, 1]
    truth: np.ndarray                 # (frames, events) binary
    hop: float
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.predictions:
            raise DataError("need at least one prediction matrix")
        self.truth = np.asarray(self.truth)
        shape = self.truth.shape
        if len(shape) != 2:
            raise ShapeError(f"truth must be 2-d, got {shape}")
        cleaned = []
        for k, p in enumerate(self.predictions):
            p = np.asarray(p, dtype=np.float64)
            if p.shape != shape:
                raise ShapeError(f"prediction {k} has shape {p.shape}, truth has {shape}")
            cleaned.append(p)
        self.predictions = cleaned
        if not np.isin(self.truth, (0, 1)).all():
            raise DataError("ground truth must be binary")
        if not self.labels:
            self.labels = [f"event_{i}" for i in range(shape[1])]

    @property
    def n_models(self) -> int:
        return len(self.predictions)

    @property
    def n_events(self) -> int:
        return self.truth.shape[1]


@dataclass
class FusionParams:
    """Weights, per-detector biases, and per-event activation thresholds."""

    weights: np.ndarray
    biases: np.ndarray
    thresholds: np.ndarray
    block_len: int = DEFAULT_BLOCK_LEN

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise DataError("fusion weights must be positive")
        if np.any((self.biases < -1) | (self.biases > 1)):
            raise DataError("biases must lie in [-1, 1]")
        if np.any((self.thresholds < 0) | (self.thresholds > 1)):
            raise DataError("thresholds must lie in [0, 1]")


def mse_weights(preds: PredictionSet) -> np.ndarray:
    """Reciprocal mean squared error per detector, clamped away from 1/0."""
    truth = preds.truth.astype(np.float64)
    out = np.empty(preds.n_models)
    for k, p in enumerate(preds.predictions):
        mse = float(np.mean((p - truth) ** 2))
        out[k] = 1.0 / max(mse, MSE_CLAMP)
    return out


def fuse(preds: PredictionSet, params: FusionParams) -> np.ndarray:
    """Weighted mean of bias-corrected scores, clamped to [0, 1]."""
    w = params.weights
    if len(w) != preds.n_models:
        raise ShapeError(f"{len(w)} weights for {preds.n_models} prediction matrices")
    if np.any(w <= 0):
        raise DataError("fusion weights must be positive")
    wn = w / w.sum()  # normalizing first keeps m=1 an exact identity
    acc = np.zeros_like(preds.predictions[0])
    for k, p in enumerate(preds.predictions):
        acc += wn[k] * (p - params.biases[k])
    return np.clip(acc, 0.0, 1.0)


def apply_threshold(fused: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Binary activation per event; a score equal to the threshold activates."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (fused.shape[1],):
        raise ShapeError(f"{thresholds.shape} thresholds for {fused.shape[1]} events")
    return (fused >= thresholds[None, :]).astype(np.uint8)


def blockwise_counts(pred_roll: np.ndarray, truth: np.ndarray, hop: float,
                     block_len: int, labels: list[str]) -> SegmentCounts:
    """Segment counts accumulated over contiguous blocks of block_len frames."""
    t_total = truth.shape[0]
    parts = []
    for start in range(0, t_total, block_len):
        stop = min(start + block_len, t_total)
        parts.append(segment_counts(
            EventRoll(truth[start:stop], hop, labels),
            EventRoll(pred_roll[start:stop], hop, labels)))
    return SegmentCounts.merge(parts)


def fitted_error_rate(preds: PredictionSet, params: FusionParams) -> float:
    fused = fuse(preds, params)
    roll = apply_threshold(fused, params.thresholds)
    counts = blockwise_counts(roll, preds.truth, preds.hop, params.block_len, preds.labels)
    return error_rate(counts)


def fit_fusion(preds: PredictionSet, block_len: int = DEFAULT_BLOCK_LEN,
               bias_grid: tuple = BIAS_GRID,
               threshold_grid: tuple = THRESHOLD_GRID) -> FusionParams:
    """Fix weights from reciprocal MSE, then coordinate-search biases and
    thresholds on their grids.

    Sweeps run in a fixed order (each detector's bias, then each event's
    threshold), move only on strict error-rate improvement with ties going
    to the smaller grid value, and stop when a full round changes nothing
    or after MAX_SWEEP_ROUNDS rounds.
    """
    m, n = preds.n_models, preds.n_events
    weights = mse_weights(preds)
    biases = np.full(m, DEFAULT_BIAS)
    thresholds = np.full(n, DEFAULT_THRESHOLD)

    if preds.truth.sum() == 0:
        warnings.warn("ground truth has no active events; returning default fusion parameters")
        return FusionParams(weights, biases, thresholds, block_len)

    def score(b, eta):
        return fitted_error_rate(preds, FusionParams(weights, b, eta, block_len))

    current = score(biases, thresholds)
    for _ in range(MAX_SWEEP_ROUNDS):
        changed = False
        for k in range(m):
            for candidate in bias_grid:
                if candidate == biases[k]:
                    continue
                trial = biases.copy()
                trial[k] = candidate
                er = score(trial, thresholds)
                if er < current:
                    biases, current, changed = trial, er, True
        for e in range(n):
            for candidate in threshold_grid:
                if candidate == thresholds[e]:
                    continue
                trial = thresholds.copy()
                trial[e] = candidate
                er = score(biases, trial)
                if er < current:
                    thresholds, current, changed = trial, er, True
        if not changed:
            break
    return FusionParams(weights, biases, thresholds, block_len)
