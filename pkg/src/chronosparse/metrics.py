"""Mask-aware error metrics with exact streaming aggregation.

Every metric is a ratio of plain sums, so batch states fold and merge by
addition and the streamed result matches the dense computation up to
summation-order rounding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import KindMismatch, NoEvaluablePoints, ShapeMismatch

EPS_DEN = 1e-8


class MetricKind(str, enum.Enum):
    MAE = "MAE"
    MSE = "MSE"
    RMSE = "RMSE"
    MAPE = "MAPE"
    SMAPE = "SMAPE"
    WAPE = "WAPE"

    @classmethod
    def parse(cls, value: "str | MetricKind") -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        try:
            return cls(value.upper())
        except ValueError:
            raise KindMismatch(f"unknown metric kind {value!r}") from None


ALL_KINDS = tuple(MetricKind)


def _check(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape or pred.shape != mask.shape:
        raise ShapeMismatch(f"pred {pred.shape}, truth {truth.shape}, mask {mask.shape} must match")
    return pred, truth, mask


def masked_metric(kind, pred, truth, mask) -> float:
    """Dense evaluation of one metric over mask-true positions."""
    kind = MetricKind.parse(kind)
    pred, truth, mask = _check(pred, truth, mask)
    p, t = pred[mask], truth[mask]
    if kind is MetricKind.MAPE:
        keep = np.abs(t) >= EPS_DEN
        if not keep.any():
            raise NoEvaluablePoints("MAPE: no positions with a non-zero truth value")
        return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])))
    if kind is MetricKind.SMAPE:
        den = np.abs(p) + np.abs(t)
        keep = den >= EPS_DEN
        if not keep.any():
            raise NoEvaluablePoints("SMAPE: no positions with a non-zero denominator")
        return float(np.mean(2.0 * np.abs(p[keep] - t[keep]) / den[keep]))
    if p.size == 0:
        raise NoEvaluablePoints(f"{kind.value}: mask selects no positions")
    err = p - t
    if kind is MetricKind.MAE:
        return float(np.mean(np.abs(err)))
    if kind is MetricKind.MSE:
        return float(np.mean(err**2))
    if kind is MetricKind.RMSE:
        return math.sqrt(float(np.mean(err**2)))
    total = float(np.sum(np.abs(t)))
    if total < EPS_DEN:
        raise NoEvaluablePoints("WAPE: truth magnitudes sum to zero")
    return float(np.sum(np.abs(err))) / total


@dataclass(frozen=True)
class MetricState:
    """Sufficient statistics for one metric kind.

    ``count`` is the number of positions the kind evaluates (for MAPE/SMAPE,
    after excluding near-zero denominators); ``excluded`` counts masked
    positions dropped by that rule.
    """

    kind: MetricKind
    sum_abs_err: float = 0.0
    sum_sq_err: float = 0.0
    sum_ratio: float = 0.0
    sum_sym_ratio: float = 0.0
    sum_abs_true: float = 0.0
    count: int = 0
    excluded: int = 0

    @classmethod
    def zero(cls, kind) -> "MetricState":
        return cls(MetricKind.parse(kind))

    def accumulators(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "kind")


def stream_update(state: MetricState, pred, truth, mask) -> MetricState:
    pred, truth, mask = _check(pred, truth, mask)
    p, t = pred[mask], truth[mask]
    if p.size == 0:
        return state
    abs_err = np.abs(p - t)
    abs_t = np.abs(t)
    n = int(p.size)

    sum_ratio = 0.0
    sum_sym = 0.0
    count = n
    if state.kind is MetricKind.MAPE:
        keep = abs_t >= EPS_DEN
        sum_ratio = float(np.sum(abs_err[keep] / abs_t[keep]))
        count = int(keep.sum())
    elif state.kind is MetricKind.SMAPE:
        den = np.abs(p) + abs_t
        keep = den >= EPS_DEN
        sum_sym = float(np.sum(2.0 * abs_err[keep] / den[keep]))
        count = int(keep.sum())

    return MetricState(
        kind=state.kind,
        sum_abs_err=state.sum_abs_err + float(np.sum(abs_err)),
        sum_sq_err=state.sum_sq_err + float(np.sum(abs_err**2)),
        sum_ratio=state.sum_ratio + sum_ratio,
        sum_sym_ratio=state.sum_sym_ratio + sum_sym,
        sum_abs_true=state.sum_abs_true + float(np.sum(abs_t)),
        count=state.count + count,
        excluded=state.excluded + (n - count),
    )


def stream_merge(a: MetricState, b: MetricState) -> MetricState:
    if a.kind is not b.kind:
        raise KindMismatch(f"cannot merge {a.kind.value} state with {b.kind.value} state")
    return MetricState(
        a.kind,
        a.sum_abs_err + b.sum_abs_err,
        a.sum_sq_err + b.sum_sq_err,
        a.sum_ratio + b.sum_ratio,
        a.sum_sym_ratio + b.sum_sym_ratio,
        a.sum_abs_true + b.sum_abs_true,
        a.count + b.count,
        a.excluded + b.excluded,
    )


def stream_finalize(state: MetricState) -> float:
    kind = state.kind
    if state.count == 0:
        raise NoEvaluablePoints(f"{kind.value}: no evaluable points were accumulated")
    if kind is MetricKind.MAE:
        return state.sum_abs_err / state.count
    if kind is MetricKind.MSE:
        return state.sum_sq_err / state.count
    if kind is MetricKind.RMSE:
        return math.sqrt(state.sum_sq_err / state.count)
    if kind is MetricKind.MAPE:
        return state.sum_ratio / state.count
    if kind is MetricKind.SMAPE:
        return state.sum_sym_ratio / state.count
    if state.sum_abs_true < EPS_DEN:
        raise NoEvaluablePoints("WAPE: truth magnitudes sum to zero")
    return state.sum_abs_err / state.sum_abs_true
