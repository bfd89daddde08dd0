"""Evaluation over a prediction interval: RMSE, SMAPE, and Pearson
correlation, per location and averaged unweighted across locations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class LocationMetrics:
    location: int
    count: int
    rmse: float | None
    smape_percent: float | None
    pearson: float | None  # None when undefined (reported as NA)


@dataclass(frozen=True)
class EvalReport:
    """Per-location metrics plus their unweighted means.

    Undefined correlations are excluded from the mean; locations with no
    labeled points contribute to nothing.
    """

    locations: list[LocationMetrics]
    rmse_mean: float | None
    smape_mean: float | None
    pearson_mean: float | None
    count: int

    def to_dict(self) -> dict:
        return {
            "locations": [
                {
                    "location": m.location,
                    "count": m.count,
                    "rmse": m.rmse,
                    "smape_percent": m.smape_percent,
                    "pearson": m.pearson,
                }
                for m in self.locations
            ],
            "rmse_mean": self.rmse_mean,
            "smape_mean": self.smape_mean,
            "pearson_mean": self.pearson_mean,
            "count": self.count,
        }


def _smape_percent(actual: np.ndarray, predicted: np.ndarray) -> float:
    """Mean of |s - p| / (|s| + |p|) in percent; 0/0 terms count as 0.

    The denominator carries no 1/2 factor, so the range is [0, 100].
    """
    num = np.abs(actual - predicted)
    den = np.abs(actual) + np.abs(predicted)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


def _pearson(actual: np.ndarray, predicted: np.ndarray) -> float | None:
    if actual.size < 2:
        return None
    a = actual - actual.mean()
    p = predicted - predicted.mean()
    denom = np.sqrt((a * a).sum() * (p * p).sum())
    if denom == 0.0:
        return None  # zero-variance series: correlation undefined
    return float((a * p).sum() / denom)


def evaluate(predictions, labels, mask, interval: tuple[int, int] | None = None) -> EvalReport:
    """Score predictions against labeled cells.

    All three arrays are (t, n) and row-aligned; ``interval`` optionally
    restricts scoring to rows [start, end). Raises if no labeled cell is
    available anywhere in the scored range.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if preds.shape != labels.shape or preds.shape != mask.shape:
        raise DataError("predictions, labels, and mask must have identical shapes")
    if interval is not None:
        start, end = interval
        preds, labels, mask = preds[start:end], labels[start:end], mask[start:end]
    if not mask.any():
        raise DataError("no ground truth in the evaluation interval")

    rows: list[LocationMetrics] = []
    for i in range(preds.shape[1]):
        sel = mask[:, i]
        count = int(sel.sum())
        if count == 0:
            rows.append(LocationMetrics(i, 0, None, None, None))
            continue
        actual = labels[sel, i]
        predicted = preds[sel, i]
        rmse = float(np.sqrt(((actual - predicted) ** 2).mean()))
        rows.append(
            LocationMetrics(
                location=i,
                count=count,
                rmse=rmse,
                smape_percent=_smape_percent(actual, predicted),
                pearson=_pearson(actual, predicted),
            )
        )

    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        locations=rows,
        rmse_mean=_mean(m.rmse for m in rows),
        smape_mean=_mean(m.smape_percent for m in rows),
        pearson_mean=_mean(m.pearson for m in rows),
        count=int(mask.sum()),
    )


def report_csv_rows(report: EvalReport) -> list[list]:
    """Tabular form: one row per location plus a trailing AVERAGE row."""

    def _cell(v):
        return "NA" if v is None else repr(float(v))

    rows = [["location", "count", "rmse", "smape_percent", "pearson"]]
    for m in report.locations:
        rows.append([m.location, m.count, _cell(m.rmse), _cell(m.smape_percent), _cell(m.pearson)])
    rows.append(
        [
            "AVERAGE",
            report.count,
            _cell(report.rmse_mean),
            _cell(report.smape_mean),
            _cell(report.pearson_mean),
        ]
    )
    return rows
