"""Shared evaluation metrics and report assembly."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = ["MetricReport", "regression_metrics", "coverage", "write_report_json"]


@dataclass
class MetricReport:
    mse: float
    rmse: float
    mae: float
    mbe: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


def regression_metrics(pred: np.ndarray, truth: np.ndarray) -> MetricReport:
    """MSE / RMSE / MAE / MBE with the pred-minus-truth sign convention,
    so a negative MBE means underprediction."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ShapeError("empty inputs")
    err = pred - truth
    mse = float(np.mean(err**2))
    return MetricReport(
        mse=mse,
        rmse=float(np.sqrt(mse)),
        mae=float(np.mean(np.abs(err))),
        mbe=float(np.mean(err)),
    )


def coverage(draws: np.ndarray, lo: float, hi: float) -> float:
    """Fraction of draws inside the closed interval [lo, hi]."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.size == 0:
        raise ShapeError("empty draws")
    if lo > hi:
        raise ShapeError(f"lo must not exceed hi, got [{lo}, {hi}]")
    return float(np.mean((draws >= lo) & (draws <= hi)))


def write_report_json(report: dict, path) -> None:
    """Deterministic JSON emission shared by all evaluate commands."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
