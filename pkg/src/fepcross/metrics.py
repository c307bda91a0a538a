"""Forecast error metrics and deterministic, diff-friendly reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

MAPE_FLOOR = 1e-3


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ConfigError(f"mae: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64)
                                - np.asarray(target, dtype=np.float64))))


def mape(pred: np.ndarray, target: np.ndarray, floor: float = MAPE_FLOOR) -> float:
    """Mean absolute percentage error in percent.

    Entries with |target| below the floor are excluded rather than clipped;
    an all-excluded target is an error, not a zero.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"mape: shape mismatch {pred.shape} vs {target.shape}")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    keep = np.abs(t) >= floor
    if not keep.any():
        raise DataError("mape: every target entry sits below the floor")
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])) * 100.0)


@dataclass(frozen=True)
class MetricReport:
    """One model's errors on one evaluation set; serializes byte-stably."""

    label: str
    mae: float
    mape: float
    horizons: dict[str, dict[str, float]] = field(default_factory=dict)
    n_windows: int = 0
    n_nodes: int = 0
    future_steps: int = 0

    def to_json(self) -> str:
        payload = {
            "label": self.label, "mae": self.mae, "mape": self.mape,
            "horizons": self.horizons, "n_windows": self.n_windows,
            "n_nodes": self.n_nodes, "future_steps": self.future_steps,
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        obj = json.loads(text)
        return MetricReport(**obj)


def evaluate_predictions(label: str, pred: np.ndarray, target: np.ndarray,
                         horizons=(1, 3, 6)) -> MetricReport:
    """Errors over (B, N, T_f) raw-unit predictions, overall and at selected
    1-indexed future steps."""
    if pred.ndim != 3 or pred.shape != target.shape:
        raise ConfigError(f"evaluate_predictions: bad shapes {pred.shape} vs {target.shape}")
    t_f = pred.shape[2]
    per_h = {}
    for h in horizons:
        if not 1 <= h <= t_f:
            raise ConfigError(f"horizon {h} outside 1..{t_f}")
        per_h[str(h)] = {"mae": mae(pred[:, :, h - 1], target[:, :, h - 1]),
                         "mape": mape(pred[:, :, h - 1], target[:, :, h - 1])}
    return MetricReport(label=label, mae=mae(pred, target), mape=mape(pred, target),
                        horizons=per_h, n_windows=pred.shape[0], n_nodes=pred.shape[1],
                        future_steps=t_f)
