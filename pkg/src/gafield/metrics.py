"""Field-error metrics averaged over samples, and their report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np


class UndefinedMetricError(ArithmeticError):
    """A metric's denominator is zero (all-zero target, or constant target for R^2)."""


def _pair(pred, y):
    pred = np.asarray(pred, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {y.shape}")
    if y.size == 0:
        raise ValueError("metrics need at least one value")
    return pred, y


def mse(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.mean((pred - y) ** 2))


def mae(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.mean(np.abs(pred - y)))


def maxae(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.max(np.abs(pred - y)))


def r2(pred, y) -> float:
    pred, y = _pair(pred, y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 is undefined for a constant target")
    return 1.0 - float(np.sum((pred - y) ** 2)) / ss_tot


def rel_l2(pred, y) -> float:
    pred, y = _pair(pred, y)
    den = float(np.linalg.norm(y))
    if den == 0.0:
        raise UndefinedMetricError("relative L2 is undefined for an all-zero target")
    return float(np.linalg.norm(pred - y)) / den


def rel_l1(pred, y) -> float:
    pred, y = _pair(pred, y)
    den = float(np.sum(np.abs(y)))
    if den == 0.0:
        raise UndefinedMetricError("relative L1 is undefined for an all-zero target")
    return float(np.sum(np.abs(pred - y))) / den


METRICS = {"mse": mse, "mae": mae, "maxae": maxae, "r2": r2, "rel_l2": rel_l2, "rel_l1": rel_l1}


@dataclass
class MetricReport:
    mse: float
    mae: float
    maxae: float
    r2: float
    rel_l2: float
    rel_l1: float
    sample_count: int
    channel: str = "all"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_csv(self) -> str:
        return reports_to_csv([self])

    def table(self) -> str:
        return reports_table([self])


def _field_values(pred, y, mode: str):
    pred, y = np.asarray(pred, dtype=float), np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {y.shape}")
    if mode == "magnitude":
        if pred.ndim == 1 or pred.shape[1] == 1:
            return {"all": (pred.reshape(-1), y.reshape(-1))}
        return {"magnitude": (np.linalg.norm(pred, axis=1), np.linalg.norm(y, axis=1))}
    if mode == "components":
        pred, y = pred.reshape(len(pred), -1), y.reshape(len(y), -1)
        names = "xyz" if pred.shape[1] == 3 else [str(k) for k in range(pred.shape[1])]
        return {f"c{n}": (pred[:, k], y[:, k]) for k, n in enumerate(names)}
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(preds, targets, mode: str = "magnitude") -> list[MetricReport]:
    """Per-sample metrics averaged over samples.

    ``mode="magnitude"`` scores vector fields by their per-point L2 norm
    (scalars pass through); ``mode="components"`` gives one report per channel.
    """
    preds, targets = list(preds), list(targets)
    if len(preds) != len(targets) or not preds:
        raise ValueError("need the same non-zero number of predictions and targets")
    per_channel: dict[str, list[dict]] = {}
    for p, y in zip(preds, targets):
        for ch, (a, b) in _field_values(p, y, mode).items():
            per_channel.setdefault(ch, []).append({k: f(a, b) for k, f in METRICS.items()})
    out = []
    for ch, rows in per_channel.items():
        mean = {k: math.fsum(r[k] for r in rows) / len(rows) for k in METRICS}
        out.append(MetricReport(**mean, sample_count=len(rows), channel=ch))
    return out


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    cols = [f.name for f in fields(MetricReport)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in reports:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
    return buf.getvalue()


def reports_table(reports) -> str:
    head = f"{'channel':<10} {'MSE':>11} {'MAE':>11} {'MaxAE':>11} {'R2':>9} {'RelL2':>8} {'RelL1':>8} {'n':>4}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.channel:<10} {r.mse:11.4e} {r.mae:11.4e} {r.maxae:11.4e} {r.r2:9.4f} "
                     f"{100 * r.rel_l2:7.2f}% {100 * r.rel_l1:7.2f}% {r.sample_count:4d}")
    return "\n".join(lines)
