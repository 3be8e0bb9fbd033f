"""Accuracy and calibration metrics, and the CSV record they are reported in."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields

import numpy as np

Z95 = 1.959963984540054


def rel_l2(pred, truth):
    """Per-sample ``||pred - truth|| / ||truth||`` over all but the first axis."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p = pred.reshape(len(pred), -1)
    t = truth.reshape(len(truth), -1)
    num = np.linalg.norm(p - t, axis=1)
    den = np.linalg.norm(t, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    return out


def coverage_95(mean, variance, truth):
    """Fraction of points whose true value lies within ``mean +- 1.96 sd``."""
    mean, variance, truth = (np.asarray(x, dtype=np.float64) for x in (mean, variance, truth))
    if np.any(variance < 0):
        raise ValueError("variances must be non-negative")
    half = Z95 * np.sqrt(variance)
    return float(np.mean(np.abs(truth - mean) <= half))


@dataclass
class MetricsRecord:
    dataset: str
    n_train: int
    grid_size: int
    inducing: int
    neighbors: int
    rel_l2_mean: float
    rel_l2_std: float
    coverage_95: float
    epoch_wall_seconds_mean: float
    peak_bytes: int
    peak_rss_bytes: int
    seed: int
    status: str = "ok"

    def __post_init__(self):
        if self.status == "ok":
            if not self.rel_l2_mean >= 0:
                raise ValueError("rel_l2 must be non-negative")
            if not 0.0 <= self.coverage_95 <= 1.0:
                raise ValueError("coverage must lie in [0, 1]")


METRICS_HEADER = tuple(f.name for f in fields(MetricsRecord))


def _cell(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([_cell(v) for v in astuple(r)])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"metrics header must be {','.join(METRICS_HEADER)}")
    out = []
    for row in rows[1:]:
        vals = row
        out.append(MetricsRecord(
            vals[0], int(vals[1]), int(vals[2]), int(vals[3]), int(vals[4]),
            float(vals[5]), float(vals[6]), float(vals[7]), float(vals[8]),
            int(vals[9]), int(vals[10]), int(vals[11]), vals[12],
        ))
    return out


def summarize(model, inputs, outputs, dataset="custom", n_train=0, seed=0, history=None, peak_rss=0):
    """Evaluate ``model`` on ``(inputs, outputs)`` and pack a MetricsRecord.

    Coverage uses the predictive variance including observation noise.
    """
    n = len(inputs)
    a = np.asarray(inputs, dtype=np.float64).reshape(n, -1)
    u = np.asarray(outputs, dtype=np.float64).reshape(n, -1)
    pm = model.predict(a, include_noise=True)
    err = rel_l2(pm.mean, u)
    wall = peak = 0
    if history is not None and len(history):
        wall = float(np.mean(history.column("wall_seconds")))
        peak = int(np.max(history.column("peak_bytes")))
    return MetricsRecord(
        dataset, int(n_train), model.dim, model.state.num_inducing, model.state.neighbor_count,
        float(np.mean(err)), float(np.std(err)), coverage_95(pm.mean, pm.variance, u),
        float(wall), peak, int(peak_rss), int(seed),
    )
