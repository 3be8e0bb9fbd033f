"""Scaling study: short training runs over a grid of resolutions and sample counts."""

from __future__ import annotations

import dataclasses
import logging

import psutil

from .data import generate
from .evaluation import MetricsRecord, summarize
from .train import train

logger = logging.getLogger(__name__)


class RssSampler:
    """Tracks the peak resident set size seen at each call."""

    def __init__(self):
        self.proc = psutil.Process()
        self.peak = self.proc.memory_info().rss

    def __call__(self, *_):
        self.peak = max(self.peak, self.proc.memory_info().rss)


def bench_cell(problem, grid_size, n_train, config, n_test=16):
    """Train and evaluate one cell; failures become a row with ``status`` set."""
    config = dataclasses.replace(config, record_timing=True, batch_size=min(config.batch_size, n_train))
    try:
        data = generate(problem, n_train + n_test, grid_size, seed=config.seed)
        tr, te = data.split(n_train)
        a, y = tr.flat()
        rss = RssSampler()
        result = train(tr.grid, a, y, config, callback=rss)
        at, yt = te.flat()
        return summarize(result.model, at, yt, problem, n_train, config.seed, result.history, rss.peak)
    except Exception as exc:  # noqa: BLE001 - one bad cell must not stop the sweep
        logger.warning("bench cell grid=%d n=%d failed: %s", grid_size, n_train, exc)
        return MetricsRecord(problem, n_train, grid_size, config.inducing, config.neighbors,
                             float("nan"), float("nan"), float("nan"), float("nan"), 0, 0, config.seed,
                             status=f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))


def run_bench(problem, grids, n_trains, config, n_test=16):
    if not grids or not n_trains:
        raise ValueError("bench needs at least one grid size and one training-set size")
    return [bench_cell(problem, g, n, config, n_test) for g in grids for n in n_trains]
