"""Gaussian process operator learning with a wavelet neural operator mean and a
nearest-neighbour sparse spatial kernel."""

from .data import (
    Dataset,
    FunctionSample,
    advect_exact,
    advection_initial,
    generate,
    generate_advection,
    generate_burgers,
    read_dataset,
    sample_grf,
    solve_burgers,
    write_dataset,
)
from .estimator import LoGoSGPORegressor
from .evaluation import MetricsRecord, coverage_95, rel_l2
from .grid import Grid
from .model import LogosModel
from .serialization import load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainHistory, train

__all__ = [
    "Dataset",
    "FunctionSample",
    "Grid",
    "LoGoSGPORegressor",
    "LogosModel",
    "MetricsRecord",
    "TrainConfig",
    "TrainHistory",
    "advect_exact",
    "advection_initial",
    "coverage_95",
    "generate",
    "generate_advection",
    "generate_burgers",
    "load_checkpoint",
    "read_dataset",
    "rel_l2",
    "sample_grf",
    "save_checkpoint",
    "solve_burgers",
    "train",
    "write_dataset",
]
