"""Minibatch training of the full model with AdamW."""

from __future__ import annotations

import csv
import json
import logging
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import NonFiniteGradient, NotPositiveDefinite, TrainingAborted
from .kernels import KERNEL_FAMILIES, KernelParams, build_knn_sparse_kernel
from .model import LogosModel, Normalizer, max_stable_lengthscale
from .svgp import COVARIANCE_FORMS, VariationalState
from .wno import WaveletNeuralOperator, WnoConfig

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "elbo", "data_term", "kl_term", "grad_norm", "wall_seconds", "peak_bytes")

# parameters excluded from decoupled weight decay
NO_DECAY_GROUPS = ("variational", "noise", "hyperparameters")

PROBLEM_DEFAULTS = {
    "burgers": dict(batch_size=32, levels=5, learning_rate=8e-3, optimizer="adamw", epochs=500),
    "advection": dict(batch_size=32, levels=3, learning_rate=2e-2, optimizer="adamw", epochs=500),
}


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 8e-3
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    levels: int = 3
    modes: list = None
    width: int = 16
    layers: int = 3
    proj_width: int = 32
    latent_dim: int = 32
    wavelet: str = "db4"
    inducing: int = 64
    neighbors: int = 8
    jitter: float = 1e-6
    seed: int = 0
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    variational_lr_multiplier: float = 1.0
    feature_kernel: str = "rbf"
    spatial_kernel: str = "rbf"
    covariance_form: str = "kron"
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}; only adamw is implemented")
        if self.inducing < 1 or self.neighbors < 1:
            raise ValueError("inducing and neighbors must be at least 1")
        if self.feature_kernel not in KERNEL_FAMILIES or self.spatial_kernel not in KERNEL_FAMILIES:
            raise ValueError(f"kernel families must be in {KERNEL_FAMILIES}")
        if self.covariance_form not in COVARIANCE_FORMS:
            raise ValueError(f"covariance_form must be in {COVARIANCE_FORMS}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    @classmethod
    def for_problem(cls, problem, **overrides):
        base = dict(PROBLEM_DEFAULTS.get(problem, {}))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def wno_config(self, out_channels, pool):
        return WnoConfig(
            width=self.width,
            layers=self.layers,
            levels=self.levels,
            modes=tuple(self.modes) if self.modes else None,
            wavelet=self.wavelet,
            proj_width=self.proj_width,
            out_channels=out_channels,
            pool=pool,
        )


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    data_term: float
    kl_term: float
    grad_norm: float
    wall_seconds: float = 0.0
    peak_bytes: int = 0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for r in self.records:
                w.writerow([r.epoch, repr(r.elbo), repr(r.data_term), repr(r.kl_term),
                            repr(r.grad_norm), repr(r.wall_seconds), r.peak_bytes])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != HISTORY_HEADER:
            raise ValueError(f"history header must be {','.join(HISTORY_HEADER)}")
        h = cls()
        for row in rows[1:]:
            h.append(EpochRecord(int(row[0]), *map(float, row[1:6]), int(row[6])))
        return h


# -- optimizer ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(params, grads, state, config, t, decay_mask=None, lr_scale=None):
    """One AdamW update of a flat parameter vector.

    ``decay_mask`` (0/1 per entry) selects where decoupled weight decay
    applies; ``lr_scale`` multiplies the step size per entry. Raises
    NonFiniteGradient, leaving ``state`` untouched, if any gradient entry is
    not finite.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if t < 1:
        raise ValueError("step counter starts at 1")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient has non-finite entries")
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate if lr_scale is None else config.learning_rate * lr_scale
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    state.step = t
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    out = params - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if config.weight_decay:
        decay = config.weight_decay * lr * params
        out = out - (decay if decay_mask is None else decay * decay_mask)
    return out


class FlatView:
    """Packs a parameter dictionary into one vector in a fixed name order."""

    def __init__(self, params):
        self.names = list(params)
        self.shapes = [np.shape(params[k]) for k in self.names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self):
        return int(self.offsets[-1])

    def pack(self, d):
        return np.concatenate([np.ravel(np.asarray(d[k], dtype=np.float64)) for k in self.names])

    def unpack(self, flat):
        return {
            k: flat[self.offsets[i] : self.offsets[i + 1]].reshape(self.shapes[i]).copy()
            for i, k in enumerate(self.names)
        }

    def mask(self, fn):
        out = np.zeros(self.size)
        for i, k in enumerate(self.names):
            out[self.offsets[i] : self.offsets[i + 1]] = fn(k)
        return out


def clip_by_global_norm(g, max_norm):
    norm = float(np.sqrt(np.dot(g, g)))
    if max_norm is not None and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


# -- setup ---------------------------------------------------------------------------------


def _median_distance(H):
    diff = H[:, None, :] - H[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    vals = dist[np.triu_indices(len(H), 1)]
    return float(np.median(vals)) if vals.size else 1.0


def init_model(grid, a, y, config, spatial=None):
    """Fresh model for training data ``a``, ``y`` of shape ``(N, d)``."""
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    N, d = a.shape
    if grid.size != d or y.shape != a.shape:
        raise ValueError("training fields must match the grid")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    norm = Normalizer.fit(a, y)
    an = norm.inputs(a)
    mean_net = WaveletNeuralOperator.create(config.wno_config(1, False), d, seed=seeds[0])
    embed_net = WaveletNeuralOperator.create(config.wno_config(config.latent_dim, True), d, seed=seeds[1])
    rng = np.random.default_rng(seeds[2])
    M = min(config.inducing, N)
    if M < config.inducing:
        logger.warning("only %d training samples; using %d inducing functions", N, M)
    idx = np.sort(rng.choice(N, size=M, replace=False))
    Z = an[idx] + 0.01 * rng.standard_normal((M, d))

    HZ = embed_net.forward(Z)
    feature = KernelParams.create(config.feature_kernel, max(_median_distance(HZ), 1e-3), 1.0)
    if spatial is None:
        spatial = build_knn_sparse_kernel(grid, config.neighbors, KernelParams(config.spatial_kernel))
    ell_max = max_stable_lengthscale(spatial)
    sp_params = KernelParams.create(config.spatial_kernel, 0.5 * ell_max, 1.0)
    spatial = spatial.with_params(sp_params)
    noise = 1e-2  # outputs are standardized, so this is 1e-2 of the output variance
    state = VariationalState.prior(Z, d, noise, feature, sp_params, config.neighbors, config.covariance_form)
    return LogosModel(grid, mean_net, embed_net, state, spatial, norm, config.jitter, 0.9 * ell_max)


# -- training loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: LogosModel
    history: TrainHistory
    skipped_steps: int = 0
    spatial_builds: int = 1


def batches(n, batch_size, seed, epoch):
    """Shuffled index batches for one epoch; the last one may be short."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train(grid, a, y, config, model=None, callback=None, checkpoint_path=None):
    """Run ``config.epochs`` epochs of minibatch AdamW on ``-ELBO``.

    Returns a :class:`TrainResult`. A non-finite objective raises
    TrainingAborted carrying the last model whose parameters were all finite.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("need a nonempty (N, d) training set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
        raise ValueError("training fields must be finite")
    if config.batch_size > a.shape[0]:
        raise ValueError(f"batch_size {config.batch_size} exceeds {a.shape[0]} training samples")
    if model is None:
        model = init_model(grid, a, y, config)
    N = a.shape[0]
    an, yn = model.normalizer.inputs(a), model.normalizer.outputs(y)

    view = FlatView(model.parameters())
    decay_mask = view.mask(lambda k: 0.0 if LogosModel.group_of(k) in NO_DECAY_GROUPS else 1.0)
    lr_scale = view.mask(
        lambda k: config.variational_lr_multiplier if LogosModel.group_of(k) == "variational" else 1.0
    )
    opt = AdamState.zeros(view.size)
    history = TrainHistory()
    last_good = model.copy()
    skipped = 0
    if config.record_timing:
        tracemalloc.start()

    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            if config.record_timing:
                tracemalloc.reset_peak()
            sums = np.zeros(4)
            steps = 0
            for idx in batches(N, config.batch_size, config.seed, epoch):
                try:
                    loss, terms, grads = model.objective(an[idx], yn[idx], N)
                except NotPositiveDefinite as exc:
                    raise TrainingAborted(f"epoch {epoch}: {exc}", last_good) from exc
                if not np.isfinite(loss):
                    raise TrainingAborted(f"epoch {epoch}: objective is not finite", last_good)
                g = view.pack(grads)
                try:
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteGradient("gradient has non-finite entries")
                    g, norm = clip_by_global_norm(g, config.grad_clip)
                    flat = adamw_step(view.pack(model.parameters()), g, opt, config, opt.step + 1,
                                      decay_mask, lr_scale)
                except NonFiniteGradient as exc:
                    skipped += 1
                    logger.warning("epoch %d: skipped step (%s)", epoch, exc)
                    continue
                model.set_parameters(view.unpack(flat))
                model.clamp_hyperparameters()
                sums += (float(terms.elbo.data), float(terms.data_term.data), float(terms.kl.data), norm)
                steps += 1
            if steps:
                last_good = model.copy()
            means = sums / max(steps, 1)
            wall = time.perf_counter() - t0 if config.record_timing else 0.0
            peak = tracemalloc.get_traced_memory()[1] if config.record_timing else 0
            rec = EpochRecord(epoch, *map(float, means), wall, int(peak))
            history.append(rec)
            if callback is not None:
                callback(rec, model)
            if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                from .serialization import save_checkpoint

                save_checkpoint(checkpoint_path, model, config)
    finally:
        if config.record_timing:
            tracemalloc.stop()
    return TrainResult(model, history, skipped)
