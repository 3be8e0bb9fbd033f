"""Dataset generation (GRF-driven Burgers, square/parabolic wave advection) and dataset files.

Dataset file layout, all integers and floats little-endian::

    8 bytes   magic  b"LGPO\\0DS\\1"
    8 bytes   header length (uint64)
    header    UTF-8 JSON: version, problem, n, grid, params, seed
    payload   inputs then outputs, float64, row-major, sample-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CorruptHeader, ShapeMismatch, UnstableStep, UnsupportedVersion
from .grid import Grid

DATASET_MAGIC = b"LGPO\0DS\1"
DATASET_VERSION = 1

# N(0, 625 (-Laplacian + 25 I)^-2) on the unit periodic interval
BURGERS_GRF = dict(scale=625.0, tau=5.0, alpha=2.0)
BURGERS_NU = 0.1
BURGERS_STEPS = 2000
ADVECTION_RANGES = dict(c=(0.3, 0.7), omega=(0.3, 0.6), h=(1.0, 2.0))
ADVECTION_SPEED = 1.0
ADVECTION_TIME = 0.5


@dataclass
class FunctionSample:
    """Field values on a grid; ``profile`` keeps an analytic generator when there is one."""

    grid: Grid
    values: np.ndarray
    profile: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ShapeMismatch(f"values of shape {self.values.shape} on grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass
class Dataset:
    """Paired input/output fields on one grid, shapes ``(N, *grid.shape)``."""

    grid: Grid
    inputs: np.ndarray
    outputs: np.ndarray
    problem: str = "custom"
    params: dict = field(default_factory=dict)
    seed: int = 0
    version: int = DATASET_VERSION

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        expect = (self.inputs.shape[0],) + self.grid.shape
        if self.inputs.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.inputs.shape != expect or self.outputs.shape != expect:
            raise ShapeMismatch(
                f"inputs {self.inputs.shape} / outputs {self.outputs.shape} do not match {expect}"
            )

    def __len__(self):
        return self.inputs.shape[0]

    def flat(self):
        """Inputs and outputs as ``(N, d)`` matrices."""
        n = len(self)
        return self.inputs.reshape(n, -1), self.outputs.reshape(n, -1)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.grid, self.inputs[idx], self.outputs[idx], self.problem, dict(self.params), self.seed)

    def split(self, n_train):
        if not 0 < n_train < len(self):
            raise ValueError(f"n_train must be in (0, {len(self)})")
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def header(self):
        return {
            "version": self.version,
            "problem": self.problem,
            "n": len(self),
            "grid": self.grid.to_dict(),
            "params": self.params,
            "seed": self.seed,
        }


# -- Gaussian random fields ----------------------------------------------------------------


def grf_eigenvalues(n, tau, alpha, scale, length=1.0):
    """Covariance eigenvalues ``scale * (4 pi^2 k^2 / L^2 + tau^2)^-alpha`` for ``k = 0..n/2``."""
    k = np.arange(n // 2 + 1)
    return scale * (4.0 * np.pi**2 * k**2 / length**2 + tau**2) ** (-alpha)


def grf_pointwise_variance(n, tau, alpha, scale, length=1.0):
    """Exact marginal variance of :func:`sample_grf` on an ``n``-point grid."""
    lam = grf_eigenvalues(n, tau, alpha, scale, length)
    return float((lam[0] + 2.0 * lam[1 : n // 2].sum() + lam[n // 2]) / length)


def _grf_batch(n, tau, alpha, scale, length, rng, count):
    lam = grf_eigenvalues(n, tau, alpha, scale, length)
    half = n // 2
    xi = rng.standard_normal((count, half + 1))
    eta = rng.standard_normal((count, half + 1))
    amp = np.sqrt(2.0 * lam / length)
    amp[0] = np.sqrt(lam[0] / length)
    amp[half] = np.sqrt(lam[half] / length)
    # irfft(Y)[j] = (Y_0 + 2 sum Re(Y_k e^{i theta}) + Y_{n/2} (-1)^j) / n
    Y = (n / 2.0) * amp * (xi - 1j * eta)
    Y[:, 0] = n * amp[0] * xi[:, 0]
    Y[:, half] = n * amp[half] * xi[:, half]
    return np.fft.irfft(Y, n=n, axis=-1)


def sample_grf(grid, tau=BURGERS_GRF["tau"], alpha=BURGERS_GRF["alpha"], scale=BURGERS_GRF["scale"], seed=0):
    """One zero-mean periodic Gaussian random field with covariance ``scale (-Lap + tau^2)^-alpha``.

    Each real Fourier mode gets an independent standard normal weight scaled
    by the square root of its eigenvalue.
    """
    if grid.dims != 1 or not grid.periodic[0]:
        raise ValueError("sample_grf needs a periodic 1-D grid")
    lo, hi = grid.extent[0]
    vals = _grf_batch(grid.shape[0], tau, alpha, scale, hi - lo, np.random.default_rng(seed), 1)[0]
    return FunctionSample(grid, vals)


# -- Burgers -------------------------------------------------------------------------------


def solve_burgers(u0, grid, nu=BURGERS_NU, t_final=1.0, n_steps=BURGERS_STEPS, nonlinear=True, energy=None):
    """Viscous Burgers ``u_t + (u^2/2)_x = nu u_xx`` on a periodic 1-D grid.

    Pseudo-spectral in space with 2/3-rule dealiasing of the quadratic term,
    integrating-factor RK4 in time. ``u0`` may hold a batch of fields along
    leading axes. ``nonlinear=False`` leaves pure diffusion. If ``energy`` is
    a list, the mean of ``u^2`` after every step is appended to it.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.shape[-1]
    if grid.dims != 1 or not grid.periodic[0] or grid.shape[0] != n:
        raise ValueError("solve_burgers needs a periodic 1-D grid matching the field")
    lo, hi = grid.extent[0]
    k = 2.0 * np.pi * np.arange(n // 2 + 1) / (hi - lo)
    dt = t_final / n_steps
    E = np.exp(-nu * k**2 * dt / 2.0)
    E2 = E * E
    keep = np.arange(n // 2 + 1) <= n // 3
    ik_half = -0.5j * k * keep

    def N(v):
        if not nonlinear:
            return np.zeros_like(v)
        u = np.fft.irfft(v, n=n, axis=-1)
        return ik_half * np.fft.rfft(u * u, axis=-1)

    v = np.fft.rfft(u0, axis=-1)
    for step in range(n_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = N(v)
            k2 = N(E * (v + 0.5 * dt * k1))
            k3 = N(E * v + 0.5 * dt * k2)
            k4 = N(E2 * v + dt * E * k3)
            v = E2 * v + dt / 6.0 * (E2 * k1 + 2.0 * E * (k2 + k3) + k4)
        if not np.all(np.isfinite(v)):
            raise UnstableStep(f"non-finite field after step {step + 1}; reduce the time step")
        if energy is not None:
            energy.append(np.mean(np.fft.irfft(v, n=n, axis=-1) ** 2, axis=-1))
    return np.fft.irfft(v, n=n, axis=-1)


def generate_burgers(n, grid_size, seed=0, nu=BURGERS_NU, t_final=1.0, n_steps=BURGERS_STEPS, **grf):
    grid = Grid.uniform(grid_size)
    g = dict(BURGERS_GRF, **grf)
    inputs = np.stack(
        [_grf_batch(grid_size, g["tau"], g["alpha"], g["scale"], 1.0, np.random.default_rng(seed ^ i), 1)[0]
         for i in range(n)]
    )
    outputs = solve_burgers(inputs, grid, nu, t_final, n_steps)
    params = dict(g, nu=nu, t_final=t_final, n_steps=n_steps)
    return Dataset(grid, inputs, outputs, "burgers", params, seed)


# -- wave advection ----------------------------------------------------------------------


@dataclass(frozen=True)
class AdvectionProfile:
    """Square wave of height ``h`` and width ``omega`` plus a parabolic bump, centred at ``c``."""

    c: float
    omega: float
    h: float
    sharpness: float = None

    @property
    def a(self):
        if self.sharpness is not None:
            return self.sharpness
        return 2.0 * self.h / self.omega if self.omega else 0.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        box = ((x >= self.c - self.omega / 2) & (x <= self.c + self.omega / 2)).astype(np.float64)
        bump = np.sqrt(np.maximum(self.h**2 - (self.a * (x - self.c)) ** 2, 0.0))
        return self.h * box + bump


def advection_initial(c, omega, h, grid, sharpness=None):
    if grid.dims != 1:
        raise ValueError("advection profiles live on 1-D grids")
    prof = AdvectionProfile(c, omega, h, sharpness)
    return FunctionSample(grid, prof(grid.axes()[0]), prof)


def advect_exact(u0, nu=ADVECTION_SPEED, t=ADVECTION_TIME):
    """Translate ``u0`` by ``nu t`` on its periodic domain.

    Samples with an analytic profile are re-evaluated at the shifted points,
    so the result is exact. Other samples are shifted by a Fourier phase
    (exact for band-limited data).
    """
    grid = u0.grid
    lo, hi = grid.extent[0]
    L = hi - lo
    x = grid.axes()[0]
    if u0.profile is not None:
        xs = lo + np.mod(x - nu * t - lo, L)
        return FunctionSample(grid, u0.profile(xs), u0.profile)
    n = grid.shape[0]
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=L / n)
    vals = np.fft.irfft(np.fft.rfft(u0.values) * np.exp(-1j * k * nu * t), n=n)
    return FunctionSample(grid, vals)


def generate_advection(n, grid_size, seed=0, nu=ADVECTION_SPEED, t=ADVECTION_TIME, sharpness=None):
    grid = Grid.uniform(grid_size)
    inputs, outputs = [], []
    for i in range(n):
        rng = np.random.default_rng(seed ^ i)
        c, omega, h = (rng.uniform(*ADVECTION_RANGES[key]) for key in ("c", "omega", "h"))
        u0 = advection_initial(c, omega, h, grid, sharpness)
        inputs.append(u0.values)
        outputs.append(advect_exact(u0, nu, t).values)
    params = dict(nu=nu, t=t, sharpness=sharpness, ranges=ADVECTION_RANGES)
    return Dataset(grid, np.stack(inputs), np.stack(outputs), "advection", params, seed)


GENERATORS = {"burgers": generate_burgers, "advection": generate_advection}


def generate(problem, n, grid_size, seed=0, **params):
    if problem not in GENERATORS:
        raise ValueError(f"unknown problem {problem!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[problem](n, grid_size, seed, **params)


# -- dataset files --------------------------------------------------------------------------


def write_dataset(d, path):
    header = json.dumps(d.header(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(d.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(d.outputs, dtype="<f8").tobytes())


def _read_header(raw, magic):
    if len(raw) < 16 or raw[:8] != magic:
        raise CorruptHeader("missing or wrong magic bytes")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CorruptHeader("header runs past the end of the file")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or "version" not in header:
        raise CorruptHeader("header lacks a version field")
    return header, 16 + hlen


def read_dataset(path):
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw, DATASET_MAGIC)
    if header["version"] != DATASET_VERSION:
        raise UnsupportedVersion(f"dataset version {header['version']} (supported: {DATASET_VERSION})")
    try:
        grid = Grid.from_dict(header["grid"])
        n = int(header["n"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"malformed header: {exc}") from None
    count = n * grid.size
    payload = raw[offset:]
    if len(payload) != 2 * count * 8:
        raise ShapeMismatch(f"payload holds {len(payload)} bytes, header implies {2 * count * 8}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    shape = (n,) + grid.shape
    return Dataset(
        grid,
        arr[:count].reshape(shape),
        arr[count:].reshape(shape),
        header.get("problem", "custom"),
        header.get("params", {}),
        header.get("seed", 0),
        header["version"],
    )
