"""Wavelet neural operator with Fourier-domain convolution on each DWT subband.

Fields are laid out channels-first, ``(batch, channels, n)``. A layer maps

    v -> act( idwt( conv_R( dwt(v) ) ) + W v + b )

where ``conv_R`` multiplies the lowest ``modes`` real-FFT coefficients of
every subband by a learned complex channel-mixing matrix. Gradients come from
the reverse-mode graph in :mod:`logos_gpo.autodiff`; the spectral step has a
hand-written adjoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .exceptions import MissingForwardCache, NonPowerOfTwoLength, ShapeMismatch
from .signal import (
    DEFAULT_WAVELET,
    WaveletPyramid,
    _check_levels,
    dwt_forward,
    dwt_inverse,
    is_power_of_two,
    subband_lengths,
)

ACTIVATIONS = ("gelu", "identity")


@dataclass(frozen=True)
class WnoConfig:
    """Architecture of one operator network.

    ``modes`` gives the retained real-FFT modes per subband (approximation
    first, then details coarse to fine); ``None`` means a quarter of each
    subband length, resolved against the training grid by :meth:`resolve`.
    With ``pool`` the projected field is averaged over the grid, giving one
    ``out_channels`` vector per input function.
    """

    width: int = 16
    layers: int = 3
    levels: int = 3
    modes: tuple = None
    wavelet: str = DEFAULT_WAVELET
    proj_width: int = 32
    out_channels: int = 1
    in_channels: int = 2
    pool: bool = False
    activations: tuple = None

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.proj_width < 1 or self.out_channels < 1:
            raise ValueError("layers, width, proj_width and out_channels must be positive")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        acts = self.activations
        if acts is None:
            acts = ("gelu",) * (self.layers - 1) + ("identity",)
        acts = tuple(acts)
        if len(acts) != self.layers or any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"need {self.layers} activations from {ACTIVATIONS}")
        object.__setattr__(self, "activations", acts)
        if self.modes is not None:
            object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))

    def resolve(self, n):
        """Copy with ``modes`` fixed for grid length ``n``."""
        lengths = subband_lengths(n, self.levels)
        if self.modes is not None:
            check_modes(self.modes, lengths)
            return self
        return replace(self, modes=tuple(max(1, m // 4) for m in lengths))

    def to_dict(self):
        d = asdict(self)
        d["modes"] = list(self.modes) if self.modes is not None else None
        d["activations"] = list(self.activations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("modes") is not None:
            d["modes"] = tuple(d["modes"])
        d["activations"] = tuple(d["activations"]) if d.get("activations") else None
        return cls(**d)


def check_modes(modes, lengths):
    if len(modes) != len(lengths):
        raise ValueError(f"{len(modes)} mode counts for {len(lengths)} subbands")
    for m, n in zip(modes, lengths):
        if not 1 <= m <= n // 2 + 1:
            raise ValueError(f"{m} modes do not fit a subband of length {n}")


def param_names(config):
    names = ["lift_w", "lift_b"]
    for layer in range(config.layers):
        for s in range(config.levels + 1):
            names += [f"layer{layer}_wr{s}", f"layer{layer}_wi{s}"]
        names += [f"layer{layer}_bias_w", f"layer{layer}_bias_b"]
    names += ["proj1_w", "proj1_b", "proj2_w", "proj2_b"]
    return names


def init_params(config, rng):
    """Fresh weights; ``config.modes`` must already be resolved."""
    if config.modes is None:
        raise ValueError("resolve the config against a grid first")
    C, Cp = config.width, config.proj_width

    def dense(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    p = {}
    p["lift_w"], p["lift_b"] = dense(C, config.in_channels)
    for layer in range(config.layers):
        for s, m in enumerate(config.modes):
            scale = 1.0 / (C * m)
            p[f"layer{layer}_wr{s}"] = scale * rng.uniform(0.0, 1.0, (C, C, m))
            p[f"layer{layer}_wi{s}"] = scale * rng.uniform(0.0, 1.0, (C, C, m))
        p[f"layer{layer}_bias_w"], p[f"layer{layer}_bias_b"] = dense(C, C)
    p["proj1_w"], p["proj1_b"] = dense(Cp, C)
    p["proj2_w"], p["proj2_b"] = dense(config.out_channels, Cp)
    return p


def _real_mode_mask(m, n):
    """1 where the rfft coefficient may carry an imaginary part."""
    mask = np.ones(m)
    mask[0] = 0.0
    if m == n // 2 + 1:
        mask[-1] = 0.0
    return mask


# -- spectral convolution ----------------------------------------------------------------


MATRIX_PATH_MAX_LENGTH = 512


def _irfft_weights(m, n):
    w = np.full(m, 2.0 / n)
    w[0] = 1.0 / n
    if m == n // 2 + 1:
        w[-1] = 1.0 / n
    return w


class SubbandSpectra:
    """Linear maps between a field and the truncated rfft of each DWT subband.

    ``analyse`` takes ``(..., n)`` to a list of complex ``(..., m_s)`` arrays;
    ``synthesise`` maps per-subband spectra back to a real field through
    irfft and the inverse DWT. Adjoints of both are provided. For short grids
    the composite maps are precomputed as dense real matrices, which is much
    faster than running the transforms stage by stage.
    """

    def __init__(self, n, levels, wavelet, modes):
        self.n, self.levels, self.wavelet = n, levels, wavelet
        self.modes = tuple(modes)
        self.lengths = subband_lengths(n, levels)
        check_modes(self.modes, self.lengths)
        self.offsets = np.concatenate([[0], np.cumsum(self.modes)])
        self.dense = n <= MATRIX_PATH_MAX_LENGTH
        if self.dense:
            eye = np.eye(n)
            X = self._analyse_fft(eye)
            real = np.concatenate([x.real for x in X], -1)
            self.E = np.concatenate([real, np.concatenate([x.imag for x in X], -1)], -1)
            total = int(self.offsets[-1])
            unit = np.eye(total)
            re = self._synthesise_fft(self._split(unit.astype(np.complex128)))
            im = self._synthesise_fft(self._split(1j * unit))
            self.D = np.concatenate([re, im], axis=0)

    def _split(self, Z):
        return [Z[..., self.offsets[s] : self.offsets[s + 1]] for s in range(len(self.modes))]

    def _join(self, parts):
        Z = np.concatenate(parts, axis=-1)
        return np.concatenate([Z.real, Z.imag], axis=-1)

    # stage-by-stage transforms
    def _analyse_fft(self, v):
        pyr = dwt_forward(v, self.wavelet, self.levels)
        out = []
        for band, m, ns in zip(pyr.subbands(), self.modes, self.lengths):
            X = np.fft.rfft(band, axis=-1)[..., :m]
            X.imag *= _real_mode_mask(m, ns)
            out.append(X)
        return out

    def _synthesise_fft(self, spectra):
        bands = []
        for spec, m, ns in zip(spectra, self.modes, self.lengths):
            Y = np.zeros(spec.shape[:-1] + (ns // 2 + 1,), dtype=np.complex128)
            Y[..., :m] = spec
            bands.append(np.fft.irfft(Y, n=ns, axis=-1))
        return dwt_inverse(WaveletPyramid(bands[0], bands[1:], self.wavelet, self.n))

    def _analyse_adjoint_fft(self, gX):
        bands = []
        for G, m, ns in zip(gX, self.modes, self.lengths):
            # gx[t] = Re sum_k G_k exp(2 pi i k t / ns)
            Z = np.zeros(G.shape[:-1] + (ns // 2 + 1,), dtype=np.complex128)
            Z[..., :m] = G * (ns / 2.0)
            Z[..., 0] = G[..., 0] * ns
            if m == ns // 2 + 1:
                Z[..., -1] = G[..., -1] * ns
            bands.append(np.fft.irfft(Z, n=ns, axis=-1))
        # the periodic orthonormal DWT has its inverse as adjoint
        return dwt_inverse(WaveletPyramid(bands[0], bands[1:], self.wavelet, self.n))

    def _synthesise_adjoint_fft(self, gy):
        pyr = dwt_forward(gy, self.wavelet, self.levels)
        out = []
        for band, m, ns in zip(pyr.subbands(), self.modes, self.lengths):
            G = np.fft.rfft(band, axis=-1)[..., :m] * _irfft_weights(m, ns)
            G.imag *= _real_mode_mask(m, ns)
            out.append(G)
        return out

    # public maps
    def analyse(self, v):
        if not self.dense:
            return self._analyse_fft(v)
        R = v @ self.E
        half = R.shape[-1] // 2
        return self._split(R[..., :half] + 1j * R[..., half:])

    def analyse_adjoint(self, gX):
        if not self.dense:
            return self._analyse_adjoint_fft(gX)
        return self._join(gX) @ self.E.T

    def synthesise(self, spectra):
        if not self.dense:
            return self._synthesise_fft(spectra)
        return self._join(spectra) @ self.D

    def synthesise_adjoint(self, gy):
        if not self.dense:
            return self._synthesise_adjoint_fft(gy)
        R = gy @ self.D.T
        half = R.shape[-1] // 2
        return self._split(R[..., :half] + 1j * R[..., half:])


@lru_cache(maxsize=32)
def subband_spectra(n, levels, wavelet, modes):
    return SubbandSpectra(n, levels, wavelet, modes)


def _modes_first(X, swap=False):
    """Contiguous copy with the mode axis leading (BLAS needs contiguous operands)."""
    return np.ascontiguousarray(X.transpose(2, 1, 0) if swap else X.transpose(2, 0, 1))


def _mode_matmul(X, W):
    """``O[b, o, k] = sum_i X[b, i, k] W[i, o, k]`` as a batched matmul over modes."""
    return np.matmul(_modes_first(X), _modes_first(W)).transpose(1, 2, 0)


def spectral_wavelet_conv(v, weights, levels, wavelet=DEFAULT_WAVELET):
    """Wavelet-domain global convolution of a ``(B, C, n)`` field.

    ``weights`` is a list of ``(wr, wi)`` pairs, one per subband (approximation
    first). Each pair has shape ``(C_in, C_out, modes)``. Both ``v`` and the
    weights may be tensors; the result is a tensor. Imaginary weights at the
    zero and Nyquist modes have no effect, so the output is real by
    construction.
    """
    v = ad.as_tensor(v)
    n = v.shape[-1]
    if not is_power_of_two(n):
        raise NonPowerOfTwoLength(f"grid length {n} is not a power of two")
    _check_levels(n, wavelet, levels)
    if len(weights) != levels + 1:
        raise ValueError(f"need {levels + 1} subband weight pairs, got {len(weights)}")
    pairs = [(ad.as_tensor(wr), ad.as_tensor(wi)) for wr, wi in weights]
    if pairs[0][0].shape[0] != v.shape[1]:
        raise ShapeMismatch(f"weights expect {pairs[0][0].shape[0]} channels, field has {v.shape[1]}")
    spectra = subband_spectra(n, levels, wavelet, tuple(wr.shape[-1] for wr, _ in pairs))

    X = spectra.analyse(v.data)
    W = [wr.data + 1j * wi.data for wr, wi in pairs]
    out = spectra.synthesise([_mode_matmul(x, w) for x, w in zip(X, W)])

    def vjp(g):
        gO = spectra.synthesise_adjoint(g)
        gX, grads_w = [], []
        for x, w, go, ns in zip(X, W, gO, spectra.lengths):
            Ok = _modes_first(go)
            gw = np.matmul(np.conj(_modes_first(x, swap=True)), Ok).transpose(1, 2, 0)
            gX.append(np.matmul(Ok, np.conj(_modes_first(w, swap=True))).transpose(1, 2, 0))
            grads_w += [gw.real, gw.imag * _real_mode_mask(w.shape[-1], ns)]
        return (spectra.analyse_adjoint(gX), *grads_w)

    parents = [v]
    for wr, wi in pairs:
        parents += [wr, wi]
    return ad.apply(out, parents, vjp)


def pointwise_linear(v, w, b=None):
    """Per-point channel map ``(B, C_in, n) -> (B, C_out, n)``."""
    out = ad.matmul(w, v)
    if b is not None:
        out = out + ad.reshape(ad.as_tensor(b), (-1, 1))
    return out


def _activate(x, tag):
    return ad.gelu(x) if tag == "gelu" else x


def _coordinates(grid, n):
    if grid is None:
        return np.arange(n) / n
    axes = grid.axes() if hasattr(grid, "axes") else [np.asarray(grid, dtype=np.float64)]
    if len(axes) != 1:
        raise ShapeMismatch("the operator network handles 1-D grids")
    if len(axes[0]) != n:
        raise ShapeMismatch(f"field length {n} does not match grid size {len(axes[0])}")
    return axes[0]


def lift(a, grid, params):
    """Augment ``a`` with the grid coordinate and map pointwise to the hidden width."""
    a = ad.as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a (batch, n) array of input functions, got {a.shape}")
    B, n = a.shape
    x = _coordinates(grid, n)
    w = ad.as_tensor(params["lift_w"])
    if w.shape[1] != 2:
        raise ShapeMismatch(f"lift expects {w.shape[1]} input channels, have 2 (value, coordinate)")
    inp = ad.stack([a, ad.as_tensor(np.broadcast_to(x, (B, n)))], axis=1)
    return pointwise_linear(inp, w, params["lift_b"])


def wno_layer(v, params, config, layer):
    weights = [(params[f"layer{layer}_wr{s}"], params[f"layer{layer}_wi{s}"]) for s in range(config.levels + 1)]
    spec = spectral_wavelet_conv(v, weights, config.levels, config.wavelet)
    local = pointwise_linear(v, params[f"layer{layer}_bias_w"], params[f"layer{layer}_bias_b"])
    return _activate(spec + local, config.activations[layer])


def wno_forward(a, grid, params, config):
    """Input functions ``(B, n)`` to fields ``(B, n)`` (or ``(B, out, n)``), or pooled vectors."""
    v = lift(a, grid, params)
    for layer in range(config.layers):
        v = wno_layer(v, params, config, layer)
    h = ad.gelu(pointwise_linear(v, params["proj1_w"], params["proj1_b"]))
    out = pointwise_linear(h, params["proj2_w"], params["proj2_b"])
    if config.pool:
        return ad.tmean(out, axis=-1)
    if config.out_channels == 1:
        return ad.reshape(out, (out.shape[0], out.shape[-1]))
    return out


class WaveletNeuralOperator:
    """Parameter container with a cached forward pass and its reverse."""

    def __init__(self, config, params):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._cache = None

    @classmethod
    def create(cls, config, n, seed=0):
        config = config.resolve(n)
        return cls(config, init_params(config, np.random.default_rng(seed)))

    def forward(self, a, grid=None):
        leaves = {k: ad.parameter(v, k) for k, v in self.params.items()}
        a_t = ad.parameter(a, "input")
        out = wno_forward(a_t, grid, leaves, self.config)
        self._cache = (out, leaves, a_t)
        return out.data

    __call__ = forward

    def backward(self, upstream):
        """Gradients of ``sum(upstream * output)`` for every weight and the input."""
        if self._cache is None:
            raise MissingForwardCache("call forward before backward")
        out, leaves, a_t = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != out.shape:
            raise ShapeMismatch(f"upstream gradient shape {upstream.shape} != output {out.shape}")
        for t in (*leaves.values(), a_t):
            t.zero_grad()
        out.backward(upstream)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        ga = a_t.grad if a_t.grad is not None else np.zeros_like(a_t.data)
        self._cache = None
        return grads, ga
