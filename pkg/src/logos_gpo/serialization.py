"""Checkpoint files for trained models and standalone wavelet operators.

Layout, little-endian throughout::

    8 bytes   magic  b"LGPO\\0CK\\1"
    8 bytes   header length (uint64)
    header    UTF-8 JSON with sorted keys; ``arrays`` lists ``{name, shape}``
    payload   float64 arrays concatenated in the order of ``arrays``

Headers are written with sorted keys and ``repr``-exact floats, so equal
models give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import _read_header
from .exceptions import CorruptHeader, ShapeMismatch, UnsupportedVersion
from .grid import Grid
from .kernels import KernelParams, build_knn_sparse_kernel
from .model import HYPER_NAMES, LogosModel, Normalizer
from .svgp import VariationalState
from .wno import WaveletNeuralOperator, WnoConfig

CHECKPOINT_MAGIC = b"LGPO\0CK\1"
CHECKPOINT_VERSION = 1


def _write(path, header, arrays):
    names = sorted(arrays)
    header = dict(header, version=CHECKPOINT_VERSION,
                  arrays=[{"name": k, "shape": list(np.shape(arrays[k]))} for k in names])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.writelines(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in names)


def _read(path, kind):
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw, CHECKPOINT_MAGIC)
    if header["version"] != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {header['version']} (supported: {CHECKPOINT_VERSION})")
    if header.get("kind") != kind:
        raise CorruptHeader(f"expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    try:
        specs = [(a["name"], tuple(a["shape"])) for a in header["arrays"]]
    except (KeyError, TypeError) as exc:
        raise CorruptHeader(f"malformed array table: {exc}") from None
    sizes = [int(np.prod(s)) for _, s in specs]
    payload = raw[offset:]
    if len(payload) != 8 * sum(sizes):
        raise ShapeMismatch(f"payload holds {len(payload)} bytes, header implies {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, pos = {}, 0
    for (name, shape), size in zip(specs, sizes):
        arrays[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return header, arrays


def save_wno(path, net, seed=0):
    _write(path, {"kind": "wno", "config": net.config.to_dict(), "seed": int(seed)}, net.params)


def load_wno(path):
    header, arrays = _read(path, "wno")
    return WaveletNeuralOperator(WnoConfig.from_dict(header["config"]), arrays)


def save_checkpoint(path, model, config=None):
    """Write every trainable array of ``model`` plus what is needed to rebuild it."""
    st = model.state
    header = {
        "kind": "logos-gpo",
        "grid": model.grid.to_dict(),
        "mean_net": model.mean_net.config.to_dict(),
        "embed_net": model.embed_net.config.to_dict(),
        "normalizer": model.normalizer.to_dict(),
        "feature_kernel": st.feature_params.family,
        "spatial_kernel": st.spatial_params.family,
        "neighbors": st.neighbor_count,
        "jitter": model.jitter,
        "max_spatial_lengthscale": model.max_spatial_lengthscale,
        "train_config": config.to_dict() if config is not None else None,
        "seed": int(config.seed) if config is not None else 0,
    }
    _write(path, header, model.parameters())


def load_checkpoint(path):
    """Rebuild a :class:`LogosModel`; returns ``(model, header)``."""
    header, arrays = _read(path, "logos-gpo")
    try:
        grid = Grid.from_dict(header["grid"])
        mean_net = WaveletNeuralOperator(
            WnoConfig.from_dict(header["mean_net"]),
            {k[5:]: v for k, v in arrays.items() if k.startswith("mean/")},
        )
        embed_net = WaveletNeuralOperator(
            WnoConfig.from_dict(header["embed_net"]),
            {k[6:]: v for k, v in arrays.items() if k.startswith("embed/")},
        )
        feature = KernelParams(header["feature_kernel"], float(arrays["feature_log_lengthscale"]),
                               float(arrays["feature_log_variance"]))
        spatial_p = KernelParams(header["spatial_kernel"], float(arrays["spatial_log_lengthscale"]),
                                 float(arrays["spatial_log_variance"]))
        state = VariationalState(
            Z=arrays["Z"],
            q_mean=arrays["q_mean"],
            q_feature_chol=arrays.get("q_feature_chol"),
            q_spatial_log_scale=arrays.get("q_spatial_log_scale"),
            q_full_chol=arrays.get("q_full_chol"),
            log_noise=float(arrays["log_noise"]),
            feature_params=feature,
            spatial_params=spatial_p,
            neighbor_count=int(header["neighbors"]),
        )
        spatial = build_knn_sparse_kernel(grid, state.neighbor_count, spatial_p)
        model = LogosModel(grid, mean_net, embed_net, state, spatial, Normalizer(**header["normalizer"]),
                           header["jitter"], header["max_spatial_lengthscale"])
    except (KeyError, TypeError) as exc:
        raise CorruptHeader(f"checkpoint is missing a field: {exc}") from None
    missing = set(model.parameters()) - set(arrays) - set(HYPER_NAMES)
    if missing:
        raise CorruptHeader(f"checkpoint lacks arrays {sorted(missing)}")
    return model, header
