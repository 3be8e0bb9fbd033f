"""Uniform tensor-product grids in one or two dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import is_power_of_two


@dataclass(frozen=True)
class Grid:
    """Uniform grid with spacing ``(hi - lo) / n`` per axis.

    Points sit at ``lo + i * spacing`` for ``i < n``, so a periodic axis never
    duplicates its endpoint.
    """

    shape: tuple
    extent: tuple = None
    periodic: tuple = None

    def __post_init__(self):
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        if len(shape) not in (1, 2):
            raise ValueError(f"grids are 1-D or 2-D, got shape {shape}")
        for n in shape:
            if not is_power_of_two(n):
                raise ValueError(f"grid axis length {n} is not a power of two")
        extent = self.extent if self.extent is not None else ((0.0, 1.0),) * len(shape)
        extent = tuple((float(lo), float(hi)) for lo, hi in extent)
        periodic = self.periodic if self.periodic is not None else (True,) * len(shape)
        periodic = tuple(bool(p) for p in periodic)
        if len(extent) != len(shape) or len(periodic) != len(shape):
            raise ValueError("extent and periodic must have one entry per axis")
        for lo, hi in extent:
            if not hi > lo:
                raise ValueError(f"empty extent ({lo}, {hi})")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "periodic", periodic)

    @classmethod
    def uniform(cls, n, lo=0.0, hi=1.0, periodic=True):
        return cls((n,), ((lo, hi),), (periodic,))

    @property
    def dims(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extent, self.shape))

    def axes(self):
        return [lo + np.arange(n) * (hi - lo) / n for (lo, hi), n in zip(self.extent, self.shape)]

    def points(self):
        """Row-major ``(size, dims)`` coordinate array."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def to_dict(self):
        return {"shape": list(self.shape), "extent": [list(e) for e in self.extent], "periodic": list(self.periodic)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["shape"]), tuple(tuple(e) for e in d["extent"]), tuple(d["periodic"]))
