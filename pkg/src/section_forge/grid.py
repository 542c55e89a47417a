"""Regular chart lattices, scalar fields sampled on them, and their file format.

A lattice has ``dims[i]`` samples along axis ``i`` at ``origin[i] + j * spacing[i]``.
Periodic axes identify index 0 with index ``dims[i]``; the seam sample is not stored.

A lattice may also carry a *twist*: crossing the upper end of the last axis maps the
remaining (periodic) coordinates through an integer matrix.  This is how the mapping
torus ``T^d x [0,1] / (x,1) ~ (Ax,0)`` is stored as a single chart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...]
    periodic: tuple[bool, ...]
    twist: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.dims)
        if not (len(self.spacing) == len(self.origin) == len(self.periodic) == n):
            raise ValueError("dims, spacing, origin and periodic must have equal length")
        if any(d < 1 for d in self.dims):
            raise ValueError("every axis needs at least one sample")
        if any(h <= 0 for h in self.spacing):
            raise ValueError("spacing must be positive")
        if self.twist is not None:
            A = np.asarray(self.twist)
            d = n - 1
            if A.shape != (d, d):
                raise ValueError(f"twist must be {d}x{d}")
            if not all(self.periodic):
                raise ValueError("a twisted lattice must be periodic on every axis")
            if len(set(self.dims[:-1])) != 1:
                raise ValueError("twisted fibre axes must share one resolution")
            if abs(round(np.linalg.det(A))) != 1:
                raise ValueError("twist must be unimodular")
            object.__setattr__(self, "twist", A.astype(np.int64))

    @classmethod
    def periodic_box(cls, dims, lengths=None) -> "GridGeometry":
        """Periodic lattice on ``prod [0, L_i)`` (unit lengths by default)."""
        dims = tuple(int(d) for d in dims)
        lengths = (1.0,) * len(dims) if lengths is None else tuple(lengths)
        return cls(dims, tuple(L / d for L, d in zip(lengths, dims)), (0.0,) * len(dims),
                   (True,) * len(dims))

    @classmethod
    def mapping_torus(cls, A, n_fibre: int, n_s: int) -> "GridGeometry":
        """Lattice on ``T^d x [0,1)`` with the seam glued by ``A``."""
        A = np.asarray(A)
        d = A.shape[0]
        dims = (n_fibre,) * d + (n_s,)
        return cls(dims, (1.0 / n_fibre,) * d + (1.0 / n_s,), (0.0,) * (d + 1),
                   (True,) * (d + 1), twist=A)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def points(self) -> np.ndarray:
        """Coordinates of every lattice point, shape ``dims + (ndim,)``."""
        axes = [self.axis_coords(i) for i in range(self.ndim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def extent(self, axis: int) -> float:
        return self.dims[axis] * self.spacing[axis]

    def sub(self, axes) -> "GridGeometry":
        axes = list(axes)
        return GridGeometry(tuple(self.dims[i] for i in axes), tuple(self.spacing[i] for i in axes),
                            tuple(self.origin[i] for i in axes), tuple(self.periodic[i] for i in axes))

    def to_dict(self) -> dict:
        out = {"dims": list(self.dims), "spacing": list(self.spacing),
               "origin": list(self.origin), "periodic": list(self.periodic)}
        if self.twist is not None:
            out["twist"] = self.twist.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        twist = d.get("twist")
        return cls(tuple(d["dims"]), tuple(float(h) for h in d["spacing"]),
                   tuple(float(o) for o in d["origin"]), tuple(bool(p) for p in d["periodic"]),
                   twist=None if twist is None else np.array(twist))


@dataclass(frozen=True)
class GridScalarField:
    geometry: GridGeometry
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.shape != self.geometry.dims:
            raise ValueError(f"samples have shape {samples.shape}, lattice is {self.geometry.dims}")
        object.__setattr__(self, "samples", samples)

    @classmethod
    def from_function(cls, geometry: GridGeometry, fn) -> "GridScalarField":
        pts = geometry.points()
        return cls(geometry, fn(*np.moveaxis(pts, -1, 0)))

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def save(self, path) -> None:
        """Write ``<path>.bin`` (little-endian float64, row-major) and ``<path>.json``."""
        path = Path(path)
        self.samples.astype("<f8").tofile(path.with_suffix(".bin"))
        path.with_suffix(".json").write_text(json.dumps(self.geometry.to_dict(), indent=2),
                                             encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GridScalarField":
        path = Path(path)
        geometry = GridGeometry.from_dict(json.loads(path.with_suffix(".json").read_text("utf-8")))
        data = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        return cls(geometry, data.reshape(geometry.dims))


def twist_index_maps(geometry: GridGeometry, inverse: bool = False):
    """Fibre index arrays ``A i mod N`` (or ``A^-1 i``), one per fibre axis."""
    A = geometry.twist
    if inverse:
        A = np.rint(np.linalg.inv(A)).astype(np.int64)
    N = geometry.dims[0]
    d = A.shape[0]
    idx = np.stack(np.meshgrid(*[np.arange(N)] * d, indexing="ij"), axis=0)
    mapped = np.tensordot(A, idx, axes=(1, 0)) % N
    return tuple(mapped[i] for i in range(d))


def periodic_delta(dx: np.ndarray, period: float) -> np.ndarray:
    """Minimum-image displacement on a circle of the given period."""
    return dx - period * np.round(dx / period)
