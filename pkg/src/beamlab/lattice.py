"""Space-time lattices and the fields sampled on them.

One `Lattice` is shared by the wave solver, the recoverable-set computation and
beam sampling. Node counts are interval counts, so a lattice with `nt = 4` has
five time levels.
"""

from collections.abc import Iterator
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Self

import numpy as np

from beamlab.lib.errors import AlignmentError, ConfigurationError, GeometryError
from beamlab.lib.types import BoolArray, FieldArray, RealArray
from beamlab.spacetime import Domain, MetricSpec, contains, write_grid


def _trapezoid(count: int, step: float) -> RealArray:
    w = np.full(count + 1, step)
    w[0] = w[-1] = 0.5 * step
    return w


@dataclass(frozen=True)
class Lattice:
    """Uniform (t, x[, y]) lattice over [0, T] times the bounding box of M"""

    T: float
    extent: tuple[tuple[float, float], ...]
    nt: int
    dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.extent) != len(self.dims):
            raise ConfigurationError("lattice dims do not match the spatial extent")
        if self.nt < 2 or min(self.dims) < 2:
            raise ConfigurationError("lattice needs at least two intervals per axis")

    @classmethod
    def for_metric(cls, spec: MetricSpec, nt: int, nx: int, ny: int = 0) -> Self:
        dims = (nx,) if spec.n == 1 else (nx, ny or nx)
        return cls(spec.T, spec.domain.extent, nt, dims)

    @classmethod
    def from_config(cls, cfg: Any, spec: MetricSpec) -> Self:
        return cls.for_metric(spec, cfg.nt, cfg.nx, cfg.ny)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nt + 1, *(d + 1 for d in self.dims))

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.shape[1:]

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / d for (lo, hi), d in zip(self.extent, self.dims))

    @property
    def t(self) -> RealArray:
        return np.linspace(0.0, self.T, self.nt + 1)

    @property
    def axes(self) -> tuple[RealArray, ...]:
        return tuple(np.linspace(lo, hi, d + 1) for (lo, hi), d in zip(self.extent, self.dims))

    def points(self) -> RealArray:
        """All node coordinates, shape (*shape, n+1)"""
        grids = np.meshgrid(self.t, *self.axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def spatial_points(self) -> RealArray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def weights(self) -> RealArray:
        """Trapezoid quadrature weights dt dx on every node"""
        out = _trapezoid(self.nt, self.dt)
        for d, h in zip(self.dims, self.spacing):
            out = np.multiply.outer(out, _trapezoid(d, h))
        return out

    def refine(self, factor: int = 2) -> "Lattice":
        return Lattice(self.T, self.extent, self.nt * factor, tuple(d * factor for d in self.dims))

    def same_as(self, other: "Lattice") -> bool:
        return (
            self.nt == other.nt
            and self.dims == other.dims
            and np.isclose(self.T, other.T)
            and np.allclose(self.extent, other.extent)
        )

    def index_of(self, point: RealArray) -> tuple[int, ...]:
        """Nearest node to a space-time point"""
        point = np.asarray(point, dtype=float)
        idx = [int(round(point[0] / self.dt))]
        for axis, ((lo, _), h) in enumerate(zip(self.extent, self.spacing)):
            idx.append(int(round((point[axis + 1] - lo) / h)))
        return tuple(int(np.clip(i, 0, s - 1)) for i, s in zip(idx, self.shape))

    def window(self, center: RealArray, half_widths: RealArray) -> tuple[slice, ...]:
        """Index box of nodes within `half_widths` of `center` along every axis"""
        center = np.asarray(center, dtype=float)
        half_widths = np.broadcast_to(np.asarray(half_widths, dtype=float), center.shape)
        out = []
        for axis, coords in enumerate((self.t, *self.axes)):
            lo = np.searchsorted(coords, center[axis] - half_widths[axis], side="left")
            hi = np.searchsorted(coords, center[axis] + half_widths[axis], side="right")
            out.append(slice(int(lo), int(hi)))
        return tuple(out)

    # spatial boundary

    def inside(self, domain: Domain) -> BoolArray:
        """Spatial nodes inside the closed domain"""
        return contains(domain, self.spatial_points(), 1e-9)

    def boundary(self, domain: Domain | None = None) -> BoolArray:
        """Spatial boundary nodes; for a box this is the outer frame of the lattice"""
        if domain is None or domain.planar:
            mask = np.zeros(self.spatial_shape, dtype=bool)
            for axis in range(self.n):
                index = [slice(None)] * self.n
                index[axis] = 0
                mask[tuple(index)] = True
                index[axis] = -1
                mask[tuple(index)] = True
            return mask
        inside = self.inside(domain)
        padded = np.pad(inside, 1, constant_values=False)
        interior = inside.copy()
        for axis in range(self.n):
            for shift in (-1, 1):
                interior &= np.roll(padded, shift, axis=axis)[(slice(1, -1),) * self.n]
        return inside & ~interior

    def walls(self) -> Iterator[tuple[int, int, int]]:
        """(wall id, axis, index along the axis) for the planar walls of a box"""
        for axis in range(self.n):
            yield 2 * axis, axis, 0
            yield 2 * axis + 1, axis, self.dims[axis]

    def wall_mask(self, wall: int) -> BoolArray:
        """Spatial nodes of one wall, corners excluded in 2D"""
        axis, side = divmod(wall, 2)
        if axis >= self.n:
            raise GeometryError(f"wall {wall} does not exist in {self.n} dimensions")
        mask = np.zeros(self.spatial_shape, dtype=bool)
        index: list[Any] = [slice(None)] * self.n
        index[axis] = -1 if side else 0
        for other in range(self.n):
            if other != axis:
                index[other] = slice(1, -1)
        mask[tuple(index)] = True
        return mask


@dataclass(eq=False)
class GridField:
    """Samples of a (possibly complex) field on every node of a lattice"""

    lattice: Lattice
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.lattice.shape:
            raise AlignmentError(f"field of shape {self.values.shape} on lattice {self.lattice.shape}")

    @classmethod
    def zeros(cls, lattice: Lattice, dtype=float) -> Self:
        return cls(lattice, np.zeros(lattice.shape, dtype=dtype))

    @classmethod
    def sample(cls, lattice: Lattice, function) -> Self:
        """Evaluate `function(points)` on every node"""
        return cls(lattice, np.asarray(function(lattice.points())))

    def _check(self, other: "GridField") -> None:
        if not self.lattice.same_as(other.lattice):
            raise AlignmentError("fields live on different lattices")

    def __add__(self, other: "GridField | complex") -> "GridField":
        if isinstance(other, GridField):
            self._check(other)
            return GridField(self.lattice, self.values + other.values)
        return GridField(self.lattice, self.values + other)

    __radd__ = __add__

    def __sub__(self, other: "GridField | complex") -> "GridField":
        if isinstance(other, GridField):
            self._check(other)
            return GridField(self.lattice, self.values - other.values)
        return GridField(self.lattice, self.values - other)

    def __neg__(self) -> "GridField":
        return GridField(self.lattice, -self.values)

    def __mul__(self, other: "GridField | complex") -> "GridField":
        if isinstance(other, GridField):
            self._check(other)
            return GridField(self.lattice, self.values * other.values)
        return GridField(self.lattice, self.values * other)

    __rmul__ = __mul__

    def copy(self) -> "GridField":
        return GridField(self.lattice, self.values.copy())

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    # norms

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def l2_norm(self, weight: FieldArray | None = None) -> float:
        w = self.lattice.weights()
        if weight is not None:
            w = w * weight
        return float(np.sqrt(np.sum(w * np.abs(self.values) ** 2)))

    def derivatives(self, k: int) -> Iterator[np.ndarray]:
        """All partial derivatives of total order <= k by central differences"""
        steps = (self.lattice.dt, *self.lattice.spacing)
        ndim = len(steps)
        for order in range(k + 1):
            for alpha in product(range(ndim), repeat=order):
                if list(alpha) != sorted(alpha):
                    continue
                out = self.values
                for axis in alpha:
                    out = np.gradient(out, steps[axis], axis=axis, edge_order=2)
                yield out

    def hk_norm(self, k: int) -> float:
        """Discrete H^k norm: L2 norms of all derivatives up to order k, combined"""
        w = self.lattice.weights()
        total = sum(float(np.sum(w * np.abs(d) ** 2)) for d in self.derivatives(k))
        return float(np.sqrt(total))

    # io

    def write(self, path: Path) -> list[Path]:
        extents = [[0.0, self.lattice.T], *[list(e) for e in self.lattice.extent]]
        if self.is_complex:
            data = np.stack([self.values.real, self.values.imag])
            return write_grid(path, data, extents, ["real", "imag"])
        return write_grid(path, self.values.astype(float), extents, ["value"])
