"""Forward solver for  box_g u + V(t, x, u) = 0  with Dirichlet lateral data.

The linear solver is an explicit leapfrog scheme for the divergence form

    d_t(alpha d_t u) - d_a(A^ab d_b u) = sqrt|g| F,   alpha = sqrt|g| / beta,  A = sqrt|g| g0^-1

on a `Lattice`. Dirichlet values are imposed on every spatial boundary node. The
semilinear problem is solved by Picard iteration on u = h + w, where h extends
the lateral data into a boundary collar and w has zero data.
"""

from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
import csv
import logging
from math import factorial
from pathlib import Path
from typing import Any, Self

import numpy as np
import sympy as sp

from beamlab.lattice import GridField, Lattice
from beamlab.lib.const import CFL_MAX, COLLAR_CELLS, PICARD_MAX_ITERATIONS, PICARD_TOLERANCE
from beamlab.lib.errors import (
    AlignmentError,
    CompatibilityError,
    ConfigurationError,
    GeometryError,
    InvalidInputError,
    MaskError,
    SmallnessError,
)
from beamlab.lib.helpers import compact_bump, format_float, smooth_step
from beamlab.lib.types import BoolArray, Direction, FieldArray, RealArray
from beamlab.spacetime import COORDINATE_SYMBOLS, MetricSpec, parse_expression, read_grid

logger = logging.getLogger(__name__)


# Nonlinearity

Coefficient = Callable[[RealArray], RealArray] | np.ndarray | sp.Expr | float


@dataclass(frozen=True, eq=False)
class NonlinearitySpec:
    """V(t, x, z) = sum_{k=3}^{k_max} V_k(t, x) z^k / k!"""

    coefficients: Mapping[int, Coefficient] = field(default_factory=dict)
    k_max: int = 5

    def __post_init__(self):
        bad = sorted(k for k in self.coefficients if k < 3)
        if bad:
            raise InvalidInputError(f"orders {bad} are not allowed, V starts at order 3")
        high = sorted(k for k in self.coefficients if k > self.k_max)
        if high:
            raise InvalidInputError(f"orders {high} exceed k_max = {self.k_max}")

    @classmethod
    def zero(cls, k_max: int = 5) -> Self:
        return cls({}, k_max)

    @classmethod
    def from_config(cls, cfg: Any) -> Self:
        return cls({int(k): parse_expression(v) for k, v in cfg.coefficients.items()}, cfg.k_max)

    @property
    def orders(self) -> list[int]:
        return sorted(self.coefficients)

    def _sample_one(self, coefficient: Coefficient, lattice: Lattice) -> RealArray:
        if isinstance(coefficient, np.ndarray):
            if coefficient.shape != lattice.shape:
                raise AlignmentError(f"coefficient of shape {coefficient.shape} on lattice {lattice.shape}")
            return coefficient
        points = lattice.points()
        if callable(coefficient) and not isinstance(coefficient, sp.Expr):
            return np.broadcast_to(np.asarray(coefficient(points), dtype=float), lattice.shape).copy()
        expr = sp.sympify(coefficient)
        symbols = COORDINATE_SYMBOLS[: lattice.n + 1]
        function = sp.lambdify(symbols, expr, modules="numpy")
        return np.broadcast_to(np.asarray(function(*np.moveaxis(points, -1, 0)), dtype=float), lattice.shape).copy()

    def sample(self, lattice: Lattice) -> dict[int, RealArray]:
        """V_k on every node of the lattice"""
        out = {}
        for k, coefficient in self.coefficients.items():
            values = self._sample_one(coefficient, lattice)
            if not np.all(np.isfinite(values)):
                raise InvalidInputError(f"V_{k} is not finite on the lattice")
            out[k] = values
        return out

    def evaluate(self, samples: Mapping[int, RealArray], u: FieldArray) -> FieldArray:
        out = np.zeros_like(u)
        for k, values in samples.items():
            out = out + values * u**k / factorial(k)
        return out


# Problem and operator


@dataclass(frozen=True, eq=False)
class WaveProblem:
    """A metric sampled on a lattice, with the coefficients of the leapfrog scheme"""

    spec: MetricSpec
    lattice: Lattice

    def __post_init__(self):
        if not self.spec.domain.planar:
            raise GeometryError("the lattice solver needs a box domain")
        if self.lattice.n != self.spec.n:
            raise ConfigurationError("lattice and metric dimensions differ")
        cfl = self.cfl_number
        if cfl > CFL_MAX:
            raise ConfigurationError(f"CFL number {cfl:.3f} exceeds {CFL_MAX}; refine nt")

    @cached_property
    def _fields(self) -> tuple[RealArray, RealArray]:
        return self.spec.fields(self.lattice.points())

    @cached_property
    def sqrt_g(self) -> RealArray:
        beta, g0 = self._fields
        return np.sqrt(beta * np.linalg.det(g0))

    @cached_property
    def alpha(self) -> RealArray:
        return self.sqrt_g / self._fields[0]

    @cached_property
    def flux(self) -> RealArray:
        """A^ab = sqrt|g| g0^ab, shape (*lattice.shape, n, n)"""
        return self.sqrt_g[..., None, None] * np.linalg.inv(self._fields[1])

    @cached_property
    def cfl_number(self) -> float:
        beta, g0 = self._fields
        speed = np.sqrt(beta * np.linalg.eigvalsh(np.linalg.inv(g0)).max(axis=-1)).max()
        return float(speed * self.lattice.dt * np.sqrt(sum(1.0 / h**2 for h in self.lattice.spacing)))

    @cached_property
    def boundary(self) -> BoolArray:
        return self.lattice.boundary()

    def spatial_operator(self, u: FieldArray, n: int) -> FieldArray:
        """d_a(A^ab d_b u) at time level n on interior nodes, zero on the boundary"""
        A = self.flux[n]
        h = self.lattice.spacing
        out = np.zeros_like(u)
        inner = (slice(1, -1),) * self.lattice.n
        for a in range(self.lattice.n):
            lo, mid, hi = _shifted(a, self.lattice.n)
            face_hi = 0.5 * (A[..., a, a][hi] + A[..., a, a][mid])
            face_lo = 0.5 * (A[..., a, a][lo] + A[..., a, a][mid])
            out[inner] += (face_hi * (u[hi] - u[mid]) - face_lo * (u[mid] - u[lo])) / h[a] ** 2
        if self.lattice.n == 2:
            for a, b in ((0, 1), (1, 0)):
                q = A[..., a, b] * _central(u, b, h[b])
                out[inner] += _central(q, a, h[a])[inner]
        return out

    def time_operator(self, u_prev: FieldArray, u_now: FieldArray, u_next: FieldArray, n: int) -> FieldArray:
        a_hi = 0.5 * (self.alpha[n] + self.alpha[n + 1])
        a_lo = 0.5 * (self.alpha[n] + self.alpha[n - 1])
        return (a_hi * (u_next - u_now) - a_lo * (u_now - u_prev)) / self.lattice.dt**2


def _shifted(axis: int, ndim: int) -> tuple[tuple[slice, ...], tuple[slice, ...], tuple[slice, ...]]:
    base = [slice(1, -1)] * ndim
    lo, hi = list(base), list(base)
    lo[axis] = slice(0, -2)
    hi[axis] = slice(2, None)
    return tuple(lo), tuple(base), tuple(hi)


def _central(u: FieldArray, axis: int, h: float) -> FieldArray:
    out = np.zeros_like(u)
    index_mid = [slice(None)] * u.ndim
    index_lo, index_hi = list(index_mid), list(index_mid)
    index_mid[axis] = slice(1, -1)
    index_lo[axis] = slice(0, -2)
    index_hi[axis] = slice(2, None)
    out[tuple(index_mid)] = (u[tuple(index_hi)] - u[tuple(index_lo)]) / (2 * h)
    return out


def apply_wave_operator(problem: WaveProblem, u: GridField) -> GridField:
    """Discrete box_g u, consistent with the leapfrog step.

    Spatial boundary nodes get zero; the first and last time levels are extrapolated.
    """
    if not u.lattice.same_as(problem.lattice):
        raise AlignmentError("field and problem live on different lattices")
    values = u.values
    nt = problem.lattice.nt
    out = np.zeros_like(values)
    for n in range(1, nt):
        lhs = problem.time_operator(values[n - 1], values[n], values[n + 1], n) - problem.spatial_operator(values[n], n)
        out[n] = lhs / problem.sqrt_g[n]
    out[:, problem.boundary] = 0.0
    out[0] = 2 * out[1] - out[2]
    out[nt] = 2 * out[nt - 1] - out[nt - 2]
    return GridField(problem.lattice, out)


# Boundary data


def gamma_mask(lattice: Lattice, windows: Iterable[Any] = ()) -> BoolArray:
    """Lateral nodes of the Gamma region on the (t, x[, y]) lattice, corners excluded.

    Each window names a wall and bounds the time and (in 2D) the along-wall coordinate.
    No windows means the whole lateral boundary.
    """
    windows = list(windows)
    t = lattice.t[:, None] if lattice.n == 1 else lattice.t[:, None, None]
    out = np.zeros(lattice.shape, dtype=bool)
    if not windows:
        for wall, _, _ in lattice.walls():
            out |= np.broadcast_to(lattice.wall_mask(wall), lattice.shape)
        return out
    points = lattice.spatial_points()
    for window in windows:
        axis, _ = divmod(window.wall, 2)
        mask = np.broadcast_to(lattice.wall_mask(window.wall), lattice.shape)
        mask = mask & (t >= window.t_min) & (t <= window.t_max)
        if lattice.n == 2:
            along = points[..., 1 - axis]
            mask = mask & (along >= window.s_min) & (along <= window.s_max)
        out |= mask
    return out


@dataclass(eq=False)
class BoundaryData:
    """Dirichlet samples on the lateral lattice nodes, supported in a Gamma mask"""

    lattice: Lattice
    values: RealArray = field(repr=False)
    gamma: BoolArray = field(repr=False)
    s_data: int = 2
    scale: float = 1.0
    """nominal amplitude epsilon"""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.lattice.shape or self.gamma.shape != self.lattice.shape:
            raise AlignmentError("boundary samples do not match the lattice")
        if np.any(self.values[~self.gamma] != 0):
            raise MaskError("boundary data are supported outside Gamma")
        for order in range(min(self.s_data, self.lattice.nt) + 1):
            if np.any(self.values[order] != 0):
                raise CompatibilityError(order)

    @classmethod
    def zero(cls, lattice: Lattice, gamma: BoolArray | None = None) -> Self:
        gamma = gamma_mask(lattice) if gamma is None else gamma
        return cls(lattice, np.zeros(lattice.shape), gamma, scale=0.0)

    @classmethod
    def from_waveform(cls, lattice: Lattice, cfg: Any, gamma: BoolArray | None = None, center: float | None = None) -> Self:
        """Bump (or bump-modulated sine) on one wall, cut to Gamma"""
        gamma = gamma_mask(lattice, cfg.gamma) if gamma is None else gamma
        center = cfg.center if center is None else center
        grids = np.meshgrid(lattice.t, *lattice.axes, indexing="ij")
        t = grids[0]
        profile = compact_bump((t - center) / cfg.width)
        if lattice.n == 2:
            axis, _ = divmod(cfg.wall, 2)
            profile = profile * compact_bump((grids[2 - axis] - cfg.along_center) / cfg.along_width)
        match cfg.waveform:
            case "zero":
                profile = np.zeros_like(profile)
            case "sine":
                profile = profile * np.sin(2 * np.pi * cfg.frequency * t)
        wall = np.broadcast_to(lattice.wall_mask(cfg.wall), lattice.shape)
        values = np.where(wall & gamma, cfg.amplitude * profile, 0.0)
        # samples too close to t = 0 break the discrete compatibility conditions
        values[: cfg.s_data + 1] = 0.0
        return cls(lattice, values, gamma, cfg.s_data, abs(cfg.amplitude))

    @classmethod
    def from_file(cls, lattice: Lattice, path: Path, gamma: BoolArray, s_data: int = 2) -> Self:
        header, data = read_grid(path)
        if tuple(header.dims) != lattice.shape:
            raise AlignmentError(f"{path} has dims {header.dims}, lattice is {lattice.shape}")
        values = np.where(gamma, data[0], 0.0)
        return cls(lattice, values, gamma, s_data, float(np.abs(values).max()))

    def __add__(self, other: "BoundaryData") -> "BoundaryData":
        if not self.lattice.same_as(other.lattice):
            raise AlignmentError("boundary data on different lattices")
        return BoundaryData(self.lattice, self.values + other.values, self.gamma | other.gamma, min(self.s_data, other.s_data), self.scale + other.scale)

    def scaled(self, factor: float) -> "BoundaryData":
        return BoundaryData(self.lattice, factor * self.values, self.gamma, self.s_data, abs(factor) * self.scale)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0


def boundary_battery(lattice: Lattice, cfg: Any, gamma: BoolArray | None = None) -> list[BoundaryData]:
    """Bumps with centers spread over the admissible time range"""
    gamma = gamma_mask(lattice, cfg.gamma) if gamma is None else gamma
    lo = cfg.width + (cfg.s_data + 1) * lattice.dt
    hi = max(lo, lattice.T - cfg.width)
    centers = np.linspace(lo, hi, cfg.battery + 2)[1:-1] if cfg.battery > 1 else [cfg.center]
    return [BoundaryData.from_waveform(lattice, cfg, gamma, float(c)) for c in centers]


def extend_boundary_data(f: BoundaryData) -> GridField:
    """h with h = f on the lateral nodes, supported in a collar of COLLAR_CELLS cells"""
    lattice = f.lattice
    values = np.zeros(lattice.shape, dtype=f.values.dtype)
    for wall, axis, index in lattice.walls():
        collar = max(1, min(COLLAR_CELLS, lattice.dims[axis] // 2))
        distance = np.abs(np.arange(lattice.dims[axis] + 1) - index)
        profile = smooth_step(distance / collar)
        shape = [1] * (lattice.n + 1)
        shape[axis + 1] = -1
        trace = np.take(f.values, [index], axis=axis + 1)
        values = values + trace * profile.reshape(shape)
    boundary = np.broadcast_to(lattice.boundary(), lattice.shape)
    values[boundary] = f.values[boundary]
    return GridField(lattice, values)


# Linear solves


def _taylor_start(problem: WaveProblem, u: FieldArray, rate: FieldArray, source: FieldArray, n: int, step: int) -> FieldArray:
    """u at level n + step from u and d_t u at level n"""
    dt = problem.lattice.dt
    other = n + step
    alpha = problem.alpha[n]
    alpha_t = (problem.alpha[other] - alpha) / (step * dt)
    acc = (problem.spatial_operator(u, n) + problem.sqrt_g[n] * source - alpha_t * rate) / alpha
    return u + step * dt * rate + 0.5 * dt**2 * acc


def solve_linear_wave(
    problem: WaveProblem,
    source: GridField | None = None,
    boundary: BoundaryData | None = None,
    u0: FieldArray | None = None,
    u1: FieldArray | None = None,
    direction: Direction = "forward",
) -> GridField:
    """box_g u = source with lateral data `boundary`.

    Forward solves take u0, u1 as u and d_t u at t = 0; backward solves take them at t = T.
    Missing data are zero.
    """
    lattice = problem.lattice
    nt = lattice.nt
    dtype = np.result_type(
        float,
        *(x.values for x in (source,) if x is not None),
        *(x.values for x in (boundary,) if x is not None),
        *(np.asarray(x) for x in (u0, u1) if x is not None),
    )
    F = np.zeros(lattice.shape, dtype=dtype) if source is None else source.values.astype(dtype)
    if source is not None and not source.lattice.same_as(lattice):
        raise AlignmentError("source and problem live on different lattices")
    data = np.zeros(lattice.shape, dtype=dtype) if boundary is None else boundary.values.astype(dtype)
    start = np.zeros(lattice.spatial_shape, dtype=dtype) if u0 is None else np.asarray(u0, dtype=dtype)
    rate = np.zeros(lattice.spatial_shape, dtype=dtype) if u1 is None else np.asarray(u1, dtype=dtype)
    mask = problem.boundary

    if direction == "forward":
        levels, step = range(1, nt), 1
        first, second = 0, 1
    else:
        levels, step = range(nt - 1, 0, -1), -1
        first, second = nt, nt - 1

    u = np.zeros(lattice.shape, dtype=dtype)
    u[first] = start
    u[first][mask] = data[first][mask]
    u[second] = _taylor_start(problem, u[first], rate, F[first], first, step)
    u[second][mask] = data[second][mask]
    logger.debug("linear %s solve on %s, CFL %.3f", direction, lattice.shape, problem.cfl_number)
    for n in levels:
        prev, nxt = n - step, n + step
        a_next = 0.5 * (problem.alpha[n] + problem.alpha[nxt])
        a_prev = 0.5 * (problem.alpha[n] + problem.alpha[prev])
        rhs = a_prev * (u[n] - u[prev]) + lattice.dt**2 * (problem.spatial_operator(u[n], n) + problem.sqrt_g[n] * F[n])
        u[nxt] = u[n] + rhs / a_next
        u[nxt][mask] = data[nxt][mask]
        if not np.all(np.isfinite(u[nxt])):
            raise InvalidInputError(f"linear solve blew up at time level {nxt}")
    return GridField(lattice, u)


def discrete_energy(problem: WaveProblem, u: GridField) -> RealArray:
    """Leapfrog energy at the half levels n + 1/2; conserved for static metrics with zero data"""
    values = u.values
    cell = float(np.prod(problem.lattice.spacing))
    dt = problem.lattice.dt
    out = []
    for n in range(problem.lattice.nt):
        a_half = 0.5 * (problem.alpha[n] + problem.alpha[n + 1])
        kinetic = np.sum(a_half * np.abs((values[n + 1] - values[n]) / dt) ** 2)
        potential = -np.sum(np.real(np.conj(values[n + 1]) * problem.spatial_operator(values[n], n)))
        out.append(0.5 * cell * (kinetic + potential))
    return np.array(out)


@dataclass(frozen=True)
class ConvergenceStudy:
    """Sup-norm errors against a manufactured solution over successive refinements"""

    shapes: list[tuple[int, ...]]
    errors: list[float]

    @property
    def orders(self) -> list[float]:
        return [float(np.log2(a / b)) for a, b in zip(self.errors, self.errors[1:])]

    @property
    def order(self) -> float:
        return min(self.orders)


def manufactured_solution(spec: MetricSpec) -> tuple[sp.Expr, sp.Expr]:
    """u = t^4 cos(x [+ y/2]) and box_g u, for metrics given by expressions"""
    if spec.sampled is not None:
        raise InvalidInputError("manufactured solutions need a metric given by expressions")
    symbols = spec.symbols
    u = symbols[0] ** 4 * sp.cos(sum(s / (i + 1) for i, s in enumerate(symbols[1:])))
    g = spec.symbolic_metric()
    inverse = g.inv()
    root = sp.sqrt(-g.det())
    box = -sum(sp.diff(root * inverse[j, k] * sp.diff(u, symbols[k]), symbols[j]) for j in range(spec.dim) for k in range(spec.dim)) / root
    return u, box


def manufactured_study(problem: WaveProblem, refinements: int = 2) -> ConvergenceStudy:
    """Solve box u = box u* with the lateral trace of u* on the lattice and `refinements` refinements of it"""
    u_expr, box_expr = manufactured_solution(problem.spec)
    symbols = problem.spec.symbols
    exact = sp.lambdify(symbols, u_expr, modules="numpy")
    forcing = sp.lambdify(symbols, box_expr, modules="numpy")
    shapes, errors = [], []
    for level in range(refinements + 1):
        lattice = problem.lattice.refine(2**level)
        fine = problem if level == 0 else WaveProblem(problem.spec, lattice)
        coords = np.moveaxis(lattice.points(), -1, 0)
        truth = np.broadcast_to(exact(*coords), lattice.shape).astype(float)
        source = GridField(lattice, np.broadcast_to(forcing(*coords), lattice.shape).astype(float))
        walls = np.broadcast_to(fine.boundary, lattice.shape)
        data = BoundaryData(lattice, np.where(walls, truth, 0.0), walls.copy(), s_data=0)
        u = solve_linear_wave(fine, source, data)
        shapes.append(lattice.shape)
        errors.append(float(np.abs(u.values - truth).max()))
        logger.debug("manufactured solution on %s: sup error %.3e", lattice.shape, errors[-1])
    return ConvergenceStudy(shapes, errors)


# Semilinear solves


@dataclass
class PicardReport:
    increments: list[float] = field(default_factory=list)
    """sup norm of w_{j+1} - w_j"""
    ratios: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.increments)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios, default=0.0)


@dataclass(frozen=True, eq=False)
class SemilinearSolution:
    u: GridField
    extension: GridField = field(repr=False)
    report: PicardReport


def solve_semilinear(
    problem: WaveProblem,
    V: NonlinearitySpec,
    f: BoundaryData,
    tolerance: float = PICARD_TOLERANCE,
    max_iterations: int = PICARD_MAX_ITERATIONS,
    samples: Mapping[int, RealArray] | None = None,
) -> SemilinearSolution:
    """Fixed point of  w -> solve(box w = -box h - V(h + w))  with zero data, u = h + w"""
    samples = V.sample(problem.lattice) if samples is None else samples
    h = extend_boundary_data(f)
    forcing = -apply_wave_operator(problem, h).values
    w = np.zeros(problem.lattice.shape, dtype=h.values.dtype)
    report = PicardReport()
    previous = None
    for iteration in range(1, max_iterations + 1):
        source = forcing - V.evaluate(samples, h.values + w)
        w_next = solve_linear_wave(problem, GridField(problem.lattice, source)).values
        increment = float(np.abs(w_next - w).max())
        scale = max(float(np.abs(w_next).max()), float(np.abs(h.values).max()))
        report.increments.append(increment)
        if previous is not None and previous > 0:
            ratio = increment / previous
            report.ratios.append(ratio)
            logger.debug("picard iteration %d: increment %.3e, ratio %.3e", iteration, increment, ratio)
            if ratio >= 1.0 and increment > tolerance * scale:
                raise SmallnessError(ratio)
        w = w_next
        previous = increment
        if increment <= tolerance * scale or scale == 0.0:
            report.converged = True
            break
    if not report.converged:
        raise SmallnessError(report.max_ratio, f"no convergence after {max_iterations} iterations")
    logger.debug("semilinear solve converged in %d iteration(s)", report.iterations)
    return SemilinearSolution(GridField(problem.lattice, h.values + w), h, report)


# Traces and the DtN map


def neumann_trace(problem: WaveProblem, u: GridField, mask: BoolArray) -> GridField:
    """Outward g0-unit normal derivative on the masked lateral nodes (zero elsewhere)"""
    lattice = problem.lattice
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != lattice.shape:
        raise MaskError(f"mask of shape {mask.shape} on lattice {lattice.shape}")
    lateral = np.zeros(lattice.shape, dtype=bool)
    for wall, _, _ in lattice.walls():
        lateral |= np.broadcast_to(lattice.wall_mask(wall), lattice.shape)
    if np.any(mask & ~lateral):
        raise MaskError("trace mask contains nodes off the lateral walls")
    values = u.values
    g0inv = np.linalg.inv(problem._fields[1])
    out = np.zeros_like(values)
    h = lattice.spacing
    for wall, axis, index in lattice.walls():
        wall_nodes = mask & np.broadcast_to(lattice.wall_mask(wall), lattice.shape)
        if not wall_nodes.any():
            continue
        side = 1 if index else -1
        layer = [np.take(values, [index - side * k], axis=axis + 1) for k in range(3)]
        normal_derivative = side * (3 * layer[0] - 4 * layer[1] + layer[2]) / (2 * h[axis])
        gradient = []
        for b in range(lattice.n):
            if b == axis:
                gradient.append(np.broadcast_to(normal_derivative, values.shape))
            else:
                gradient.append(np.gradient(values, h[b], axis=b + 1, edge_order=2))
        normal = np.zeros(lattice.n)
        normal[axis] = side
        raised = g0inv @ normal
        length = np.sqrt(np.einsum("...a,a->...", raised, normal))
        derivative = sum(raised[..., b] * gradient[b] for b in range(lattice.n)) / length
        out[wall_nodes] = derivative[wall_nodes]
    return GridField(lattice, out)


@dataclass(frozen=True, eq=False)
class DtNSample:
    data: BoundaryData = field(repr=False)
    trace: GridField = field(repr=False)
    mask: BoolArray = field(repr=False)
    report: PicardReport

    def rows(self) -> list[list[str]]:
        """(t, boundary index, value) for every masked node"""
        lattice = self.trace.lattice
        out = []
        nodes = np.argwhere(self.mask)
        flat_index = {tuple(idx): i for i, idx in enumerate(np.argwhere(lattice.boundary()))}
        for node in nodes:
            value = self.trace.values[tuple(node)]
            out.append([format_float(lattice.t[node[0]]), str(flat_index[tuple(node[1:])]), format_float(value)])
        return out

    def write(self, path: Path) -> Path:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "boundary_index", "value"])
            writer.writerows(self.rows())
        return Path(path)


def dtn_apply(
    problem: WaveProblem,
    V: NonlinearitySpec,
    f: BoundaryData,
    mask: BoolArray | None = None,
    samples: Mapping[int, RealArray] | None = None,
) -> DtNSample:
    """Lambda_V^Gamma f: semilinear solve followed by the Neumann trace on Gamma"""
    mask = f.gamma if mask is None else mask
    solution = solve_semilinear(problem, V, f, samples=samples)
    return DtNSample(f, neumann_trace(problem, solution.u, mask), mask, solution.report)


def dtn_discrepancy(problem: WaveProblem, first: NonlinearitySpec, second: NonlinearitySpec, battery: Sequence[BoundaryData]) -> float:
    """max over the battery of the sup distance between the two DtN traces"""
    worst = 0.0
    one, two = first.sample(problem.lattice), second.sample(problem.lattice)
    for f in battery:
        a = dtn_apply(problem, first, f, samples=one)
        b = dtn_apply(problem, second, f, samples=two)
        worst = max(worst, (a.trace - b.trace).sup_norm())
    return worst
