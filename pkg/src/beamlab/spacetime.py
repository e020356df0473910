"""Product Lorentzian metrics  g = -beta dt^2 + g0(t, x)  on (0, T) x M.

Coefficients are sympy expressions in the symbols `t, x, y` (analytic mode) or
samples on a regular grid evaluated by spline interpolation. Both feed the same
vectorized evaluation interface: the beam code asks for Taylor jets of g at
many points at once, the lattice solver asks for beta and g0 on whole grids.

Public operations check that their points lie in the closed domain. The
underscored helpers skip the check, since geodesics and Fermi charts are
continued a little beyond the walls.
"""

from dataclasses import dataclass, field
import logging
from math import factorial
from pathlib import Path
from typing import Any

import dacite
import numpy as np
import sympy as sp
import yaml
from methodtools import lru_cache
from scipy.interpolate import RegularGridInterpolator

from beamlab.jets import Jet, basis, matinv
from beamlab.lib.const import H_FD_FACTOR, TAU_NULL
from beamlab.lib.errors import (
    ConfigurationError,
    DegeneracyError,
    DerivativeOrderError,
    DomainError,
    GeometryError,
    InvalidInputError,
    StencilError,
)
from beamlab.lib.types import CausalCharacter, DerivativeMode, RealArray, Variance

logger = logging.getLogger(__name__)

cache = lru_cache(maxsize=None)

T_SYM, X_SYM, Y_SYM = sp.symbols("t x y", real=True)
COORDINATE_SYMBOLS = (T_SYM, X_SYM, Y_SYM)


# Spatial domains


@dataclass(frozen=True)
class Interval:
    """M = [0, length]"""

    length: float = 1.0

    n = 1
    planar = True

    def level(self, x: RealArray) -> RealArray:
        x = np.asarray(x, dtype=float)[..., 0]
        return np.maximum(-x, x - self.length)

    def outward_normal(self, x: RealArray) -> RealArray:
        """Euclidean unit normal of the nearest wall"""
        x = np.asarray(x, dtype=float)[..., 0]
        return np.where(x > 0.5 * self.length, 1.0, -1.0)[..., None]

    def wall(self, x: RealArray) -> tuple[int, float]:
        x0 = float(np.asarray(x, dtype=float).ravel()[0])
        return (0, self.length) if x0 > 0.5 * self.length else (0, 0.0)

    @property
    def extent(self) -> tuple[tuple[float, float], ...]:
        return ((0.0, self.length),)

    @property
    def diameter(self) -> float:
        return self.length


@dataclass(frozen=True)
class Rectangle:
    """M = [0, lx] x [0, ly]"""

    lx: float = 1.0
    ly: float = 1.0

    n = 2
    planar = True

    def _face_levels(self, x: RealArray) -> RealArray:
        x = np.asarray(x, dtype=float)
        return np.stack(
            [-x[..., 0], x[..., 0] - self.lx, -x[..., 1], x[..., 1] - self.ly], axis=-1
        )

    def level(self, x: RealArray) -> RealArray:
        return self._face_levels(x).max(axis=-1)

    def outward_normal(self, x: RealArray) -> RealArray:
        face = self._face_levels(x).argmax(axis=-1)
        normals = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
        return normals[face]

    def wall(self, x: RealArray) -> tuple[int, float]:
        face = int(self._face_levels(np.asarray(x, dtype=float)).argmax())
        return [(0, 0.0), (0, self.lx), (1, 0.0), (1, self.ly)][face]

    @property
    def extent(self) -> tuple[tuple[float, float], ...]:
        return ((0.0, self.lx), (0.0, self.ly))

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.lx, self.ly))


@dataclass(frozen=True)
class Disk:
    """M = closed disk of `radius` around `center`"""

    radius: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    n = 2
    planar = False

    def level(self, x: RealArray) -> RealArray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def outward_normal(self, x: RealArray) -> RealArray:
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def wall(self, x: RealArray) -> tuple[int, float]:
        raise GeometryError("disk walls are curved")

    @property
    def extent(self) -> tuple[tuple[float, float], ...]:
        cx, cy = self.center
        return ((cx - self.radius, cx + self.radius), (cy - self.radius, cy + self.radius))

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


Domain = Interval | Rectangle | Disk


def contains(domain: Domain, x: RealArray, tol: float = 1e-12) -> RealArray:
    return domain.level(x) <= tol * max(1.0, domain.diameter)


# Sampled coefficients


@dataclass
class GridHeader:
    """Sidecar header of a binary grid file"""

    dims: list[int]
    extents: list[list[float]]
    components: list[str]
    dtype: str = "<f8"


def read_grid(path: Path) -> tuple[GridHeader, np.ndarray]:
    """Raw little-endian float64, row-major, components along the first axis"""
    path = Path(path)
    header_path = path.with_suffix(".yaml")
    if not path.exists() or not header_path.exists():
        raise ConfigurationError(f"sample grid {path} or its header is missing")
    header = dacite.from_dict(GridHeader, yaml.safe_load(header_path.read_text()))
    data = np.fromfile(path, dtype=np.dtype(header.dtype))
    shape = (len(header.components), *header.dims)
    if data.size != int(np.prod(shape)):
        raise ConfigurationError(f"{path}: expected {np.prod(shape)} samples, found {data.size}")
    return header, data.reshape(shape)


def write_grid(path: Path, values: np.ndarray, extents: list[list[float]], components: list[str]) -> list[Path]:
    path = Path(path)
    values = np.asarray(values)
    if values.ndim == len(extents):
        values = values[None]
    header = {
        "dims": list(values.shape[1:]),
        "extents": [list(map(float, e)) for e in extents],
        "components": components,
        "dtype": "<f8",
    }
    values.astype("<f8").tofile(path)
    header_path = path.with_suffix(".yaml")
    header_path.write_text(yaml.safe_dump(header, sort_keys=True))
    return [path, header_path]


@dataclass(frozen=True, eq=False)
class SampledMetric:
    """beta and g0 sampled on a regular (t, x[, y]) grid"""

    header: GridHeader
    values: np.ndarray = field(repr=False)

    @classmethod
    def load(cls, path: Path) -> "SampledMetric":
        header, values = read_grid(path)
        return cls(header, values)

    @cache
    def interpolators(self) -> dict[str, RegularGridInterpolator]:
        axes = [np.linspace(lo, hi, num) for (lo, hi), num in zip(self.header.extents, self.header.dims)]
        method = "cubic" if min(self.header.dims) >= 4 else "linear"
        return {
            name: RegularGridInterpolator(axes, self.values[i], method=method, bounds_error=False, fill_value=None)
            for i, name in enumerate(self.header.components)
        }

    def component(self, name: str, points: RealArray) -> RealArray:
        table = self.interpolators()
        if name not in table:
            raise ConfigurationError(f"sample grid has no component {name!r}")
        points = np.asarray(points, dtype=float)
        flat = points.reshape(-1, points.shape[-1])
        return table[name](flat).reshape(points.shape[:-1])


# Metric


def _g0_names(n: int) -> list[tuple[int, int, str]]:
    axes = "xy"
    return [(a, b, f"g0_{axes[a]}{axes[b]}") for a in range(n) for b in range(a, n)]


@dataclass(frozen=True, eq=False)
class MetricSpec:
    """-beta dt^2 + g0 on (0, T) x M"""

    n: int
    T: float
    domain: Domain
    beta: sp.Expr | None = None
    g0: tuple[tuple[sp.Expr, ...], ...] | None = None
    sampled: SampledMetric | None = None
    derivative_mode: DerivativeMode = "analytic"
    h_fd: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.n not in (1, 2) or self.domain.n != self.n:
            raise ConfigurationError(f"spatial dimension {self.n} does not match the domain")
        if self.T <= 0:
            raise ConfigurationError("T must be positive")
        if self.sampled is None and (self.beta is None or self.g0 is None):
            raise ConfigurationError("metric needs coefficient expressions or a sample grid")
        if self.sampled is not None and self.derivative_mode == "analytic":
            object.__setattr__(self, "derivative_mode", "finite-difference")
        if self.h_fd is None:
            object.__setattr__(self, "h_fd", H_FD_FACTOR * self.domain.diameter)
        if self.sampled is None:
            allowed = set(COORDINATE_SYMBOLS[: self.n + 1])
            used = set(sp.sympify(self.beta).free_symbols)
            for row in self.g0:
                for entry in row:
                    used |= sp.sympify(entry).free_symbols
            if not used <= allowed:
                raise ConfigurationError(f"unknown symbols {sorted(map(str, used - allowed))} in metric")

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def symbols(self) -> tuple[sp.Symbol, ...]:
        return COORDINATE_SYMBOLS[: self.n + 1]

    # symbolic side

    @cache
    def symbolic_metric(self) -> sp.Matrix:
        g = sp.zeros(self.dim, self.dim)
        g[0, 0] = -sp.sympify(self.beta)
        for a in range(self.n):
            for b in range(self.n):
                g[a + 1, b + 1] = sp.sympify(self.g0[a][b])
        return g

    @cache
    def _independent_entries(self) -> list[tuple[int, int]]:
        return [(0, 0)] + [(a + 1, b + 1) for a in range(self.n) for b in range(a, self.n)]

    @cache
    def _taylor_functions(self, order: int):
        """One lambdified function returning d^alpha g_jk / alpha! for every alpha up to `order`"""
        g = self.symbolic_metric()
        exps = basis(self.dim, order).exponents
        derivs: list[sp.Matrix] = [g]
        index = {tuple(exps[0]): 0}
        for i in range(1, len(exps)):
            var = int(np.nonzero(exps[i])[0][0])
            lowered = exps[i].copy()
            lowered[var] -= 1
            derivs.append(derivs[index[tuple(lowered)]].diff(self.symbols[var]))
            index[tuple(exps[i])] = i
        entries = self._independent_entries()
        exprs = []
        for i, d in enumerate(derivs):
            weight = 1
            for e in exps[i]:
                weight *= factorial(int(e))
            exprs.extend(d[j, k] / weight for j, k in entries)
        logger.debug("lambdifying %d metric derivative expressions", len(exprs))
        return sp.lambdify(self.symbols, exprs, modules="numpy", cse=True)

    # numeric side

    def fields(self, points: RealArray) -> tuple[RealArray, RealArray]:
        """beta (...) and g0 (..., n, n) at points (..., n+1), without domain checks"""
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        g0 = np.empty((*shape, self.n, self.n))
        if self.sampled is not None:
            beta = self.sampled.component("beta", points)
            for a, b, name in _g0_names(self.n):
                g0[..., a, b] = g0[..., b, a] = self.sampled.component(name, points)
            return beta, g0
        values = self._field_functions()(*np.moveaxis(points, -1, 0))
        beta = np.broadcast_to(np.asarray(values[0], dtype=float), shape).copy()
        for (a, b, _), value in zip(_g0_names(self.n), values[1:]):
            g0[..., a, b] = g0[..., b, a] = np.broadcast_to(np.asarray(value, dtype=float), shape)
        return beta, g0

    @cache
    def _field_functions(self):
        exprs = [sp.sympify(self.beta)] + [sp.sympify(self.g0[a][b]) for a, b, _ in _g0_names(self.n)]
        return sp.lambdify(self.symbols, exprs, modules="numpy", cse=True)

    def metric_at(self, points: RealArray) -> RealArray:
        beta, g0 = self.fields(points)
        g = np.zeros((*beta.shape, self.dim, self.dim))
        g[..., 0, 0] = -beta
        g[..., 1:, 1:] = g0
        return g

    def inverse_metric_at(self, points: RealArray) -> RealArray:
        beta, g0 = self.fields(points)
        ginv = np.zeros((*beta.shape, self.dim, self.dim))
        ginv[..., 0, 0] = -1.0 / beta
        ginv[..., 1:, 1:] = np.linalg.inv(g0)
        return ginv

    def taylor(self, points: RealArray, order: int) -> Jet:
        """Taylor jets of g_jk in the displacement from each point (no domain check)"""
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        b = basis(self.dim, order)
        if self.derivative_mode == "finite-difference":
            return self._fd_taylor(points, order)
        values = self._taylor_functions(order)(*np.moveaxis(points, -1, 0))
        entries = self._independent_entries()
        coeffs = np.zeros((*shape, self.dim, self.dim, b.size))
        for i in range(b.size):
            for e, (j, k) in enumerate(entries):
                value = np.broadcast_to(np.asarray(values[i * len(entries) + e], dtype=float), shape)
                coeffs[..., j, k, i] = value
                coeffs[..., k, j, i] = value
        return Jet(coeffs, self.dim, order)

    def _fd_taylor(self, points: RealArray, order: int) -> Jet:
        if order > 2:
            raise DerivativeOrderError(order, 2)
        h = self.h_fd
        b = basis(self.dim, order)
        shape = points.shape[:-1]
        coeffs = np.zeros((*shape, self.dim, self.dim, b.size))
        g = self.metric_at(points)
        coeffs[..., 0] = g
        unit = np.eye(self.dim)
        for i in range(self.dim):
            plus = self.metric_at(points + h * unit[i])
            minus = self.metric_at(points - h * unit[i])
            if order >= 1:
                e = [0] * self.dim
                e[i] = 1
                coeffs[..., b.index[tuple(e)]] = (plus - minus) / (2 * h)
            if order >= 2:
                e = [0] * self.dim
                e[i] = 2
                coeffs[..., b.index[tuple(e)]] = (plus - 2 * g + minus) / (2 * h * h)
                for k in range(i + 1, self.dim):
                    pp = self.metric_at(points + h * (unit[i] + unit[k]))
                    pm = self.metric_at(points + h * (unit[i] - unit[k]))
                    mp = self.metric_at(points - h * (unit[i] - unit[k]))
                    mm = self.metric_at(points - h * (unit[i] + unit[k]))
                    e = [0] * self.dim
                    e[i] = e[k] = 1
                    coeffs[..., b.index[tuple(e)]] = (pp - pm - mp + mm) / (4 * h * h)
        return Jet(coeffs, self.dim, order)

    def christoffel_at(self, points: RealArray) -> RealArray:
        """Gamma^i_jk (..., n+1, n+1, n+1) without domain checks"""
        jet = self.taylor(points, 1)
        g = jet.coeffs[..., 0]
        dg = np.stack([jet.diff(var).coeffs[..., 0] for var in range(self.dim)], axis=-1)
        # dg[..., l, k, j] = d_j g_lk
        lowered = 0.5 * (
            np.einsum("...lkj->...ljk", dg) + np.einsum("...ljk->...ljk", dg) - np.einsum("...jkl->...ljk", dg)
        )
        return np.einsum("...il,...ljk->...ijk", np.linalg.inv(g), lowered)

    def christoffel_jet(self, points: RealArray, order: int) -> Jet:
        """Taylor jets of Gamma^i_jk in the displacement, to degree `order`"""
        g = self.taylor(points, order + 1)
        ginv = matinv(g)
        dg = Jet.stack([g.diff(var) for var in range(self.dim)], axis=-1)
        d = self.dim
        lowered_coeffs = np.zeros((*g.shape[:-2], d, d, d, g.basis.size))
        for l in range(d):
            for j in range(d):
                for k in range(d):
                    lowered_coeffs[..., l, j, k, :] = 0.5 * (
                        dg.coeffs[..., l, k, j, :] + dg.coeffs[..., l, j, k, :] - dg.coeffs[..., j, k, l, :]
                    )
        lowered = Jet(lowered_coeffs, d, order + 1)
        out = Jet.zeros(d, order + 1, (*g.shape[:-2], d, d, d))
        for i in range(d):
            for l in range(d):
                out.coeffs[..., i, :, :, :] += (ginv[..., i, l].expand(-1).expand(-1) * lowered[..., l, :, :]).coeffs
        return out.with_degree(order)


def parse_expression(text: str | float) -> sp.Expr:
    """Coefficient expression in t, x, y"""
    if isinstance(text, (int, float)):
        return sp.Float(text)
    try:
        return sp.parse_expr(str(text), local_dict={str(s): s for s in COORDINATE_SYMBOLS})
    except (SyntaxError, TypeError, sp.SympifyError) as err:
        raise ConfigurationError(f"cannot parse expression {text!r}: {err}") from err


def minkowski(n: int = 1, T: float = 1.0, domain: Domain | None = None) -> MetricSpec:
    domain = domain or (Interval() if n == 1 else Rectangle())
    g0 = tuple(tuple(sp.Integer(1 if a == b else 0) for b in range(n)) for a in range(n))
    return MetricSpec(n=n, T=T, domain=domain, beta=sp.Integer(1), g0=g0, name="minkowski")


def conformal(factor: str | sp.Expr, n: int = 1, T: float = 1.0, domain: Domain | None = None) -> MetricSpec:
    """factor * (-dt^2 + flat spatial metric)"""
    domain = domain or (Interval() if n == 1 else Rectangle())
    f = parse_expression(factor) if isinstance(factor, str) else factor
    g0 = tuple(tuple(f if a == b else sp.Integer(0) for b in range(n)) for a in range(n))
    return MetricSpec(n=n, T=T, domain=domain, beta=f, g0=g0, name="conformal")


def static(beta: str | sp.Expr, g0: list[list[str | float]], T: float = 1.0, domain: Domain | None = None) -> MetricSpec:
    n = len(g0)
    domain = domain or (Interval() if n == 1 else Rectangle())
    b = parse_expression(beta) if isinstance(beta, str) else beta
    rows = tuple(tuple(parse_expression(e) if not isinstance(e, sp.Expr) else e for e in row) for row in g0)
    return MetricSpec(n=n, T=T, domain=domain, beta=b, g0=rows, name="static")


def sampled(path: Path, T: float, domain: Domain, h_fd: float | None = None) -> MetricSpec:
    return MetricSpec(n=domain.n, T=T, domain=domain, sampled=SampledMetric.load(path), h_fd=h_fd, name="custom-sampled")


# Points and tangent objects


@dataclass(frozen=True)
class SpacetimePoint:
    t: float
    x: tuple[float, ...]

    @classmethod
    def of(cls, coords: RealArray | list[float]) -> "SpacetimePoint":
        coords = np.asarray(coords, dtype=float)
        return cls(float(coords[0]), tuple(float(c) for c in coords[1:]))

    def as_array(self) -> RealArray:
        return np.array([self.t, *self.x], dtype=float)


@dataclass(frozen=True, eq=False)
class TangentObject:
    base: SpacetimePoint
    components: np.ndarray
    variance: Variance = "vector"

    def __post_init__(self):
        object.__setattr__(self, "components", np.asarray(self.components))


def check_point(spec: MetricSpec, p: SpacetimePoint, tol: float = 1e-12) -> RealArray:
    coords = p.as_array()
    if coords.size != spec.dim:
        raise InvalidInputError(f"point {p} does not have {spec.dim} coordinates")
    scale = max(1.0, spec.T)
    if coords[0] < -tol * scale or coords[0] > spec.T + tol * scale or not contains(spec.domain, coords[1:], tol):
        raise DomainError(p)
    return coords


def check_signature(g: RealArray) -> None:
    eigs = np.linalg.eigvalsh(np.asarray(g))
    negative = (eigs < 0).sum(axis=-1)
    if np.any(negative != 1) or np.any(np.abs(eigs).min(axis=-1) < 1e-14 * np.abs(eigs).max(axis=-1)):
        raise DegeneracyError("metric is degenerate or not Lorentzian")


def eval_metric(spec: MetricSpec, p: SpacetimePoint) -> tuple[RealArray, RealArray]:
    """g_jk(p) and g^jk(p)"""
    coords = check_point(spec, p)
    g = spec.metric_at(coords)
    check_signature(g)
    return g, np.linalg.inv(g)


def christoffel(spec: MetricSpec, p: SpacetimePoint) -> RealArray:
    """Gamma^i_jk(p), symmetric in the lower pair"""
    coords = check_point(spec, p)
    if spec.derivative_mode == "finite-difference":
        h = spec.h_fd
        lo, hi = coords - 2 * h, coords + 2 * h
        if lo[0] < 0 or hi[0] > spec.T or not all(
            contains(spec.domain, coords[1:] + s * h * e) for e in np.eye(spec.n) for s in (-1, 1)
        ):
            raise StencilError(f"finite-difference stencil of width {h:.3e} leaves the domain at {p}")
    return spec.christoffel_at(coords)


def metric_taylor(spec: MetricSpec, points: RealArray, order: int) -> Jet:
    """Taylor jets of g_jk in the displacement from each of `points`"""
    return spec.taylor(points, order)


def causal_character(spec: MetricSpec, v: TangentObject, tau_null: float = TAU_NULL) -> tuple[CausalCharacter, float]:
    """Classify by g(v, v), or g^-1 for covectors. Complex components (phase gradients) are classified by their real part."""
    comps = np.real(np.asarray(v.components))
    norm2 = float(np.dot(comps, comps))
    if norm2 == 0.0:
        raise InvalidInputError("zero tangent object has no causal character")
    g, ginv = eval_metric(spec, v.base)
    form = ginv if v.variance == "covector" else g
    value = float(comps @ form @ comps)
    if abs(value) <= tau_null * norm2:
        return "null", value
    return ("timelike" if value < 0 else "spacelike"), value


def musical(spec: MetricSpec, v: TangentObject) -> TangentObject:
    """Lower a vector with g_jk or raise a covector with g^jk"""
    g, ginv = eval_metric(spec, v.base)
    if v.variance == "vector":
        return TangentObject(v.base, g @ v.components, "covector")
    return TangentObject(v.base, ginv @ v.components, "vector")


def metric_from_config(section: Any) -> MetricSpec:
    """Build a catalog metric from the `metric` config section"""
    from beamlab.lib.config import MetricConfig

    cfg: MetricConfig = section
    domain = domain_from_config(cfg.domain)
    match cfg.kind:
        case "minkowski":
            spec = minkowski(cfg.n, cfg.T, domain)
        case "conformal":
            spec = conformal(cfg.factor, cfg.n, cfg.T, domain)
        case "static":
            spec = static(cfg.beta, cfg.g0, cfg.T, domain)
        case "custom-sampled":
            return sampled(Path(cfg.sample_file), cfg.T, domain, cfg.h_fd)
    if cfg.derivative_mode != spec.derivative_mode or cfg.h_fd is not None:
        spec = MetricSpec(
            n=spec.n,
            T=spec.T,
            domain=spec.domain,
            beta=spec.beta,
            g0=spec.g0,
            derivative_mode=cfg.derivative_mode,
            h_fd=cfg.h_fd,
            name=spec.name,
        )
    return spec


def domain_from_config(cfg: Any) -> Domain:
    match cfg.shape:
        case "interval":
            return Interval(cfg.length)
        case "rectangle":
            return Rectangle(cfg.lx, cfg.ly)
        case "disk":
            return Disk(cfg.radius, tuple(cfg.center))
    raise ConfigurationError(f"unknown domain shape {cfg.shape!r}")
