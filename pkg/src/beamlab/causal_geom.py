"""Null geodesics with boundary reflections, Fermi charts and causal sets.

Geodesics are integrated as the Hamiltonian flow of  H = g^ij xi_i xi_j / 2  with a
fixed-step RK4 scheme, so the null condition is a conserved first integral. A hit on
the lateral boundary either reflects the covector specularly or ends the geodesic.

A `FermiChart` re-integrates one unbroken segment together with a parallel frame
(E_0 = velocity, E_1 null with g(E_0, E_1) = 1, E_2.. orthonormal) and pulls the
metric back through

    F(s, z) = gamma(s) + z_a E_a(s) - 1/2 Q_ab(s) z_a z_b,   Q_ab = Gamma(E_a, E_b)

which makes the chart metric equal  2 ds dz_1 + dz_2^2 + ...  on gamma with vanishing
first derivatives there. Everything the beam code needs is stored as jets in z on a
grid of s values: the metric, its inverse, their s-derivatives and log sqrt|g|.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
import heapq
import logging
from typing import Literal

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline, CubicSpline
from scipy.linalg import null_space
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from beamlab.jets import Jet, JetSpline, basis, det, matinv, matmul
from beamlab.lattice import Lattice
from beamlab.lib.const import (
    EVENT_TOLERANCE,
    FAN_SIZE,
    GEODESIC_STEP_FACTOR,
    METRIC_EXTRA_DEGREES,
    MIN_CHART_RADIUS,
    TAU_CONJ,
    TAU_II,
    TAU_NULL,
    TAU_TRANS,
)
from beamlab.lib.errors import (
    DomainError,
    InvalidInputError,
    RadiusError,
    SelectionError,
    StiffnessError,
    TangencyError,
    TransportError,
    UnreachableError,
)
from beamlab.lib.types import BoolArray, RealArray
from beamlab.spacetime import MetricSpec, SpacetimePoint, TangentObject, causal_character, check_point

logger = logging.getLogger(__name__)

EndReason = Literal["exit", "cap"]

MAX_GEODESIC_STEPS = 1_000_000


# Geodesics


@dataclass(frozen=True, eq=False)
class GeodesicSegment:
    """One unbroken piece of a null geodesic, sampled at the integrator nodes"""

    index: int
    s: RealArray
    x: RealArray
    """(K, n+1) positions"""
    v: RealArray
    """(K, n+1) velocity vectors"""
    xi: RealArray
    """(K, n+1) covectors"""
    defect: RealArray
    """relative null defect |g(v, v)| / |v|^2 per node"""

    @property
    def start(self) -> float:
        return float(self.s[0])

    @property
    def end(self) -> float:
        return float(self.s[-1])

    @cached_property
    def spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.s, self.x, self.v, axis=0)

    def position(self, s: float | RealArray) -> RealArray:
        return self.spline(s)

    def velocity(self, s: float | RealArray) -> RealArray:
        return self.spline(s, 1)

    def reversed(self) -> "GeodesicSegment":
        """Same curve traversed backwards, s -> -s"""
        return GeodesicSegment(
            self.index, -self.s[::-1].copy(), self.x[::-1].copy(), -self.v[::-1].copy(), -self.xi[::-1].copy(), self.defect[::-1].copy()
        )


@dataclass(frozen=True, eq=False)
class BrokenNullGeodesic:
    """A null geodesic continued across the lateral boundary by specular reflection"""

    spec: MetricSpec = field(repr=False)
    segments: list[GeodesicSegment]
    reflection_times: list[float]
    reflection_points: list[RealArray]
    end_reason: EndReason
    s_plus: float | None
    """parameter of the first boundary hit going forward"""
    s_minus: float | None
    """parameter of the first boundary hit going backward"""
    backward: GeodesicSegment | None = None

    @property
    def start(self) -> RealArray:
        return self.segments[0].x[0]

    @property
    def max_defect(self) -> float:
        return max(float(seg.defect.max()) for seg in self.segments)

    def segment_at(self, s: float) -> GeodesicSegment:
        for seg in self.segments:
            if seg.start <= s <= seg.end:
                return seg
        raise InvalidInputError(f"parameter {s} is outside the geodesic")

    def position(self, s: float) -> RealArray:
        return self.segment_at(s).position(s)

    def through_segment(self) -> GeodesicSegment:
        """The unbroken piece through the start point: backward shot joined with the first segment"""
        first = self.segments[0]
        if self.backward is None or len(self.backward.s) < 2:
            return first
        back = self.backward
        return GeodesicSegment(
            first.index,
            np.concatenate([back.s[:-1], first.s]),
            np.concatenate([back.x[:-1], first.x]),
            np.concatenate([back.v[:-1], first.v]),
            np.concatenate([back.xi[:-1], first.xi]),
            np.concatenate([back.defect[:-1], first.defect]),
        )

    def rows(self) -> list[list[float]]:
        """CSV rows: segment, s, t, x.., xi.., null defect"""
        out = []
        for seg in self.segments:
            for i in range(len(seg.s)):
                out.append([seg.index, seg.s[i], *seg.x[i], *seg.xi[i], seg.defect[i]])
        return out

    def header(self) -> list[str]:
        coords = ["t", "x", "y"][: self.spec.dim]
        return ["segment", "s", *coords, *[f"xi_{c}" for c in coords], "null_defect"]


def _hamiltonian_rhs(spec: MetricSpec, state: RealArray) -> RealArray:
    d = spec.dim
    x, xi = state[:d], state[d:]
    jet = spec.taylor(x, 1)
    g = jet.coeffs[..., 0]
    dg = jet.coeffs[..., 1 : 1 + d]
    v = np.linalg.solve(g, xi)
    return np.concatenate([v, 0.5 * np.einsum("abk,a,b->k", dg, v, v)])


def _rk4(spec: MetricSpec, state: RealArray, h: float) -> RealArray:
    k1 = _hamiltonian_rhs(spec, state)
    k2 = _hamiltonian_rhs(spec, state + 0.5 * h * k1)
    k3 = _hamiltonian_rhs(spec, state + 0.5 * h * k2)
    k4 = _hamiltonian_rhs(spec, state + h * k3)
    out = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise StiffnessError(f"geodesic integrator produced non-finite state from {state}")
    return out


def _event_values(spec: MetricSpec, state: RealArray) -> tuple[float, float]:
    """(boundary level, cap level); positive means outside"""
    t = state[0]
    return float(spec.domain.level(state[1 : spec.dim])), float(max(-t, t - spec.T))


def g0_unit_normal(spec: MetricSpec, point: RealArray) -> RealArray:
    """Outward unit normal vector of the lateral boundary, as a space-time vector"""
    point = np.asarray(point, dtype=float)
    beta, g0 = spec.fields(point)
    conormal = spec.domain.outward_normal(point[1:])
    raised = np.linalg.solve(g0, conormal)
    return np.concatenate([[0.0], raised / np.sqrt(conormal @ raised)])


def _reflect_vector(spec: MetricSpec, point: RealArray, v: RealArray) -> tuple[RealArray, float]:
    g = spec.metric_at(point)
    nu = g0_unit_normal(spec, point)
    incidence = float(v @ g @ nu)
    return v - 2.0 * incidence / float(nu @ g @ nu) * nu, incidence


def reflect_at_boundary(spec: MetricSpec, boundary_point: SpacetimePoint, xi_in: TangentObject) -> TangentObject:
    """Specular reflection  xi - 2 g(xi, nu) / g(nu, nu) nu  at a point of the lateral boundary"""
    coords = check_point(spec, boundary_point, 1e-8)
    level = float(spec.domain.level(coords[1:]))
    if abs(level) > 1e-8 * max(1.0, spec.domain.diameter):
        raise InvalidInputError(f"{boundary_point} is not on the lateral boundary")
    g = spec.metric_at(coords)
    comps = np.asarray(xi_in.components, dtype=float)
    v = comps if xi_in.variance == "vector" else np.linalg.solve(g, comps)
    out, incidence = _reflect_vector(spec, coords, v)
    relative = incidence / np.linalg.norm(v)
    if abs(relative) < TAU_TRANS:
        raise TangencyError(boundary_point, relative)
    if relative < 0:
        raise InvalidInputError("direction is incoming; only outgoing directions are reflected")
    if xi_in.variance == "covector":
        out = g @ out
    return TangentObject(xi_in.base, out, xi_in.variance)


def _shoot(
    spec: MetricSpec,
    x0: RealArray,
    xi0: RealArray,
    s0: float,
    h: float,
    max_reflections: int,
) -> tuple[list[GeodesicSegment], list[float], list[RealArray], EndReason, float | None]:
    d = spec.dim
    state = np.concatenate([x0, xi0])
    s = s0
    segments: list[GeodesicSegment] = []
    reflection_times: list[float] = []
    reflection_points: list[RealArray] = []
    first_hit = None
    nodes_s, nodes = [s], [state]

    def close(index: int) -> None:
        states = np.array(nodes)
        x, xi = states[:, :d], states[:, d:]
        g = spec.metric_at(x)
        v = np.linalg.solve(g, xi[..., None])[..., 0]
        defect = np.abs(np.einsum("ki,kij,kj->k", v, g, v)) / np.einsum("ki,ki->k", v, v)
        order = np.argsort(nodes_s)
        segments.append(GeodesicSegment(index, np.array(nodes_s)[order], x[order], v[order], xi[order], defect[order]))

    for _ in range(MAX_GEODESIC_STEPS):
        new = _rk4(spec, state, h)
        level, cap = _event_values(spec, new)
        if level <= 0 and cap <= 0:
            s += h
            state = new
            nodes_s.append(s)
            nodes.append(state)
            continue

        kind = 0 if level > 0 and (cap <= 0 or level >= cap) else 1
        lo, hi = 0.0, abs(h)
        while hi - lo > EVENT_TOLERANCE:
            mid = 0.5 * (lo + hi)
            if _event_values(spec, _rk4(spec, state, np.sign(h) * mid))[kind] > 0:
                hi = mid
            else:
                lo = mid
        hit = _rk4(spec, state, np.sign(h) * hi)
        s += np.sign(h) * hi
        nodes_s.append(s)
        nodes.append(hit)
        if kind == 1:
            close(len(segments))
            return segments, reflection_times, reflection_points, "cap", first_hit

        if first_hit is None:
            first_hit = s
        g = spec.metric_at(hit[:d])
        v = np.linalg.solve(g, hit[d:])
        v_out, incidence = _reflect_vector(spec, hit[:d], v)
        relative = incidence / np.linalg.norm(v)
        if abs(relative) < TAU_TRANS:
            raise TangencyError(SpacetimePoint.of(hit[:d]), relative)
        close(len(segments))
        if len(reflection_times) >= max_reflections:
            return segments, reflection_times, reflection_points, "exit", first_hit
        reflection_times.append(s)
        reflection_points.append(hit[:d].copy())
        logger.debug("reflection at s = %.6f, x = %s", s, hit[:d])
        state = np.concatenate([hit[:d], g @ v_out])
        nodes_s, nodes = [s], [state]

    raise StiffnessError(f"geodesic did not leave the domain within {MAX_GEODESIC_STEPS} steps")


def shoot_null_geodesic(spec: MetricSpec, p: SpacetimePoint, xi: TangentObject, max_reflections: int = 1) -> BrokenNullGeodesic:
    """Integrate the broken null geodesic through p with direction xi"""
    coords = check_point(spec, p)
    character, _ = causal_character(spec, TangentObject(p, xi.components, xi.variance))
    if character != "null":
        raise InvalidInputError(f"direction {xi.components} is {character}, not null")
    g = spec.metric_at(coords)
    comps = np.asarray(xi.components, dtype=float)
    covector = g @ comps if xi.variance == "vector" else comps
    h = GEODESIC_STEP_FACTOR * spec.T

    segments, times, points, reason, s_plus = _shoot(spec, coords, covector, 0.0, h, max_reflections)
    back_segments, _, _, _, s_minus = _shoot(spec, coords, covector, 0.0, -h, 0)
    logger.debug("geodesic from %s: %d segment(s), end %s", coords, len(segments), reason)
    return BrokenNullGeodesic(spec, segments, times, points, reason, s_plus, s_minus, back_segments[0])


# Fermi charts


def initial_frame(spec: MetricSpec, x: RealArray, v: RealArray) -> RealArray:
    """(n, n+1) frame E_1.. at a point with null velocity v"""
    beta, g0 = spec.fields(x)
    v0, vs = v[0], v[1:]
    e1 = -np.concatenate([[v0], -vs]) / (2.0 * beta * v0**2)
    frame = [e1]
    if spec.n == 2:
        w = g0 @ vs
        e = np.array([-w[1], w[0]])
        e = e / np.sqrt(e @ g0 @ e)
        frame.append(np.concatenate([[0.0], e]))
    return np.array(frame)


def _polynomial_jet(const: np.ndarray, lin: np.ndarray, quad: np.ndarray, n: int, degree: int) -> Jet:
    """const_i + lin[a, i] z_a + quad[i, a, b] z_a z_b as jets with batch shape const.shape"""
    b = basis(n, degree)
    coeffs = np.zeros((*const.shape, b.size), dtype=np.result_type(const, lin, quad))
    coeffs[..., 0] = const
    unit = np.eye(n, dtype=int)
    for a in range(n):
        coeffs[..., b.index[tuple(unit[a])]] += lin[..., a, :]
        for c in range(n):
            coeffs[..., b.index[tuple(unit[a] + unit[c])]] += quad[..., :, a, c]
    return Jet(coeffs, n, degree)


@dataclass(frozen=True, eq=False)
class FermiChart:
    """Fermi coordinates (s, z) along one unbroken null geodesic segment"""

    spec: MetricSpec = field(repr=False)
    N: int
    degree: int
    s_range: tuple[float, float]
    s_ref: float
    s_grid: RealArray = field(repr=False)
    gamma: RealArray = field(repr=False)
    velocity: RealArray = field(repr=False)
    acceleration: RealArray = field(repr=False)
    frame: RealArray = field(repr=False)
    """(S, n, n+1)"""
    frame_ds: RealArray = field(repr=False)
    Q: RealArray = field(repr=False)
    """(S, n+1, n, n)"""
    Q_ds: RealArray = field(repr=False)
    metric: Jet = field(repr=False)
    metric_ds: Jet = field(repr=False)
    inverse: Jet = field(repr=False)
    inverse_ds: Jet = field(repr=False)
    ell: Jet = field(repr=False)
    """log sqrt|det g|"""
    ell_ds: Jet = field(repr=False)
    radius: float = 1.0
    """outer radius delta'"""

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def inner_radius(self) -> float:
        return 0.5 * self.radius

    @cached_property
    def gamma_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.s_grid, self.gamma, self.velocity, axis=0)

    @cached_property
    def velocity_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.s_grid, self.velocity, self.acceleration, axis=0)

    @cached_property
    def frame_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.s_grid, self.frame, self.frame_ds, axis=0)

    @cached_property
    def q_spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.s_grid, self.Q, self.Q_ds, axis=0)

    def spline(self, name: str) -> JetSpline:
        return JetSpline(self.s_grid, getattr(self, name))

    def map(self, s: RealArray, z: RealArray) -> RealArray:
        """F(s, z) for arrays s (...) and z (..., n)"""
        s = np.asarray(s, dtype=float)
        z = np.asarray(z, dtype=float)
        frame, q = self.frame_spline(s), self.q_spline(s)
        return self.gamma_spline(s) + np.einsum("...a,...ai->...i", z, frame) - 0.5 * np.einsum("...iab,...a,...b->...i", q, z, z)

    def jacobian(self, s: RealArray, z: RealArray) -> RealArray:
        """Columns dF/ds, dF/dz_a, shape (..., n+1, n+1)"""
        frame, q = self.frame_spline(s), self.q_spline(s)
        frame_ds, q_ds = self.frame_spline(s, 1), self.q_spline(s, 1)
        fs = self.velocity_spline(s) + np.einsum("...a,...ai->...i", z, frame_ds) - 0.5 * np.einsum("...iab,...a,...b->...i", q_ds, z, z)
        fz = np.moveaxis(frame, -2, -1) - np.einsum("...iab,...b->...ia", q, z)
        return np.concatenate([fs[..., None], fz], axis=-1)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.gamma)

    def locate(self, points: RealArray, iterations: int = 12) -> tuple[RealArray, RealArray, BoolArray]:
        """Invert the chart near gamma: (s, z, ok) for points (..., n+1)"""
        points = np.asarray(points, dtype=float)
        shape = points.shape[:-1]
        flat = points.reshape(-1, points.shape[-1])
        reach = 2.0 * self.radius * (1.0 + float(np.abs(self.frame).max()))
        dist, nearest = self._tree.query(flat, distance_upper_bound=reach)
        near = np.isfinite(dist)
        s = np.full(len(flat), np.nan)
        z = np.full((len(flat), self.n), np.nan)
        ok = np.zeros(len(flat), dtype=bool)
        if near.any():
            idx = nearest[near]
            target = flat[near]
            cur_s = self.s_grid[idx].copy()
            cur_z = np.zeros((len(idx), self.n))
            lo, hi = self.s_grid[0], self.s_grid[-1]
            for _ in range(iterations):
                residual = self.map(cur_s, cur_z) - target
                step = np.linalg.solve(self.jacobian(cur_s, cur_z), residual[..., None])[..., 0]
                cur_s = np.clip(cur_s - step[:, 0], lo, hi)
                cur_z = cur_z - step[:, 1:]
            residual = np.linalg.norm(self.map(cur_s, cur_z) - target, axis=-1)
            good = (residual < 1e-10 * max(1.0, self.spec.domain.diameter)) & (cur_s > lo) & (cur_s < hi)
            s[near], z[near], ok[near] = cur_s, cur_z, good
        return s.reshape(shape), z.reshape(*shape, self.n), ok.reshape(shape)

    def riccati_coefficients(self) -> tuple[RealArray, RealArray]:
        """C (n, n) and D (S, n, n) with D_ij = 1/4 d_i d_j g^11"""
        C = np.diag([0.0] + [2.0] * (self.n - 1))
        g11 = self.inverse[..., 1, 1]
        b = g11.basis
        D = np.zeros((len(self.s_grid), self.n, self.n))
        unit = np.eye(self.n, dtype=int)
        for i in range(self.n):
            for j in range(self.n):
                c = g11.coeffs[..., b.index[tuple(unit[i] + unit[j])]]
                D[:, i, j] = c / 2.0 if i == j else c / 4.0
        return C, D

    def on_gamma_errors(self) -> tuple[float, float]:
        """Max deviation of g from 2 ds dz_1 + dz'^2 on gamma and max first derivative there"""
        eta = np.zeros((self.spec.dim, self.spec.dim))
        eta[0, 1] = eta[1, 0] = 1.0
        eta[2:, 2:] = np.eye(self.n - 1)
        metric_error = float(np.abs(self.metric.constant_term - eta).max())
        first = self.metric.part(1)
        derivative_error = max(float(np.abs(first).max()), float(np.abs(self.metric_ds.constant_term).max()))
        return metric_error, derivative_error

    def reversed(self) -> "FermiChart":
        """Chart of the reversed segment:  F_r(s, z) = F(-s, -z)"""
        sign = (-1.0) ** self.metric.basis.exponents.sum(axis=1)

        def flip(jet: Jet, odd: bool = False) -> Jet:
            out = jet.coeffs[::-1] * sign
            return Jet(-out if odd else out, jet.nvars, jet.degree)

        lo, hi = self.s_range
        return FermiChart(
            spec=self.spec,
            N=self.N,
            degree=self.degree,
            s_range=(-hi, -lo),
            s_ref=-self.s_ref,
            s_grid=-self.s_grid[::-1].copy(),
            gamma=self.gamma[::-1].copy(),
            velocity=-self.velocity[::-1].copy(),
            acceleration=self.acceleration[::-1].copy(),
            frame=-self.frame[::-1].copy(),
            frame_ds=self.frame_ds[::-1].copy(),
            Q=self.Q[::-1].copy(),
            Q_ds=-self.Q_ds[::-1].copy(),
            metric=flip(self.metric),
            metric_ds=flip(self.metric_ds, odd=True),
            inverse=flip(self.inverse),
            inverse_ds=flip(self.inverse_ds, odd=True),
            ell=flip(self.ell),
            ell_ds=flip(self.ell_ds, odd=True),
            radius=self.radius,
        )


def _transport_rhs(spec: MetricSpec):
    d = spec.dim

    def rhs(_s: float, y: RealArray) -> RealArray:
        x, v = y[:d], y[d : 2 * d]
        frame = y[2 * d :].reshape(-1, d)
        gamma = spec.christoffel_at(x)
        acc = -np.einsum("ijk,j,k->i", gamma, v, v)
        frame_ds = -np.einsum("ijk,j,ak->ai", gamma, v, frame)
        return np.concatenate([v, acc, frame_ds.ravel()])

    return rhs


def _integrate_frame(spec: MetricSpec, s_ref: float, y0: RealArray, s_grid: RealArray) -> RealArray:
    rhs = _transport_rhs(spec)
    out = np.empty((len(s_grid), len(y0)))
    ahead = s_grid >= s_ref
    for mask, end in ((ahead, s_grid[-1]), (~ahead, s_grid[0])):
        if not mask.any():
            continue
        if end == s_ref:
            out[mask] = y0
            continue
        sol = solve_ivp(rhs, (s_ref, end), y0, method="DOP853", rtol=1e-12, atol=1e-12, dense_output=True)
        if not sol.success:
            raise TransportError(f"parallel transport failed: {sol.message}")
        out[mask] = sol.sol(s_grid[mask]).T
    return out


def build_fermi_chart(
    spec: MetricSpec,
    segment: GeodesicSegment,
    N: int,
    radius: float = 1.0,
    margin: float = 0.5,
    nodes: int = 401,
) -> FermiChart:
    """Fermi chart along a single unreflected segment, with metric jets to degree N + 5"""
    d, n = spec.dim, spec.n
    degree = N + METRIC_EXTRA_DEGREES
    a, b = segment.start, segment.end
    s_ref = 0.5 * (a + b)
    x_ref, v_ref = segment.position(s_ref), segment.velocity(s_ref)
    frame0 = initial_frame(spec, x_ref, v_ref)
    s_grid = np.linspace(a - margin, b + margin, nodes)
    states = _integrate_frame(spec, s_ref, np.concatenate([x_ref, v_ref, frame0.ravel()]), s_grid)

    gamma = states[:, :d]
    vel = states[:, d : 2 * d]
    frame = states[:, 2 * d :].reshape(-1, n, d)

    # Christoffel symbols and their first two derivatives along gamma
    cjet = spec.christoffel_jet(gamma, 2)
    cb = cjet.basis
    unit = np.eye(d, dtype=int)
    G0 = cjet.constant_term
    dG = np.stack([cjet.coeffs[..., cb.index[tuple(unit[l])]] for l in range(d)], axis=-1)
    ddG = np.empty((*G0.shape, d, d))
    for l in range(d):
        for m in range(d):
            c = cjet.coeffs[..., cb.index[tuple(unit[l] + unit[m])]]
            ddG[..., l, m] = 2.0 * c if l == m else c

    acc = -np.einsum("sijk,sj,sk->si", G0, vel, vel)
    frame_ds = -np.einsum("sijk,sj,sak->sai", G0, vel, frame)
    G_ds = np.einsum("sijkl,sl->sijk", dG, vel)
    G_dss = np.einsum("sijklm,sl,sm->sijk", ddG, vel, vel) + np.einsum("sijkl,sl->sijk", dG, acc)
    frame_dss = -(
        np.einsum("sijk,sj,sak->sai", G_ds, vel, frame)
        + np.einsum("sijk,sj,sak->sai", G0, acc, frame)
        + np.einsum("sijk,sj,sak->sai", G0, vel, frame_ds)
    )

    def contract(G, left, right):
        return np.einsum("sijk,saj,sbk->siab", G, left, right)

    Q = contract(G0, frame, frame)
    Q_ds = contract(G_ds, frame, frame) + contract(G0, frame_ds, frame) + contract(G0, frame, frame_ds)
    Q_dss = (
        contract(G_dss, frame, frame)
        + 2 * contract(G_ds, frame_ds, frame)
        + 2 * contract(G_ds, frame, frame_ds)
        + contract(G0, frame_dss, frame)
        + 2 * contract(G0, frame_ds, frame_ds)
        + contract(G0, frame, frame_dss)
    )

    # chart map pieces as jets in z
    y = _polynomial_jet(np.zeros((len(s_grid), d)), frame, -0.5 * Q, n, degree)
    F_s = _polynomial_jet(vel, frame_ds, -0.5 * Q_ds, n, degree)
    F_ss = _polynomial_jet(acc, frame_dss, -0.5 * Q_dss, n, degree)
    # dF/dz_a = E_a - Q_ab z_b and its s-derivative; lin axes are (S, a, b, i)
    no_quad = np.zeros((len(s_grid), n, d, n, n))
    F_z = _polynomial_jet(frame, -np.moveaxis(Q, 1, -1), no_quad, n, degree)
    F_zs = _polynomial_jet(frame_ds, -np.moveaxis(Q_ds, 1, -1), no_quad, n, degree)

    # metric Taylor jets at gamma, composed with the chart displacement
    taylor = spec.taylor(gamma, degree + 1)
    stacked = Jet.stack([taylor] + [taylor.diff(m) for m in range(d)], axis=1)
    subs = [Jet(y.coeffs[:, i, None, None, None, :], n, degree) for i in range(d)]
    composed = stacked.compose(subs)
    G = composed[:, 0]
    G_dot = None
    for m in range(d):
        term = composed[:, 1 + m] * F_s[:, m].expand(-1).expand(-1)
        G_dot = term if G_dot is None else G_dot + term

    tangents = Jet.stack([F_s] + [F_z[:, a] for a in range(n)], axis=1)  # (S, d, d) rows i, components k
    tangents_ds = Jet.stack([F_ss] + [F_zs[:, a] for a in range(n)], axis=1)
    tangents_T = Jet(np.swapaxes(tangents.coeffs, 1, 2), n, degree)
    tangents_ds_T = Jet(np.swapaxes(tangents_ds.coeffs, 1, 2), n, degree)

    metric = matmul(matmul(tangents, G), tangents_T)
    metric_ds = (
        matmul(matmul(tangents_ds, G), tangents_T)
        + matmul(matmul(tangents, G), tangents_ds_T)
        + matmul(matmul(tangents, G_dot), tangents_T)
    )
    inverse = matinv(metric)
    inverse_ds = -matmul(matmul(inverse, metric_ds), inverse)
    ell = (-det(metric)).log() * 0.5
    trace = None
    prod = matmul(inverse, metric_ds)
    for i in range(d):
        trace = prod[:, i, i] if trace is None else trace + prod[:, i, i]
    ell_ds = trace * 0.5

    chart = FermiChart(
        spec=spec,
        N=N,
        degree=degree,
        s_range=(a, b),
        s_ref=s_ref,
        s_grid=s_grid,
        gamma=gamma,
        velocity=vel,
        acceleration=acc,
        frame=frame,
        frame_ds=frame_ds,
        Q=Q,
        Q_ds=Q_ds,
        metric=metric,
        metric_ds=metric_ds,
        inverse=inverse,
        inverse_ds=inverse_ds,
        ell=ell,
        ell_ds=ell_ds,
        radius=radius,
    )
    metric_error, derivative_error = chart.on_gamma_errors()
    if metric_error > 1e-8 or derivative_error > 1e-6:
        raise TransportError(
            f"chart invariants violated: metric error {metric_error:.2e}, first-derivative error {derivative_error:.2e}"
        )
    chart = _fit_radius(chart, radius)
    logger.debug("Fermi chart on [%.4f, %.4f] with radius %.4g", a, b, chart.radius)
    return chart


def _sphere_directions(n: int, count: int = 16) -> RealArray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    angles = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _radius_ok(chart: FermiChart, radius: float) -> bool:
    directions = radius * _sphere_directions(chart.n)
    det_jet = det(chart.metric)
    values = -det_jet(directions[:, None, :])  # (K, S)
    if not np.all((values.real > 0.25) & (values.real < 4.0)):
        return False
    a, b = chart.s_range
    inside = (chart.s_grid >= a) & (chart.s_grid <= b)
    t = chart.gamma[:, 0]
    away = inside & (t >= radius) & (t <= chart.spec.T - radius)
    if not away.any():
        return True
    s = np.broadcast_to(chart.s_grid[away], (len(directions), int(away.sum())))
    z = np.broadcast_to(directions[:, None, :], (*s.shape, chart.n))
    tube_t = chart.map(s, z)[..., 0]
    return bool(np.all((tube_t >= 0.0) & (tube_t <= chart.spec.T)))


def _fit_radius(chart: FermiChart, radius: float) -> FermiChart:
    while not _radius_ok(chart, radius):
        radius *= 0.5
        logger.debug("shrinking chart radius to %.4g", radius)
        if radius < MIN_CHART_RADIUS:
            raise RadiusError(radius)
    if radius == chart.radius:
        return chart
    return replace(chart, radius=radius)


# Conjugate points


def jacobi_scan(
    s_grid: RealArray,
    C: RealArray,
    D: RealArray,
    tau: float = TAU_CONJ,
) -> float | None:
    """First zero of det Y for Y' = C Z, Z' = -D Y with Y = I, Z = 0 at s_grid[0]"""
    s_grid = np.asarray(s_grid, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = C.shape[0]
    D = np.asarray(D, dtype=float)
    if D.ndim == 2:
        D = np.broadcast_to(D, (len(s_grid), n, n))
    d_spline = CubicSpline(s_grid, D, axis=0)

    def rhs(s, y):
        Y, Z = y[: n * n].reshape(n, n), y[n * n :].reshape(n, n)
        return np.concatenate([(C @ Z).ravel(), (-d_spline(s) @ Y).ravel()])

    y0 = np.concatenate([np.eye(n).ravel(), np.zeros(n * n)])
    sol = solve_ivp(rhs, (s_grid[0], s_grid[-1]), y0, method="DOP853", rtol=1e-11, atol=1e-12, dense_output=True)
    fine = np.linspace(s_grid[0], s_grid[-1], 8 * len(s_grid))

    def det_y(s):
        return np.linalg.det(sol.sol(s)[: n * n].reshape(n, n))

    values = np.array([det_y(s) for s in fine])
    scale = np.abs(values).max()
    for i in range(1, len(fine)):
        if values[i - 1] * values[i] < 0:
            return float(brentq(det_y, fine[i - 1], fine[i], xtol=1e-12))
        if abs(values[i]) < tau * scale:
            return float(fine[i])
    return None


def conjugate_point_scan(chart: FermiChart) -> float | None:
    """First conjugate parameter along the chart, or None"""
    C, D = chart.riccati_coefficients()
    return jacobi_scan(chart.s_grid, C, D)


# Null-convexity


@dataclass(frozen=True)
class ConvexityReport:
    minimum: float
    values: RealArray = field(repr=False)
    violated: bool


def null_convexity_scan(spec: MetricSpec, samples: RealArray, tau: float = TAU_II) -> ConvexityReport:
    """min of II(V, V) = g(nabla_V nu, V) over null V tangent to the boundary at each sample"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if spec.n == 1:
        # the boundary of an interval has no spatial tangent directions, hence no null tangents
        values = np.zeros(len(samples))
        return ConvexityReport(0.0, values, False)
    h = spec.h_fd
    values = []
    for p in samples:
        beta, g0 = spec.fields(p)
        conormal = spec.domain.outward_normal(p[1:])
        tangent = np.array([-conormal[1], conormal[0]])
        tangent = tangent / np.sqrt(tangent @ g0 @ tangent)
        for sign in (1.0, -1.0):
            V = np.concatenate([[1.0], sign * np.sqrt(beta) * tangent])
            nu_plus = g0_unit_normal(spec, p + h * V)
            nu_minus = g0_unit_normal(spec, p - h * V)
            derivative = (nu_plus - nu_minus) / (2 * h)
            covariant = derivative + np.einsum("ijk,j,k->i", spec.christoffel_at(p), V, g0_unit_normal(spec, p))
            values.append(float(V @ spec.metric_at(p) @ covariant))
    values = np.array(values)
    minimum = float(values.min())
    return ConvexityReport(minimum, values, minimum < -tau)


# Recoverable set


@dataclass(frozen=True, eq=False)
class ReachableSet:
    """Earliest arrival from and latest departure to the lateral boundary, per spatial node"""

    lattice: Lattice
    tau_plus: RealArray = field(repr=False)
    sigma: RealArray = field(repr=False)
    mask: BoolArray = field(repr=False)

    def contains(self, point: SpacetimePoint | RealArray) -> bool:
        coords = point.as_array() if isinstance(point, SpacetimePoint) else np.asarray(point, dtype=float)
        index = self.lattice.index_of(coords)
        spatial = index[1:]
        return bool(self.tau_plus[spatial] < coords[0] < self.sigma[spatial])


def _neighbours(n: int) -> list[tuple[int, ...]]:
    if n == 1:
        return [(-1,), (1,)]
    return [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1) if (i, j) != (0, 0)]


def _travel_times(spec: MetricSpec, x: RealArray, targets: RealArray, t: float) -> RealArray:
    mids = 0.5 * (x + targets)
    points = np.concatenate([np.full((len(mids), 1), t), mids], axis=-1)
    beta, g0 = spec.fields(points)
    delta = targets - x
    return np.sqrt(np.einsum("ka,kab,kb->k", delta, g0, delta) / beta)


def reachable_set(spec: MetricSpec, lattice: Lattice) -> ReachableSet:
    """Nodes r with p << r << q for some p, q on the lateral boundary"""
    inside = lattice.inside(spec.domain)
    boundary = lattice.boundary(spec.domain) & inside
    coords = lattice.spatial_points()
    shape = lattice.spatial_shape
    steps = _neighbours(lattice.n)

    def neighbours(index):
        out = []
        for step in steps:
            j = tuple(i + s for i, s in zip(index, step))
            if all(0 <= a < b for a, b in zip(j, shape)) and inside[j]:
                out.append(j)
        return out

    tau = np.full(shape, np.inf)
    heap: list[tuple[float, tuple[int, ...]]] = []
    for index in zip(*np.nonzero(boundary)):
        tau[index] = 0.0
        heap.append((0.0, tuple(int(i) for i in index)))
    heapq.heapify(heap)
    while heap:
        time, index = heapq.heappop(heap)
        if time > tau[index] or time > spec.T:
            continue
        nbrs = neighbours(index)
        if not nbrs:
            continue
        costs = _travel_times(spec, np.broadcast_to(coords[index], (len(nbrs), lattice.n)), np.array([coords[j] for j in nbrs]), time)
        for j, cost in zip(nbrs, costs):
            if time + cost < tau[j]:
                tau[j] = time + cost
                heapq.heappush(heap, (time + cost, j))

    sigma = np.full(shape, -np.inf)
    heap = []
    for index in zip(*np.nonzero(boundary)):
        sigma[index] = spec.T
        heap.append((-spec.T, tuple(int(i) for i in index)))
    heapq.heapify(heap)
    while heap:
        negative, index = heapq.heappop(heap)
        time = -negative
        if time < sigma[index] or time < 0.0:
            continue
        nbrs = neighbours(index)
        if not nbrs:
            continue
        costs = _travel_times(spec, np.array([coords[j] for j in nbrs]), np.broadcast_to(coords[index], (len(nbrs), lattice.n)), time)
        for j, cost in zip(nbrs, costs):
            if time - cost > sigma[j]:
                sigma[j] = time - cost
                heapq.heappush(heap, (-(time - cost), j))

    t = lattice.t.reshape(-1, *([1] * lattice.n))
    mask = (tau[None] < t) & (t < sigma[None]) & inside[None]
    logger.debug("recoverable set covers %d of %d nodes", int(mask.sum()), mask.size)
    return ReachableSet(lattice, tau, sigma, mask)


# Covector selection


@dataclass(frozen=True, eq=False)
class CovectorSelection:
    point: SpacetimePoint
    theta: RealArray
    """(4, n+1) null covectors"""
    kappa: RealArray
    """(4,) positive weights with sum kappa_j theta_j = 0"""
    geodesics: list[GeodesicSegment] = field(repr=False)

    @property
    def closure(self) -> float:
        return float(np.abs(self.kappa @ self.theta).max())

    def multiplicity(self, order: int) -> list[tuple[int, float]]:
        """(beam, weight) list for an order-m interaction: beam 3 repeated m - 2 times"""
        if order < 3:
            raise InvalidInputError("interaction order must be at least 3")
        out = [(j, float(self.kappa[j])) for j in range(3)]
        out += [(3, float(self.kappa[3]) / (order - 2))] * (order - 2)
        return out


def _null_covector(spec: MetricSpec, p: RealArray, time_slot: float, direction: RealArray) -> RealArray:
    beta, g0 = spec.fields(p)
    spatial = np.asarray(direction, dtype=float)
    spatial = spatial / np.sqrt(beta * spatial @ np.linalg.solve(g0, spatial))
    return np.concatenate([[time_slot], abs(time_slot) * spatial])


def _admissible(spec: MetricSpec, p: SpacetimePoint, theta: RealArray) -> GeodesicSegment | None:
    vector = spec.inverse_metric_at(p.as_array()) @ theta
    try:
        geodesic = shoot_null_geodesic(spec, p, TangentObject(p, vector, "vector"), max_reflections=0)
    except (TangencyError, DomainError, StiffnessError):
        return None
    if geodesic.end_reason != "exit" or geodesic.s_minus is None:
        return None
    segment = geodesic.through_segment()
    try:
        chart = build_fermi_chart(spec, segment, N=0, radius=0.25, margin=0.0, nodes=101)
    except (TransportError, RadiusError):
        return None
    if conjugate_point_scan(chart) is not None:
        return None
    return segment


def _meet_only_at(point: RealArray, segments: list[GeodesicSegment], tolerance: float) -> bool:
    for i in range(len(segments)):
        for j in range(i + 1, len(segments)):
            a, b = segments[i].x, segments[j].x
            far_a = np.linalg.norm(a - point, axis=-1) > 4 * tolerance
            far_b = np.linalg.norm(b - point, axis=-1) > 4 * tolerance
            if far_a.any() and far_b.any():
                distance, _ = cKDTree(b[far_b]).query(a[far_a])
                if distance.min() < tolerance:
                    return False
    return True


def select_beam_covectors(
    spec: MetricSpec,
    p: SpacetimePoint,
    beams: int = 4,
    reach: ReachableSet | None = None,
    fan: int = FAN_SIZE,
) -> CovectorSelection:
    """Four null covectors at p with positive weights summing to zero"""
    if beams < 4:
        raise InvalidInputError("at least four beams are needed")
    coords = check_point(spec, p)
    if reach is not None and not reach.contains(coords):
        raise UnreachableError(p)

    candidates: list[tuple[RealArray, RealArray]] = []
    if spec.n == 1:
        theta = np.array([_null_covector(spec, coords, ts, [xs]) for ts, xs in ((1, 1), (1, -1), (-1, -1), (-1, 1))])
        candidates.append((theta, np.ones(4)))
    else:
        for k in range(fan):
            angles = 2 * np.pi * k / fan + 0.5 * np.pi * np.arange(4)
            theta = np.array([_null_covector(spec, coords, 1.0, [np.cos(a), np.sin(a)]) for a in angles])
            kernel = null_space(theta.T)
            if kernel.shape[1] != 1:
                continue
            kappa = kernel[:, 0]
            if np.any(np.abs(kappa) < 1e-8 * np.abs(kappa).max()):
                continue
            # negative weights are absorbed by flipping the covector
            theta = theta * np.sign(kappa)[:, None]
            kappa = np.abs(kappa)
            candidates.append((theta, kappa / kappa.max()))

    tolerance = 1e-3 * spec.domain.diameter
    for theta, kappa in candidates:
        segments = []
        for row in theta:
            segment = _admissible(spec, p, row)
            if segment is None:
                break
            segments.append(segment)
        else:
            if spec.n == 2 and not _meet_only_at(coords, segments, tolerance):
                continue
            logger.debug("covectors at %s: kappa = %s", coords, kappa)
            return CovectorSelection(p, theta, kappa, segments)
    raise SelectionError(f"no admissible covector quadruple at {coords}")
