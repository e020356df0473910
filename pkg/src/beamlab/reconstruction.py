"""Recovery of V_3, V_4, ... at points of the recoverable set.

At a point p four null covectors with positive weights summing to zero are chosen.
A Gaussian beam runs along the geodesic of each one. The product of the beams
concentrates at p with combined phase

    S = sum_j kappa_j phi_j,  S(p) = 0,  dS(p) = 0,  Im S >= c d(., p)^2,

so the scaled interaction integral

    I(rho) = rho^((n+1)/2) int V e^(i rho S) prod a_j dV_g dt

tends to c_sp V(p) prod a_j(p). The coefficient difference enters the integral
either directly (`FieldOracle`) or through mixed DtN derivatives and the
boundary form of the integral (`DtnOracle`).
"""

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import logging
from pathlib import Path
from typing import Protocol

import numpy as np

from beamlab.causal_geom import CovectorSelection, ReachableSet, select_beam_covectors
from beamlab.gaussian_beam import GaussianBeam, build_beam
from beamlab.lattice import GridField, Lattice
from beamlab.lib.const import NODES_PER_EFOLD
from beamlab.lib.errors import (
    BeamLabError,
    BundleRejectedError,
    DegenerateBundleError,
    DependencyError,
    GeometryError,
    InvalidInputError,
    ResolutionError,
)
from beamlab.lib.helpers import compact_bump, format_float, least_squares_constant
from beamlab.lib.types import BoolArray, ComplexArray, RealArray
from beamlab.linearization import lateral_weights, linearized_hierarchy, mixed_derivative, source_polynomial
from beamlab.spacetime import MetricSpec, SpacetimePoint
from beamlab.wave_forward import (
    BoundaryData,
    NonlinearitySpec,
    WaveProblem,
    solve_linear_wave,
)

logger = logging.getLogger(__name__)

S_TOLERANCE = 1e-8
GRADIENT_TOLERANCE = 1e-6
AMPLITUDE_FLOOR = 1e-10


# Bundles


@dataclass(frozen=True, eq=False)
class BeamBundle:
    """Four beams through one point; beam 0 plays the backward solution"""

    selection: CovectorSelection
    beams: list[GaussianBeam] = field(repr=False)
    order: int = 3

    @property
    def point(self) -> RealArray:
        return self.selection.point.as_array()

    @property
    def kappa(self) -> RealArray:
        return self.selection.kappa

    @property
    def pattern(self) -> list[tuple[int, float]]:
        """(beam, weight) per factor of the order-m product"""
        return self.selection.multiplicity(self.order)

    def with_order(self, order: int) -> "BeamBundle":
        return BeamBundle(self.selection, self.beams, order)

    def factors(self, points: RealArray, rho: float) -> list[ComplexArray]:
        """Each beam of the pattern evaluated at frequency rho * weight"""
        return [self.beams[j].evaluate(points, rho, weight) for j, weight in self.pattern]

    def product(self, points: RealArray, rho: float) -> ComplexArray:
        out = np.ones(np.shape(points)[:-1], dtype=complex)
        for factor in self.factors(points, rho):
            out = out * factor
        return out

    def phase_sum(self, points: RealArray) -> tuple[ComplexArray, BoolArray]:
        """S at points and the mask where every beam is defined"""
        total = np.zeros(np.shape(points)[:-1], dtype=complex)
        inside = np.ones(np.shape(points)[:-1], dtype=bool)
        for j, weight in self.pattern:
            phi, _, mask = self.beams[j].parts(points, 1.0)
            total = total + weight * phi
            inside &= mask
        return total, inside

    def amplitude_product(self, rho: float) -> complex:
        """prod a_j(p) with the pattern's frequencies"""
        out = 1.0 + 0j
        for j, weight in self.pattern:
            _, amp, _ = self.beams[j].parts(self.point[None], rho * weight)
            out *= complex(amp[0])
        return out

    def nodes_per_efold(self, lattice: Lattice, rho: float) -> float:
        return min(self.beams[j].nodes_per_efold(lattice, rho, weight) for j, weight in self.pattern)


def build_bundle(
    spec: MetricSpec,
    point: SpacetimePoint,
    N: int,
    h0_scale: float = 1.0,
    reach: ReachableSet | None = None,
    order: int = 3,
    radius: float = 1.0,
    margin: float = 0.5,
    nodes: int = 401,
) -> BeamBundle:
    selection = select_beam_covectors(spec, point, reach=reach)
    beams = [build_beam(spec, segment, N, h0_scale, 0.0, radius, margin, nodes) for segment in selection.geodesics]
    return BeamBundle(selection, beams, order)


# Phase diagnostics


def _phase_derivatives(beam: GaussianBeam, point: RealArray) -> tuple[complex, RealArray, ComplexArray]:
    """phi, d phi and the Hessian of phi at a point of the beam's geodesic, in product coordinates"""
    chart = beam.chart
    s, z, ok = chart.locate(point[None])
    if not ok[0]:
        raise GeometryError(f"{point} is not covered by the beam chart")
    s = float(s[0])
    value = complex(beam.parts(point[None], 1.0)[0][0])
    J = np.linalg.inv(chart.jacobian(np.array(s), np.zeros(chart.n)))
    H = beam.phase.h_spline(s)
    second = np.zeros((chart.spec.dim,) * 3)
    second[:, 0, 0] = chart.velocity_spline(s, 1)
    frame_ds = chart.frame_spline(s, 1)
    for a in range(chart.n):
        second[:, 0, a + 1] = second[:, a + 1, 0] = frame_ds[a]
        for b in range(chart.n):
            second[:, a + 1, b + 1] = -chart.q_spline(s)[:, a, b]
    chart_hessian = np.zeros((chart.spec.dim, chart.spec.dim), dtype=complex)
    chart_hessian[1:, 1:] = 2 * H
    curvature = np.einsum("i,ibe->be", J[1], second)
    return value, J[1], J.T @ (chart_hessian - curvature) @ J


@dataclass(frozen=True)
class PhaseDiagnostics:
    value: float
    """|S(p)|"""
    gradient: float
    """|dS(p)|"""
    convexity: float
    """c in Im S >= c d^2 near p"""
    hessian: ComplexArray = field(repr=False)

    def check(self, s_tol: float = S_TOLERANCE, grad_tol: float = GRADIENT_TOLERANCE) -> None:
        if self.value > s_tol:
            raise BundleRejectedError("|S(p)|", self.value, s_tol)
        if self.gradient > grad_tol:
            raise BundleRejectedError("|dS(p)|", self.gradient, grad_tol)
        if self.convexity <= 0:
            raise BundleRejectedError("Im S convexity", self.convexity, 0.0)


def phase_sum_diagnostics(bundle: BeamBundle, shell: float | None = None, directions: int = 24) -> PhaseDiagnostics:
    p = bundle.point
    value = 0j
    gradient = np.zeros(len(p))
    hessian = np.zeros((len(p), len(p)), dtype=complex)
    for j, weight in bundle.pattern:
        phi, dphi, hess = _phase_derivatives(bundle.beams[j], p)
        value += weight * phi
        gradient = gradient + weight * dphi
        hessian = hessian + weight * hess

    shell = 0.05 * min(beam.chart.radius for beam in bundle.beams) if shell is None else shell
    rng = np.random.default_rng(0)
    unit = rng.normal(size=(directions, len(p)))
    unit /= np.linalg.norm(unit, axis=-1, keepdims=True)
    radii = shell * np.array([0.5, 0.75, 1.0])
    points = p + radii[:, None, None] * unit[None]
    S, inside = bundle.phase_sum(points)
    if not inside.all():
        raise GeometryError("the beam tubes do not cover a neighbourhood of the point")
    slopes = [least_squares_constant(radii**2, S[:, k].imag - value.imag) for k in range(directions)]
    diagnostics = PhaseDiagnostics(abs(value), float(np.linalg.norm(gradient)), float(min(slopes)), hessian)
    logger.debug("phase diagnostics at %s: |S| %.2e, |dS| %.2e, c %.3e", p, diagnostics.value, diagnostics.gradient, diagnostics.convexity)
    return diagnostics


def stationary_phase_constant(hessian: ComplexArray, sqrt_g: float) -> complex:
    """det(-i Hess S / 2 pi)^-1/2 sqrt|g|, principal branch on every eigenvalue"""
    eigenvalues = np.linalg.eigvals(-1j * hessian / (2 * np.pi))
    return complex(np.prod(1.0 / np.sqrt(eigenvalues)) * sqrt_g)


# Integrals


def _neighbourhood(lattice: Lattice, point: RealArray, half_width: float) -> tuple[slice, ...]:
    return lattice.window(point, np.full(len(point), half_width))


def oscillatory_integral(
    values: RealArray | GridField,
    bundle: BeamBundle,
    rho: float,
    problem: WaveProblem,
    half_width: float = 0.25,
) -> complex:
    """rho^((n+1)/2) * lattice quadrature of values * prod u_j dV_g dt near the point"""
    lattice = problem.lattice
    values = values.values if isinstance(values, GridField) else np.asarray(values)
    resolution = bundle.nodes_per_efold(lattice, rho)
    if resolution < NODES_PER_EFOLD:
        raise ResolutionError(resolution, NODES_PER_EFOLD)
    window = _neighbourhood(lattice, bundle.point, half_width)
    points = lattice.points()[window]
    product = bundle.product(points, rho)
    if not np.any(product != 0):
        raise GeometryError("the beams do not overlap on the lattice")
    weights = lattice.weights()[window] * problem.sqrt_g[window]
    integral = complex(np.sum(weights * values[window] * product))
    return integral * rho ** ((lattice.n + 1) / 2)


class Oracle(Protocol):
    def integral(self, bundle: BeamBundle, rho: float) -> complex: ...


@dataclass(eq=False)
class FieldOracle:
    """Ground truth: the coefficient difference integrated against quasimode products"""

    problem: WaveProblem
    first: NonlinearitySpec
    second: NonlinearitySpec
    half_width: float = 0.25

    def difference(self, order: int) -> RealArray:
        one = self.first.sample(self.problem.lattice).get(order)
        two = self.second.sample(self.problem.lattice).get(order)
        zero = np.zeros(self.problem.lattice.shape)
        return (zero if one is None else one) - (zero if two is None else two)

    def integral(self, bundle: BeamBundle, rho: float) -> complex:
        return oscillatory_integral(self.difference(bundle.order), bundle, rho, self.problem, self.half_width)


@dataclass(eq=False)
class DtnOracle:
    """Boundary measurements only: mixed DtN derivatives of beam traces paired with the backward beam on Gamma.

    For m >= 4 each configuration's measurement has its own R_m term removed, built from that
    configuration's V_3 .. V_{m-1}. Both configurations must share those coefficients.
    """

    problem: WaveProblem
    first: NonlinearitySpec
    second: NonlinearitySpec
    gamma: BoolArray = field(repr=False)
    eps0: float = 1e-2
    s_data: int = 2
    threads: int = 1

    def _boundary_data(self, values: ComplexArray) -> BoundaryData:
        values = np.where(self.gamma, values, 0.0)
        # compatibility: no data on the first s_data + 1 levels
        values[: self.s_data + 1] = 0.0
        return BoundaryData(self.problem.lattice, values, self.gamma, self.s_data)

    def check_shared_lower(self, order: int) -> None:
        """V_3 .. V_{order-1} must agree on the lattice before V_order can be compared"""
        lattice = self.problem.lattice
        one, two = self.first.sample(lattice), self.second.sample(lattice)
        zero = np.zeros(lattice.shape)
        differing = [k for k in range(3, order) if not np.allclose(one.get(k, zero), two.get(k, zero), rtol=0.0, atol=1e-12)]
        if differing:
            raise DependencyError(differing, f"orders {differing} differ between the two configurations")

    def lower_term(self, V: NonlinearitySpec, order: int, linear: Sequence[GridField], backward: ComplexArray) -> complex:
        """int R_m w0 dV_g dt from V's own V_3 .. V_{m-1}"""
        lower = NonlinearitySpec({k: c for k, c in V.coefficients.items() if k < order}, V.k_max)
        if order < 4 or not lower.coefficients:
            return 0j
        samples = lower.sample(self.problem.lattice)
        hierarchy = {block: u.values for block, u in linearized_hierarchy(self.problem, lower, linear, order).items()}
        rest, _ = source_polynomial(samples, [w.values for w in linear], hierarchy, order)
        return complex(np.sum(self.problem.lattice.weights() * self.problem.sqrt_g * rest * backward))

    def integral(self, bundle: BeamBundle, rho: float) -> complex:
        lattice = self.problem.lattice
        points = lattice.points()
        pattern = bundle.pattern
        forward = [bundle.beams[j].evaluate(points, rho, weight) for j, weight in pattern[1:]]
        j0, w0_weight = pattern[0]
        backward = bundle.beams[j0].evaluate(points, rho, w0_weight)
        order = len(forward)
        self.check_shared_lower(order)
        data = [self._boundary_data(u) for u in forward]
        size = sum(f.sup_norm() for f in data)
        if size == 0.0:
            raise GeometryError("the forward beams do not reach Gamma")
        eps = self.eps0 / size
        boundary = lateral_weights(self.problem, self.gamma)
        linear = [solve_linear_wave(self.problem, boundary=f) for f in data] if order >= 4 else []
        corrected = []
        for V in (self.first, self.second):
            derivative = mixed_derivative(self.problem, V, data, eps, order, trace_mask=self.gamma, threads=self.threads)
            raw = complex(np.sum(boundary * derivative.trace.values * backward))
            correction = self.lower_term(V, order, linear, backward)
            logger.debug("dtn oracle at rho = %g: raw %.6e, lower term %.3e", rho, abs(raw), abs(correction))
            corrected.append(raw - correction)
        return (corrected[0] - corrected[1]) * rho ** ((lattice.n + 1) / 2)


# Extraction


@dataclass(frozen=True)
class PointEstimate:
    point: RealArray
    status: str
    """"tested" or "untested" """
    order: int = 3
    rhos: list[float] = field(default_factory=list)
    integrals: list[complex] = field(default_factory=list)
    estimates: list[complex] = field(default_factory=list)
    error_bar: float = float("nan")
    reason: str = ""
    diagnostics: PhaseDiagnostics | None = None

    @property
    def value(self) -> complex:
        return self.estimates[-1] if self.estimates else complex("nan")

    def rows(self) -> list[list[str]]:
        coords = [format_float(c) for c in self.point]
        if self.status != "tested":
            return [[*coords, "", "", "", "", "", "", "", "", self.status, self.reason]]
        d = self.diagnostics
        phase = [format_float(d.value), format_float(d.gradient), format_float(d.convexity)] if d else ["", "", ""]
        return [
            [*coords, format_float(rho), format_float(i.real), format_float(i.imag), format_float(e.real), format_float(self.error_bar), *phase, self.status, ""]
            for rho, i, e in zip(self.rhos, self.integrals, self.estimates)
        ]


def stationary_phase_extract(
    integrals: Sequence[complex],
    rhos: Sequence[float],
    bundle: BeamBundle,
    diagnostics: PhaseDiagnostics,
    sqrt_g: float,
    constant: complex | None = None,
) -> tuple[list[complex], float]:
    """Estimates I(rho) / (c_sp prod a_j(p)) per rho and the error bar of the last one"""
    constant = stationary_phase_constant(diagnostics.hessian, sqrt_g) if constant is None else constant
    estimates = []
    for rho, integral in zip(rhos, integrals):
        amplitude = bundle.amplitude_product(rho)
        if abs(amplitude) < AMPLITUDE_FLOOR:
            raise DegenerateBundleError(amplitude)
        estimates.append(integral / (constant * amplitude))
    error = abs(estimates[-1] - estimates[-2]) if len(estimates) > 1 else float("inf")
    return estimates, float(error)


def calibrate_constant(bundle: BeamBundle, problem: WaveProblem, rho: float, bump: Callable[[RealArray], RealArray], half_width: float = 0.25) -> complex:
    """c_sp fitted from a known coefficient: I_bump(rho) / (bump(p) prod a_j(p))"""
    values = bump(problem.lattice.points())
    peak = float(bump(bundle.point[None])[0])
    if peak == 0.0:
        raise InvalidInputError("calibration bump vanishes at the point")
    integral = oscillatory_integral(values, bundle, rho, problem, half_width)
    return integral / (peak * bundle.amplitude_product(rho))


def bump_field(center: Sequence[float], width: float, height: float = 1.0) -> Callable[[RealArray], RealArray]:
    center = np.asarray(center, dtype=float)

    def bump(points: RealArray) -> RealArray:
        return height * compact_bump(np.linalg.norm(np.asarray(points) - center, axis=-1) / width)

    return bump


def recover_at_point(
    oracle: Oracle,
    bundle: BeamBundle,
    rhos: Sequence[float],
    problem: WaveProblem,
    constant: complex | None = None,
    s_tol: float = S_TOLERANCE,
    grad_tol: float = GRADIENT_TOLERANCE,
) -> PointEstimate:
    diagnostics = phase_sum_diagnostics(bundle)
    diagnostics.check(s_tol, grad_tol)
    rhos = sorted(float(r) for r in rhos)
    integrals = [oracle.integral(bundle, rho) for rho in rhos]
    sqrt_g = float(np.sqrt(-np.linalg.det(problem.spec.metric_at(bundle.point))))
    estimates, error = stationary_phase_extract(integrals, rhos, bundle, diagnostics, sqrt_g, constant)
    logger.debug("estimate at %s: %s +- %.2e", bundle.point, estimates[-1], error)
    return PointEstimate(bundle.point, "tested", bundle.order, rhos, integrals, estimates, error, "", diagnostics)


def recover_vm(
    m: int,
    oracle: Oracle,
    bundle: BeamBundle,
    rhos: Sequence[float],
    problem: WaveProblem,
) -> PointEstimate:
    """V_m at the bundle point, beam 3 repeated m - 2 times"""
    if m < 4:
        raise InvalidInputError("use the third-order recovery for m = 3")
    return recover_at_point(oracle, bundle.with_order(m), rhos, problem)


# Fields


@dataclass(frozen=True, eq=False)
class FieldReport:
    lattice: Lattice
    estimates: list[PointEstimate] = field(repr=False)

    @property
    def tested(self) -> list[PointEstimate]:
        return [e for e in self.estimates if e.status == "tested"]

    def field(self) -> GridField:
        """Estimates on the nodes nearest the tested points, zero elsewhere"""
        values = np.zeros(self.lattice.shape)
        for e in self.tested:
            values[self.lattice.index_of(e.point)] = e.value.real
        return GridField(self.lattice, values)

    def peak(self) -> PointEstimate | None:
        tested = self.tested
        return max(tested, key=lambda e: abs(e.value)) if tested else None

    def norm(self) -> float:
        return max((abs(e.value) for e in self.tested), default=0.0)

    def header(self) -> list[str]:
        coords = ["t", "x", "y"][: self.lattice.n + 1]
        return [*coords, "rho", "integral_real", "integral_imag", "estimate", "error_bar", "phase_value", "phase_gradient", "phase_convexity", "status", "reason"]

    def write(self, path: Path) -> Path:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(self.header())
            for e in self.estimates:
                writer.writerows(e.rows())
        return Path(path)


def candidate_points(reach: ReachableSet, stride: int = 8, points: Sequence[Sequence[float]] | None = None) -> list[RealArray]:
    """Explicit points, or every `stride`-th lattice node inside the recoverable set"""
    if points is not None:
        return [np.asarray(p, dtype=float) for p in points]
    lattice = reach.lattice
    coarse = tuple(slice(stride // 2, None, stride) for _ in lattice.shape)
    nodes = lattice.points()[coarse][reach.mask[coarse]]
    return list(nodes)


def reconstruct_v3_field(
    oracle: Oracle,
    problem: WaveProblem,
    reach: ReachableSet,
    rhos: Sequence[float],
    build: Callable[[SpacetimePoint], BeamBundle],
    points: Sequence[Sequence[float]] | None = None,
    stride: int = 8,
    constant: complex | None = None,
    s_tol: float = S_TOLERANCE,
    grad_tol: float = GRADIENT_TOLERANCE,
    threads: int = 1,
) -> FieldReport:
    """Point estimates over the recoverable set; a failing point is recorded as untested"""

    def estimate(coords: RealArray) -> PointEstimate:
        if not reach.contains(coords):
            return PointEstimate(coords, "untested", reason="outside the recoverable set")
        try:
            bundle = build(SpacetimePoint.of(coords))
            return recover_at_point(oracle, bundle, rhos, problem, constant, s_tol, grad_tol)
        except BeamLabError as err:
            logger.warning("point %s untested: %s", coords, err)
            return PointEstimate(coords, "untested", reason=str(err))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        estimates = list(pool.map(estimate, candidate_points(reach, stride, points)))
    report = FieldReport(problem.lattice, estimates)
    logger.info("reconstruction: %d of %d points tested", len(report.tested), len(estimates))
    return report
