"""Gaussian beams along null geodesics.

A beam lives in the Fermi chart (s, z) of one segment and has the form

    v = chi(|z| / delta') exp(i rho kappa phi) sum_k (rho kappa)^-k b_k

The phase phi = z_1 + z^T H z + ... is built degree by degree. H comes from the
Riccati system (Y' = C Z, Z' = -D Y, H = Z Y^-1). The higher degrees solve a
triangular linear ODE that keeps the eikonal defect g(dphi, dphi) vanishing to high
order on gamma. The amplitudes b_k solve the transport hierarchy

    2 <dphi, db_k> - (box phi) b_k = -i box b_{k-1}

Beams reflected at the lateral boundary are matched to the incident beam through
local Cauchy problems in product coordinates at the reflection point.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
import logging
from pathlib import Path

import numpy as np
import yaml
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from beamlab.causal_geom import BrokenNullGeodesic, FermiChart, GeodesicSegment, build_fermi_chart
from beamlab.jets import Jet, JetSpline, basis, det, matinv
from beamlab.lattice import GridField, Lattice
from beamlab.lib.const import (
    AMPLITUDE_EXTRA_DEGREES,
    CUTOFF_PLATEAU,
    DEFECT_WINDOW,
    NODES_PER_EFOLD,
    PHASE_EXTRA_DEGREES,
    TAU_CONJ,
)
from beamlab.lib.errors import (
    BeamConstructionError,
    GeometryError,
    InvalidInputError,
    JetSolveError,
    MatchingError,
    ResolutionError,
    SamplingError,
)
from beamlab.lib.helpers import continuous_sqrt, fit_slope, smooth_cutoff
from beamlab.lib.types import BoolArray, ComplexArray, Direction, RealArray, ResidualSource
from beamlab.spacetime import MetricSpec
from beamlab.wave_forward import WaveProblem, apply_wave_operator, solve_linear_wave

logger = logging.getLogger(__name__)

EXACT_LEVEL = 1e-13
"""Norms below this (relative to the beam size) count as exact zeros"""


# Chart calculus


@dataclass(frozen=True, eq=False)
class _ChartCalculus:
    """Inverse chart metric and log-volume jets at a batch of s values, at one degree"""

    g: Jet
    g_ds: Jet
    ell: Jet
    ell_ds: Jet

    @classmethod
    def at_nodes(cls, chart: FermiChart, degree: int) -> "_ChartCalculus":
        return cls(
            chart.inverse.with_degree(degree),
            chart.inverse_ds.with_degree(degree),
            chart.ell.with_degree(degree),
            chart.ell_ds.with_degree(degree),
        )

    @property
    def n(self) -> int:
        return self.g.nvars

    def up(self, i: int, j: int) -> Jet:
        return self.g[..., i, j]

    @cached_property
    def lower_order(self) -> list[Jet]:
        """L^j = d_i g^ij + g^ij d_i log sqrt|g|"""
        out = []
        for j in range(self.n + 1):
            acc = self.g_ds[..., 0, j] + self.up(0, j) * self.ell_ds
            for a in range(self.n):
                acc = acc + self.up(a + 1, j).diff(a) + self.up(a + 1, j) * self.ell.diff(a)
            out.append(acc)
        return out

    def box(self, u: Jet, u_s: Jet, u_ss: Jet) -> Jet:
        """-|g|^-1/2 d_i (|g|^1/2 g^ij d_j u) given the s-derivatives of u"""
        L = self.lower_order
        acc = self.up(0, 0) * u_ss + L[0] * u_s
        for a in range(self.n):
            acc = acc + 2 * (self.up(0, a + 1) * u_s.diff(a)) + L[a + 1] * u.diff(a)
            for b in range(self.n):
                acc = acc + self.up(a + 1, b + 1) * u.diff(a).diff(b)
        return -acc

    def raised(self, u: Jet, u_s: Jet) -> list[Jet]:
        """W^j = g^ji d_i u"""
        out = []
        for j in range(self.n + 1):
            acc = self.up(j, 0) * u_s
            for a in range(self.n):
                acc = acc + self.up(j, a + 1) * u.diff(a)
            out.append(acc)
        return out

    def eikonal(self, phi: Jet, rate: Jet) -> Jet:
        W = self.raised(phi, rate)
        acc = W[0] * rate
        for a in range(self.n):
            acc = acc + W[a + 1] * phi.diff(a)
        return acc


class _SplineCalculus:
    """Chart calculus interpolated at a single parameter value"""

    def __init__(self, chart: FermiChart):
        self._splines = [chart.spline(name) for name in ("inverse", "inverse_ds", "ell", "ell_ds")]

    def at(self, s: float, degree: int) -> _ChartCalculus:
        return _ChartCalculus(*(spline(s).with_degree(degree) for spline in self._splines))


def _eikonal_rate(calc: _ChartCalculus, phi: Jet, top: int) -> Jet:
    """d_s phi solved degree by degree from  g^ss P^2 + 2 P B + A = 0"""
    n = phi.nvars
    grad = [phi.diff(a) for a in range(n)]
    B = None
    A = None
    for a in range(n):
        term = calc.up(0, a + 1) * grad[a]
        B = term if B is None else B + term
        for b in range(n):
            term = calc.up(a + 1, b + 1) * grad[a] * grad[b]
            A = term if A is None else A + term
    b0 = B.constant_term
    rest = B - b0
    gss = calc.up(0, 0)
    rate = Jet.zeros(n, phi.degree, phi.shape, complex)
    slices = phi.basis.degree_slices
    for j in range(min(top, phi.degree) + 1):
        residual = gss * rate * rate + 2 * (rate * rest) + A
        rate.coeffs[..., slices[j]] = -residual.part(j) / (2.0 * np.asarray(b0)[..., None])
    return rate


def _rate_ds(calc: _ChartCalculus, phi: Jet, rate: Jet, top: int) -> Jet:
    """d_s of the eikonal rate, from the s-derivative of the eikonal equation"""
    n = phi.nvars
    grad = [phi.diff(a) for a in range(n)]
    grad_rate = [rate.diff(a) for a in range(n)]
    W_s = calc.up(0, 0) * rate
    B_dot = None
    A_dot = None
    for a in range(n):
        W_s = W_s + calc.up(0, a + 1) * grad[a]
        term = calc.g_ds[..., 0, a + 1] * grad[a] + calc.up(0, a + 1) * grad_rate[a]
        B_dot = term if B_dot is None else B_dot + term
        for b in range(n):
            term = calc.g_ds[..., a + 1, b + 1] * grad[a] * grad[b] + 2 * (calc.up(a + 1, b + 1) * grad_rate[a] * grad[b])
            A_dot = term if A_dot is None else A_dot + term
    numerator = calc.g_ds[..., 0, 0] * rate * rate + 2 * (rate * B_dot) + A_dot
    return (-(numerator / (W_s * 2.0))).truncate(top)


# Riccati system


def _check_h0(H0: ComplexArray, n: int) -> ComplexArray:
    H0 = np.atleast_2d(np.asarray(H0, dtype=complex))
    if H0.shape != (n, n):
        raise InvalidInputError(f"H0 must be {n}x{n}")
    if not np.allclose(H0, H0.T, atol=1e-12):
        raise InvalidInputError("H0 must be symmetric")
    if np.linalg.eigvalsh(H0.imag).min() <= 0:
        raise InvalidInputError("Im H0 must be positive definite")
    return H0


def _two_sided(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    s_hat: float,
    y0: np.ndarray,
    s_grid: RealArray,
    rtol: float = 1e-11,
    atol: float = 1e-12,
) -> tuple[np.ndarray, Callable[[float], np.ndarray]]:
    """Integrate from s_hat to both ends of the grid; values on the grid plus a dense evaluator"""
    out = np.empty((len(s_grid), len(y0)), dtype=y0.dtype)
    solutions = {}
    ahead = s_grid >= s_hat
    for key, mask, end in (("ahead", ahead, s_grid[-1]), ("behind", ~ahead, s_grid[0])):
        if not mask.any() or end == s_hat:
            out[mask] = y0
            continue
        sol = solve_ivp(rhs, (s_hat, end), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise BeamConstructionError(s_hat, f"beam ODE failed: {sol.message}")
        solutions[key] = sol.sol
        out[mask] = sol.sol(s_grid[mask]).T

    def evaluate(s: float) -> np.ndarray:
        key = "ahead" if s >= s_hat else "behind"
        if key not in solutions:
            return y0
        return solutions[key](s)

    return out, evaluate


def _riccati(chart: FermiChart, H0: ComplexArray, s_hat: float):
    n = chart.n
    C, D = chart.riccati_coefficients()
    d_spline = CubicSpline(chart.s_grid, D, axis=0)

    def rhs(s, y):
        Y, Z = y[: n * n].reshape(n, n), y[n * n :].reshape(n, n)
        return np.concatenate([(C @ Z).ravel(), (-d_spline(s) @ Y).ravel()])

    y0 = np.concatenate([np.eye(n).ravel(), H0.ravel()]).astype(complex)
    values, evaluate = _two_sided(rhs, s_hat, y0, chart.s_grid, rtol=1e-12, atol=1e-13)
    Y = values[:, : n * n].reshape(-1, n, n)
    Z = values[:, n * n :].reshape(-1, n, n)
    return Y, Z, evaluate


def _checked_riccati(chart: FermiChart, H0: ComplexArray, s_hat: float):
    Y, Z, evaluate = _riccati(chart, H0, s_hat)
    det_y = np.abs(np.linalg.det(Y))
    worst = int(np.argmin(det_y))
    if det_y[worst] < TAU_CONJ * det_y.max():
        raise BeamConstructionError(float(chart.s_grid[worst]), f"conjugate point near s = {chart.s_grid[worst]:.6g}")
    H = Z @ np.linalg.inv(Y)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    lowest = np.linalg.eigvalsh(H.imag).min(axis=-1)
    if lowest.min() <= 0:
        bad = int(np.argmin(lowest))
        raise BeamConstructionError(float(chart.s_grid[bad]), "Im H lost positivity")
    return H, Y, Z, evaluate


def solve_riccati(chart: FermiChart, H0: ComplexArray, s_hat: float | None = None) -> tuple[ComplexArray, ComplexArray, ComplexArray]:
    """H = Z Y^-1 on the chart grid, with Y = I and Z = H0 at s_hat"""
    H0 = _check_h0(H0, chart.n)
    s_hat = chart.s_range[0] if s_hat is None else s_hat
    H, Y, Z, _ = _checked_riccati(chart, H0, s_hat)
    return H, Y, Z


def _quadratic_coefficients(H: ComplexArray, b) -> ComplexArray:
    """Coefficients of z^T H z in the degree-2 slice of a basis"""
    n = H.shape[-1]
    out = np.zeros((*H.shape[:-2], b.degree_slices[2].stop - b.degree_slices[2].start), dtype=complex)
    start = b.degree_slices[2].start
    unit = np.eye(n, dtype=int)
    for i in range(n):
        for j in range(i, n):
            index = b.index[tuple(unit[i] + unit[j])] - start
            out[..., index] = H[..., i, i] if i == j else 2.0 * H[..., i, j]
    return out


def hessian_from_jet(jet: Jet) -> ComplexArray:
    """Symmetric H with z^T H z equal to the degree-2 part of the jet"""
    n = jet.nvars
    b = jet.basis
    unit = np.eye(n, dtype=int)
    H = np.zeros((*jet.shape, n, n), dtype=complex)
    for i in range(n):
        for j in range(i, n):
            c = jet.coeffs[..., b.index[tuple(unit[i] + unit[j])]]
            if i == j:
                H[..., i, i] = c
            else:
                H[..., i, j] = H[..., j, i] = 0.5 * c
    return H


# Phase


@dataclass(frozen=True, eq=False)
class PhaseJet:
    """Phase jets on the chart grid. phi, rate and rate_ds are carried at the chart metric degree"""

    chart: FermiChart = field(repr=False)
    N: int
    s_hat: float
    H0: ComplexArray
    H: ComplexArray = field(repr=False)
    Y: ComplexArray = field(repr=False)
    Z: ComplexArray = field(repr=False)
    phi: Jet = field(repr=False)
    rate: Jet = field(repr=False)
    """d_s phi"""
    rate_ds: Jet = field(repr=False)
    defect: Jet = field(repr=False)
    """eikonal defect g(dphi, dphi)"""
    box: Jet = field(repr=False)

    @property
    def degree(self) -> int:
        return self.N + PHASE_EXTRA_DEGREES

    @property
    def n(self) -> int:
        return self.chart.n

    def min_imag_eigenvalue(self) -> RealArray:
        return np.linalg.eigvalsh(self.H.imag).min(axis=-1)

    def invariant(self) -> RealArray:
        """det(Im H) |det Y|^2, constant along s"""
        return np.linalg.det(self.H.imag) * np.abs(np.linalg.det(self.Y)) ** 2

    @cached_property
    def h_spline(self) -> CubicSpline:
        return CubicSpline(self.chart.s_grid, self.H, axis=0)

    def riccati_residual(self, step: float = 1e-5) -> float:
        """max |H' + H C H + D| on interior nodes, H' by central differences of the H splines"""
        C, D = self.chart.riccati_coefficients()
        spline = self.h_spline
        s = self.chart.s_grid[2:-2]
        H = spline(s)
        derivative = (spline(s + step) - spline(s - step)) / (2 * step)
        return float(np.abs(derivative + H @ C @ H + D[2:-2]).max())


def build_phase_jet(
    chart: FermiChart,
    N: int,
    H0: ComplexArray,
    s_hat: float | None = None,
    initial: Jet | None = None,
) -> PhaseJet:
    """Phase to degree N + 3 with the eikonal defect vanishing to that degree on gamma.

    `initial` optionally prescribes the degree >= 3 coefficients at s_hat (reflected beams).
    """
    n = chart.n
    H0 = _check_h0(H0, n)
    s_hat = chart.s_range[0] if s_hat is None else float(s_hat)
    K = N + PHASE_EXTRA_DEGREES
    if chart.degree < K + 2:
        raise InvalidInputError(f"chart jets of degree {chart.degree} cannot carry a phase of degree {K}")
    H, Y, Z, riccati_eval = _checked_riccati(chart, H0, s_hat)

    b = basis(n, K)
    z1 = b.index[tuple(np.eye(n, dtype=int)[0])]
    quad = b.degree_slices[2]
    high = b.degree_slices[3].start
    splines = _SplineCalculus(chart)

    def phase_of(H_s: ComplexArray, higher: np.ndarray) -> Jet:
        coeffs = np.zeros((*H_s.shape[:-2], b.size), dtype=complex)
        coeffs[..., z1] = 1.0
        coeffs[..., quad] = _quadratic_coefficients(H_s, b)
        coeffs[..., high:] = higher
        return Jet(coeffs, n, K)

    def h_at(s: float) -> ComplexArray:
        y = riccati_eval(s)
        Y_s, Z_s = y[: n * n].reshape(n, n), y[n * n :].reshape(n, n)
        return Z_s @ np.linalg.inv(Y_s)

    def rhs(s, c):
        calc = splines.at(s, K)
        rate = _eikonal_rate(calc, phase_of(h_at(s), c), K)
        return rate.coeffs[high:]

    c0 = np.zeros(b.size - high, dtype=complex)
    if initial is not None:
        c0 = initial.with_degree(K).coeffs[high:].astype(complex)
    higher, _ = _two_sided(rhs, s_hat, c0, chart.s_grid, rtol=1e-10, atol=1e-13)

    calc = _ChartCalculus.at_nodes(chart, K)
    phi_k = phase_of(H, higher)
    rate_k = _eikonal_rate(calc, phi_k, K)
    rate_ds_k = _rate_ds(calc, phi_k, rate_k, K)

    top = chart.degree
    full = _ChartCalculus.at_nodes(chart, top)
    phi = phi_k.with_degree(top)
    rate = rate_k.with_degree(top)
    rate_ds = rate_ds_k.with_degree(top)
    phase = PhaseJet(
        chart=chart,
        N=N,
        s_hat=s_hat,
        H0=H0,
        H=H,
        Y=Y,
        Z=Z,
        phi=phi,
        rate=rate,
        rate_ds=rate_ds,
        defect=full.eikonal(phi, rate),
        box=full.box(phi, rate, rate_ds),
    )
    logger.debug("phase of degree %d built on %d nodes, min Im H eigenvalue %.3e", K, len(chart.s_grid), phase.min_imag_eigenvalue().min())
    return phase


# Amplitudes


@dataclass(frozen=True, eq=False)
class AmplitudeJet:
    """Amplitude hierarchy b_0 .. b_kmax; b_k carries degrees up to N + 1 - 2k"""

    phase: PhaseJet = field(repr=False)
    N: int
    b: list[Jet] = field(repr=False)
    b_ds: list[Jet] = field(repr=False)
    sources: list[Jet] = field(repr=False)
    """-i box b_{k-1} fed to each transport equation"""
    defects: list[Jet] = field(repr=False)
    """T_0 = transport(b_0), T_k = transport(b_k) + i box b_{k-1}"""
    tail: Jet = field(repr=False)
    """box b_kmax"""

    @property
    def chart(self) -> FermiChart:
        return self.phase.chart

    @property
    def orders(self) -> int:
        return len(self.b)

    def degree(self, k: int) -> int:
        return self.N + AMPLITUDE_EXTRA_DEGREES - 2 * k

    @property
    def leading(self) -> ComplexArray:
        """b_{0,0} on the grid"""
        return self.b[0].constant_term


def leading_amplitude(phase: PhaseJet) -> ComplexArray:
    """(det H0 det Y)^-1/2 on the grid, branch continued from s_hat in both directions"""
    values = np.linalg.det(phase.H0) * np.linalg.det(phase.Y)
    grid = phase.chart.s_grid
    out = np.empty(len(grid), dtype=complex)
    ahead = np.nonzero(grid >= phase.s_hat)[0]
    behind = np.nonzero(grid < phase.s_hat)[0][::-1]
    seed = complex(np.linalg.det(phase.H0))
    for index in (ahead, behind):
        if len(index) == 0:
            continue
        chain = np.concatenate([[seed], values[index]])
        out[index] = continuous_sqrt(chain, inverse=True)[1:]
    return out


def build_amplitude_jet(phase: PhaseJet, N: int | None = None, initial: Sequence[Jet] | None = None) -> AmplitudeJet:
    """Solve the transport hierarchy with b_{0,0}(s_hat) = det(H0)^-1/2 and zero other data"""
    N = phase.N if N is None else N
    chart = phase.chart
    n = chart.n
    top = chart.degree
    J0 = N + AMPLITUDE_EXTRA_DEGREES
    kmax = J0 // 2
    full = _ChartCalculus.at_nodes(chart, top)
    W = full.raised(phase.phi, phase.rate)

    ws_spline = JetSpline(chart.s_grid, W[0].with_degree(J0))
    wa_spline = JetSpline(chart.s_grid, Jet.stack([w.with_degree(J0) for w in W[1:]], axis=-1))
    box_spline = JetSpline(chart.s_grid, phase.box.with_degree(J0))

    def transport_rate(b: Jet, Ws: Jet, Wa: Jet, box_phi: Jet, source: Jet | None) -> Jet:
        acc = box_phi * b
        for a in range(n):
            acc = acc - 2 * (Wa[..., a] * b.diff(a))
        if source is not None:
            acc = acc + source
        return acc / (Ws * 2.0)

    b_list: list[Jet] = []
    b_ds_list: list[Jet] = []
    sources: list[Jet] = []
    defects: list[Jet] = []
    previous_box: Jet | None = None
    for k in range(kmax + 1):
        J = J0 - 2 * k
        bk = basis(n, J)
        source_nodes = None if previous_box is None else (previous_box * (-1j)).with_degree(J)
        source_spline = None if source_nodes is None else JetSpline(chart.s_grid, source_nodes)

        def rhs(s, c, J=J, source_spline=source_spline):
            src = None if source_spline is None else source_spline(s)
            rate = transport_rate(
                Jet(c, n, J),
                ws_spline(s).with_degree(J),
                wa_spline(s).with_degree(J),
                box_spline(s).with_degree(J),
                src,
            )
            return rate.coeffs

        c0 = np.zeros(bk.size, dtype=complex)
        if initial is not None and k < len(initial):
            c0 = initial[k].with_degree(J).coeffs.astype(complex)
        elif k == 0:
            c0[0] = 1.0 / np.sqrt(complex(np.linalg.det(phase.H0)))
        values, _ = _two_sided(rhs, phase.s_hat, c0, chart.s_grid, rtol=1e-10, atol=1e-13)
        b_nodes = Jet(values, n, J)
        b_ds_nodes = transport_rate(
            b_nodes,
            W[0].with_degree(J),
            Jet.stack([w.with_degree(J) for w in W[1:]], axis=-1),
            phase.box.with_degree(J),
            source_nodes,
        )
        b_dss_nodes = Jet(CubicSpline(chart.s_grid, b_ds_nodes.coeffs, axis=0)(chart.s_grid, 1), n, J)

        b_full, b_ds_full = b_nodes.with_degree(top), b_ds_nodes.with_degree(top)
        box_b = full.box(b_full, b_ds_full, b_dss_nodes.with_degree(top))
        defect = W[0] * b_ds_full * 2.0 - phase.box * b_full
        for a in range(n):
            defect = defect + 2 * (W[a + 1] * b_full.diff(a))
        if previous_box is not None:
            defect = defect + previous_box * 1j

        b_list.append(b_nodes)
        b_ds_list.append(b_ds_nodes)
        sources.append(source_nodes if source_nodes is not None else Jet.zeros(n, J, (len(chart.s_grid),), complex))
        defects.append(defect)
        previous_box = box_b

    logger.debug("amplitude hierarchy with %d orders built", kmax + 1)
    return AmplitudeJet(phase, N, b_list, b_ds_list, sources, defects, previous_box)


# Beams and sampling


@dataclass(frozen=True, eq=False)
class GaussianBeam:
    phase: PhaseJet
    amplitude: AmplitudeJet

    @property
    def chart(self) -> FermiChart:
        return self.phase.chart

    @cached_property
    def _splines(self) -> dict[str, JetSpline | list[JetSpline]]:
        grid = self.chart.s_grid
        K = self.phase.degree
        return {
            "phi": JetSpline(grid, self.phase.phi.with_degree(K)),
            "defect": JetSpline(grid, self.phase.defect),
            "b": [JetSpline(grid, b) for b in self.amplitude.b],
            "T": [JetSpline(grid, t) for t in self.amplitude.defects],
            "tail": JetSpline(grid, self.amplitude.tail),
        }

    def locate(self, points: RealArray) -> tuple[RealArray, RealArray, RealArray, BoolArray]:
        """Chart coordinates of points and the mask of points inside the support tube"""
        s, z, ok = self.chart.locate(points)
        r = np.where(ok, np.linalg.norm(np.nan_to_num(z), axis=-1), np.inf) / self.chart.radius
        return s, z, r, ok & (r < 0.5)

    def _pieces(self, s: RealArray, z: RealArray, lam: float) -> tuple[ComplexArray, ComplexArray]:
        splines = self._splines
        phase = np.exp(1j * lam * splines["phi"](s)(z))
        amp = sum(lam ** (-k) * spline(s)(z) for k, spline in enumerate(splines["b"]))
        return phase, amp

    def parts(self, points: RealArray, lam: float) -> tuple[ComplexArray, ComplexArray, BoolArray]:
        """phi and the cut-off amplitude at points, zero outside the tube"""
        points = np.asarray(points, dtype=float)
        phi = np.zeros(points.shape[:-1], dtype=complex)
        amp = np.zeros(points.shape[:-1], dtype=complex)
        s, z, r, inside = self.locate(points)
        if inside.any():
            splines = self._splines
            sv, zv = s[inside], z[inside]
            phi[inside] = splines["phi"](sv)(zv)
            amp[inside] = smooth_cutoff(r[inside]) * sum(lam ** (-k) * spline(sv)(zv) for k, spline in enumerate(splines["b"]))
        return phi, amp, inside

    def evaluate(self, points: RealArray, rho: float, kappa: float = 1.0) -> ComplexArray:
        lam = rho * kappa
        phi, amp, inside = self.parts(points, lam)
        return np.where(inside, np.exp(1j * lam * phi) * amp, 0.0)

    def residual(self, points: RealArray, rho: float, kappa: float = 1.0) -> ComplexArray:
        """box v from the defect jets; cutoff derivatives are not included"""
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape[:-1], dtype=complex)
        s, z, r, inside = self.locate(points)
        if not inside.any():
            return out
        lam = rho * kappa
        sv, zv = s[inside], z[inside]
        splines = self._splines
        phase, amp = self._pieces(sv, zv, lam)
        total = lam**2 * splines["defect"](sv)(zv) * amp
        total = total - 1j * lam * sum(lam ** (-k) * spline(sv)(zv) for k, spline in enumerate(splines["T"]))
        total = total + lam ** (-(self.amplitude.orders - 1)) * splines["tail"](sv)(zv)
        out[inside] = smooth_cutoff(r[inside]) * phase * total
        return out

    def is_exact(self) -> bool:
        """True when every stored defect vanishes (null plane waves)"""
        scale = max(1.0, float(np.abs(self.amplitude.leading).max()))
        jets = [self.phase.defect, *self.amplitude.defects, self.amplitude.tail]
        return all(float(np.abs(j.coeffs).max()) < EXACT_LEVEL * scale for j in jets)

    def nodes_per_efold(self, lattice: Lattice, rho: float, kappa: float = 1.0) -> float:
        """Lattice nodes across the narrowest transverse e-fold of |v|"""
        widest_imag = float(np.linalg.eigvalsh(self.phase.H.imag).max())
        width_z = 1.0 / np.sqrt(rho * kappa * widest_imag)
        stretch = float(np.linalg.norm(self.chart.frame, axis=-1).min())
        return width_z * stretch / max(lattice.dt, *lattice.spacing)


@dataclass(frozen=True, eq=False)
class BeamChain:
    """An incident beam followed by its reflections"""

    beams: list[GaussianBeam]

    def evaluate(self, points: RealArray, rho: float, kappa: float = 1.0) -> ComplexArray:
        return sum(beam.evaluate(points, rho, kappa) for beam in self.beams)

    def residual(self, points: RealArray, rho: float, kappa: float = 1.0) -> ComplexArray:
        return sum(beam.residual(points, rho, kappa) for beam in self.beams)

    def is_exact(self) -> bool:
        return all(beam.is_exact() for beam in self.beams)

    def nodes_per_efold(self, lattice: Lattice, rho: float, kappa: float = 1.0) -> float:
        return min(beam.nodes_per_efold(lattice, rho, kappa) for beam in self.beams)


@dataclass(frozen=True, eq=False)
class Quasimode:
    rho: float
    kappa: float
    beam: GaussianBeam | BeamChain = field(repr=False)
    grid: GridField = field(repr=False)
    support: BoolArray = field(repr=False)
    """lattice nodes inside some beam tube"""

    @property
    def lattice(self) -> Lattice:
        return self.grid.lattice

    def residual_field(self) -> GridField:
        return GridField(self.lattice, self.beam.residual(self.lattice.points(), self.rho, self.kappa))


def assemble_quasimode(beam: GaussianBeam | BeamChain, lattice: Lattice, rho: float, kappa: float = 1.0) -> Quasimode:
    if rho <= 0:
        raise InvalidInputError("rho must be positive")
    points = lattice.points()
    values = beam.evaluate(points, rho, kappa)
    beams = beam.beams if isinstance(beam, BeamChain) else [beam]
    support = np.zeros(lattice.shape, dtype=bool)
    for b in beams:
        support |= b.locate(points)[3]
    if not support.any():
        raise SamplingError("no lattice node lies inside the beam tube")
    logger.debug("quasimode rho = %g on %d nodes, sup %.3e", rho, int(support.sum()), np.abs(values).max())
    return Quasimode(rho, kappa, beam, GridField(lattice, values), support)


# Decay studies


@dataclass(frozen=True)
class DecayReport:
    rhos: list[float]
    norms: list[float]
    slope: float | None
    target: float
    exact: bool

    @property
    def passed(self) -> bool:
        return self.exact or (self.slope is not None and self.slope <= self.target + 0.3)


def _fit_top(rhos: Sequence[float], norms: Sequence[float], scale: float) -> tuple[float | None, bool]:
    if max(norms) <= EXACT_LEVEL * max(scale, 1.0):
        return None, True
    top = np.argsort(rhos)[-4:]
    slope, _ = fit_slope(np.asarray(rhos)[top], np.asarray(norms)[top])
    return slope, False


def residual_decay(
    beam: GaussianBeam | BeamChain,
    lattice: Lattice,
    rho_list: Sequence[float],
    k: int = 0,
    kappa: float = 1.0,
) -> DecayReport:
    """Lattice H^k norms of box v_rho and their log-log slope against rho"""
    if len(rho_list) < 4:
        raise InvalidInputError("at least four rho values are needed")
    rho_list = sorted(float(r) for r in rho_list)
    resolution = beam.nodes_per_efold(lattice, rho_list[-1], kappa)
    if resolution < NODES_PER_EFOLD:
        raise ResolutionError(resolution, NODES_PER_EFOLD)
    beams = beam.beams if isinstance(beam, BeamChain) else [beam]
    n = beams[0].chart.n
    N = beams[0].phase.N
    target = -((N + 1) / 2 + n / 4 - k - 2)
    points = lattice.points()
    norms = []
    for rho in rho_list:
        grid = GridField(lattice, beam.residual(points, rho, kappa))
        norms.append(grid.hk_norm(k) if k else grid.l2_norm())
        logger.debug("rho = %g: residual H^%d norm %.6e", rho, k, norms[-1])
    slope, exact = _fit_top(rho_list, norms, 1.0)
    return DecayReport(rho_list, norms, slope, target, exact or beam.is_exact())


def defect_profile(
    jet: Jet,
    chart: FermiChart,
    window: tuple[float, float] = DEFECT_WINDOW,
    samples: int = 8,
) -> tuple[RealArray, RealArray, float | None]:
    """max over gamma and |z| = r of |jet|, for r in the window, and the fitted log-log slope"""
    radii = np.geomspace(window[0], window[1], samples)
    lo, hi = chart.s_range
    nodes = (chart.s_grid >= lo) & (chart.s_grid <= hi)
    restricted = jet[nodes]
    if chart.n == 1:
        directions = np.array([[1.0], [-1.0]])
    else:
        angles = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    values = np.array([np.abs(restricted((r * directions)[:, None, :])).max() for r in radii])
    if values.max() < EXACT_LEVEL:
        return radii, values, None
    slope, _ = fit_slope(radii, values)
    return radii, values, slope


# Reflection


@dataclass(frozen=True, eq=False)
class _ProductCalculus:
    """Inverse metric and log-volume as Taylor jets in y = x - q"""

    g: Jet
    ell: Jet

    @classmethod
    def at(cls, spec: MetricSpec, q: RealArray, degree: int) -> "_ProductCalculus":
        metric = spec.taylor(q, degree + 1)
        return cls(matinv(metric), (-det(metric)).log() * 0.5)

    @property
    def d(self) -> int:
        return self.g.nvars

    @cached_property
    def lower_order(self) -> list[Jet]:
        out = []
        for j in range(self.d):
            acc = None
            for i in range(self.d):
                term = self.g[..., i, j].diff(i) + self.g[..., i, j] * self.ell.diff(i)
                acc = term if acc is None else acc + term
            out.append(acc)
        return out

    def _lift(self, u: Jet) -> Jet:
        return u.with_degree(self.g.degree)

    def inner(self, u: Jet, w: Jet) -> Jet:
        u, w = self._lift(u), self._lift(w)
        acc = None
        for i in range(self.d):
            for j in range(self.d):
                term = self.g[..., i, j] * u.diff(i) * w.diff(j)
                acc = term if acc is None else acc + term
        return acc

    def box(self, u: Jet) -> Jet:
        u = self._lift(u)
        acc = None
        for j in range(self.d):
            term = self.lower_order[j] * u.diff(j)
            for i in range(self.d):
                term = term + self.g[..., i, j] * u.diff(i).diff(j)
            acc = term if acc is None else acc + term
        return -acc

    def transport(self, phi: Jet, b: Jet) -> Jet:
        return self.inner(phi, b) * 2.0 - self.box(phi) * self._lift(b)


def _degree_system(theta_sharp: RealArray, surface: list[Jet], m: int, degree: int) -> np.ndarray:
    """Matrix of  u_m -> ([2 theta# . grad u_m]_{m-1}, [u_m o surface]_m)  on unit monomials"""
    d = len(theta_sharp)
    b = basis(d, degree)
    sl = b.degree_slices[m]
    count = sl.stop - sl.start
    coeffs = np.zeros((count, b.size))
    coeffs[np.arange(count), np.arange(sl.start, sl.stop)] = 1.0
    units = Jet(coeffs, d, degree)
    blocks = []
    if m >= 1:
        drift = None
        for i in range(d):
            term = units.diff(i) * (2.0 * theta_sharp[i])
            drift = term if drift is None else drift + term
        blocks.append(drift.part(m - 1))
    linear = [Jet(s.homogeneous(1).coeffs, s.nvars, s.degree) for s in surface]
    blocks.append(units.compose(linear).part(m))
    return np.concatenate(blocks, axis=1).T


def _solve_degree(matrix: np.ndarray, rhs: np.ndarray, m: int) -> np.ndarray:
    if matrix.shape[0] != matrix.shape[1] or np.linalg.cond(matrix) > 1e12:
        raise JetSolveError(m)
    return np.linalg.solve(matrix, rhs)


def cauchy_phase(
    calc: _ProductCalculus,
    theta: RealArray,
    surface: list[Jet],
    data: Jet,
    top: int,
) -> Jet:
    """Product-coordinate phase with first-order part theta, eikonal to degree `top`, matching data on the surface"""
    d = calc.d
    degree = calc.g.degree
    theta_sharp = calc.g.constant_term @ theta
    phi = Jet.zeros(d, degree, (), complex)
    phi.coeffs[phi.basis.degree_slices[1]] = theta
    surface = [s.with_degree(degree) for s in surface]
    data = data.with_degree(degree)
    for m in range(2, top + 1):
        matrix = _degree_system(theta_sharp, surface, m, degree)
        eik = calc.inner(phi, phi).part(m - 1)
        matched = phi.compose(surface).part(m)
        x = _solve_degree(matrix, np.concatenate([-eik, data.part(m) - matched]), m)
        phi.coeffs[phi.basis.degree_slices[m]] = x
    return phi


def cauchy_amplitude(
    calc: _ProductCalculus,
    phi: Jet,
    surface: list[Jet],
    data: Jet,
    top: int,
    source: Jet | None = None,
) -> Jet:
    """Product-coordinate amplitude solving transport(phi, b) = source to degree `top`"""
    d = calc.d
    degree = calc.g.degree
    theta = phi.part(1).real
    theta_sharp = calc.g.constant_term @ theta
    amp = Jet.zeros(d, degree, (), complex)
    surface = [s.with_degree(degree) for s in surface]
    data = data.with_degree(degree)
    source = None if source is None else source.with_degree(degree)
    for m in range(0, top + 1):
        matrix = _degree_system(theta_sharp, surface, m, degree)
        parts = []
        if m >= 1:
            residual = calc.transport(phi, amp)
            if source is not None:
                residual = residual - source
            parts.append(-residual.part(m - 1))
        parts.append(data.part(m) - amp.compose(surface).part(m))
        amp.coeffs[amp.basis.degree_slices[m]] = _solve_degree(matrix, np.concatenate(parts), m)
    return amp


def _chart_slice(chart: FermiChart, s: float, origin: RealArray, degree: int) -> list[Jet]:
    """F(s, z) - origin as d jets in z, with the (tiny) constant term dropped"""
    frame = chart.frame_spline(s)
    q = chart.q_spline(s)
    b = basis(chart.n, degree)
    unit = np.eye(chart.n, dtype=int)
    out = []
    for i in range(chart.spec.dim):
        coeffs = np.zeros(b.size)
        for a in range(chart.n):
            coeffs[b.index[tuple(unit[a])]] += frame[a, i]
            for c in range(chart.n):
                coeffs[b.index[tuple(unit[a] + unit[c])]] -= 0.5 * q[i, a, c]
        out.append(Jet(coeffs, chart.n, degree))
    return out


def _wall_crossing(chart: FermiChart, near: float) -> float:
    """Parameter where the chart geodesic meets the lateral boundary, near `near`"""
    domain = chart.spec.domain

    def level(s):
        return float(domain.level(chart.gamma_spline(s)[1:]))

    step = 0.05 * (chart.s_grid[-1] - chart.s_grid[0])
    lo, hi = max(near - step, chart.s_grid[0]), min(near + step, chart.s_grid[-1])
    if level(lo) * level(hi) > 0:
        raise MatchingError(f"geodesic does not cross the wall near s = {near:.6g}")
    return float(brentq(level, lo, hi, xtol=1e-13))


def _wall_frame(spec: MetricSpec, q: RealArray) -> RealArray:
    """(n, n+1) linear parametrization of the planar wall through q: time first, then along the wall"""
    if not spec.domain.planar:
        raise GeometryError("reflected beams need planar walls")
    axis, _ = spec.domain.wall(q[1:])
    out = [np.eye(spec.dim)[0]]
    for other in range(spec.n):
        if other != axis:
            out.append(np.eye(spec.dim)[1 + other])
    return np.array(out)


def build_reflected_beam(incident: GaussianBeam, chart_ref: FermiChart) -> GaussianBeam:
    """Beam on the reflected segment whose sum with the incident beam vanishes to high order on the wall"""
    spec = incident.chart.spec
    chart_inc = incident.chart
    N = incident.phase.N
    K = incident.phase.degree
    n, d = spec.n, spec.dim
    s_inc = _wall_crossing(chart_inc, chart_inc.s_range[1])
    s_ref = _wall_crossing(chart_ref, chart_ref.s_range[0])
    q = chart_inc.gamma_spline(s_inc)
    mismatch = float(np.linalg.norm(chart_ref.gamma_spline(s_ref) - q))
    logger.debug("reflection point %s, chart mismatch %.2e", q, mismatch)
    if mismatch > 1e-6 * max(1.0, spec.domain.diameter):
        raise MatchingError(f"incident and reflected charts meet the wall {mismatch:.2e} apart")

    degree = K + 2
    calc = _ProductCalculus.at(spec, q, degree)
    g_q = spec.metric_at(q)
    theta_inc = g_q @ chart_inc.gamma_spline(s_inc, 1)
    theta_ref = g_q @ chart_ref.gamma_spline(s_ref, 1)
    wall = _wall_frame(spec, q)
    if np.abs(wall @ (theta_inc - theta_ref)).max() > 1e-6 * np.abs(theta_inc).max():
        raise MatchingError("incident and reflected covectors disagree along the wall")

    splines = incident._splines
    surface_inc = _chart_slice(chart_inc, s_inc, q, degree)
    phi_data = splines["phi"](s_inc).with_degree(degree)
    Phi_inc = cauchy_phase(calc, theta_inc, surface_inc, phi_data, K)

    wall_map = [Jet.linear(wall[:, i], n, degree) for i in range(d)]
    Phi_ref = cauchy_phase(calc, theta_ref, wall_map, Phi_inc.compose(wall_map), K)

    surface_ref = _chart_slice(chart_ref, s_ref, q, degree)
    phi_init = Phi_ref.compose(surface_ref)
    linear = phi_init.part(1)
    expected = np.eye(n)[0]
    if np.abs(linear - expected).max() > 1e-6:
        raise MatchingError(f"reflected phase has first-order part {linear}, expected z_1")
    H0_ref = hessian_from_jet(phi_init)
    H0_ref = 0.5 * (H0_ref + H0_ref.T)
    if np.linalg.eigvalsh(H0_ref.imag).min() <= 0:
        raise MatchingError("reflected Hessian has no positive imaginary part")

    amp = incident.amplitude
    B_inc_prev = B_ref_prev = None
    initial = []
    for k in range(amp.orders):
        J = amp.degree(k)
        data = splines["b"][k](s_inc).with_degree(degree)
        source_inc = None if B_inc_prev is None else calc.box(B_inc_prev) * (-1j)
        B_inc = cauchy_amplitude(calc, Phi_inc, surface_inc, data, J, source_inc)
        source_ref = None if B_ref_prev is None else calc.box(B_ref_prev) * (-1j)
        B_ref = cauchy_amplitude(calc, Phi_ref, wall_map, -B_inc.compose(wall_map), J, source_ref)
        initial.append(B_ref.compose(surface_ref).with_degree(J))
        B_inc_prev, B_ref_prev = B_inc, B_ref

    phase = build_phase_jet(chart_ref, N, H0_ref, s_hat=s_ref, initial=phi_init.with_degree(K))
    amplitude = build_amplitude_jet(phase, N, initial=initial)
    return GaussianBeam(phase, amplitude)


def build_beam(
    spec: MetricSpec,
    segment: GeodesicSegment,
    N: int,
    h0_scale: float = 1.0,
    s_hat: float | None = None,
    radius: float = 1.0,
    margin: float = 0.5,
    nodes: int = 401,
) -> GaussianBeam:
    """Beam on one unbroken segment with H0 = i h0_scale I"""
    chart = build_fermi_chart(spec, segment, N, radius=radius, margin=margin, nodes=nodes)
    H0 = 1j * h0_scale * np.eye(spec.n)
    phase = build_phase_jet(chart, N, H0, s_hat)
    return GaussianBeam(phase, build_amplitude_jet(phase, N))


def build_beam_chain(
    spec: MetricSpec,
    geodesic: BrokenNullGeodesic,
    N: int,
    h0_scale: float = 1.0,
    radius: float = 1.0,
    margin: float = 0.5,
    nodes: int = 401,
) -> BeamChain:
    """Incident beam on the through-segment, then one matched beam per reflection"""
    beams = [build_beam(spec, geodesic.through_segment(), N, h0_scale, None, radius, margin, nodes)]
    for segment in geodesic.segments[1:]:
        chart = build_fermi_chart(spec, segment, N, radius=radius, margin=margin, nodes=nodes)
        beams.append(build_reflected_beam(beams[-1], chart))
    logger.info("beam chain with %d beam(s), N = %d", len(beams), N)
    return BeamChain(beams)


# Boundary smallness


def wall_points(lattice: Lattice, spec: MetricSpec, q: RealArray) -> tuple[RealArray, tuple[float, ...]]:
    """Lattice nodes of the wall through q as a (t[, along]) grid of space-time points, with the grid steps"""
    axis, coordinate = spec.domain.wall(q[1:])
    others = [i for i in range(lattice.n) if i != axis]
    grids = np.meshgrid(lattice.t, *[lattice.axes[i] for i in others], indexing="ij")
    points = np.zeros((*grids[0].shape, spec.dim))
    points[..., 0] = grids[0]
    points[..., 1 + axis] = coordinate
    for grid, other in zip(grids[1:], others):
        points[..., 1 + other] = grid
    steps = (lattice.dt, *[lattice.spacing[i] for i in others])
    return points, steps


def _wall_norm(values: ComplexArray, steps: tuple[float, ...], k: int, window: BoolArray | None = None) -> float:
    """Trapezoid H^k norm on the wall grid; derivatives use the full grid, sums only the window"""
    weights = np.ones_like(values, dtype=float)
    for axis, h in enumerate(steps):
        w = np.full(values.shape[axis], h)
        w[0] = w[-1] = 0.5 * h
        shape = [1] * values.ndim
        shape[axis] = -1
        weights = weights * w.reshape(shape)
    if window is not None:
        weights = np.where(window, weights, 0.0)
    total = float(np.sum(weights * np.abs(values) ** 2))
    derivatives = [values]
    for _ in range(k):
        derivatives = [np.gradient(u, steps[a], axis=a, edge_order=2) for u in derivatives for a in range(values.ndim)]
        total += sum(float(np.sum(weights * np.abs(u) ** 2)) for u in derivatives)
    return float(np.sqrt(total))


def matched_window(incident: GaussianBeam, reflected: GaussianBeam, points: RealArray) -> BoolArray:
    """Wall nodes where both cutoffs are identically 1"""
    _, _, r_inc, in_inc = incident.locate(points)
    _, _, r_ref, in_ref = reflected.locate(points)
    return in_inc & in_ref & (r_inc < CUTOFF_PLATEAU) & (r_ref < CUTOFF_PLATEAU)


def boundary_smallness(
    incident: GaussianBeam,
    reflected: GaussianBeam,
    lattice: Lattice,
    rho_list: Sequence[float],
    k: int = 0,
    kappa: float = 1.0,
) -> DecayReport:
    """Wall-trace norms of v_inc + v_ref and their slope against rho.

    Only wall nodes inside both cutoff plateaus count: outside them the two tubes are cut
    off differently and the trace measures the cutoffs, not the jet matching.
    """
    if len(rho_list) < 4:
        raise InvalidInputError("at least four rho values are needed")
    rho_list = sorted(float(r) for r in rho_list)
    chart = incident.chart
    q = chart.gamma_spline(_wall_crossing(chart, chart.s_range[1]))
    points, steps = wall_points(lattice, chart.spec, q)
    resolution = min(incident.nodes_per_efold(lattice, rho_list[-1], kappa), reflected.nodes_per_efold(lattice, rho_list[-1], kappa))
    if resolution < NODES_PER_EFOLD:
        raise ResolutionError(resolution, NODES_PER_EFOLD)
    window = matched_window(incident, reflected, points)
    if not window.any():
        raise SamplingError("no wall node lies inside both cutoff plateaus")
    logger.debug("boundary trace over %d wall node(s)", int(window.sum()))
    N = incident.phase.N
    target = -((N - k + 1) / 2 + 0.75)
    norms = []
    scale = 0.0
    for rho in rho_list:
        inc = incident.evaluate(points, rho, kappa)
        values = inc + reflected.evaluate(points, rho, kappa)
        scale = max(scale, float(np.abs(np.where(window, inc, 0.0)).max()))
        norms.append(_wall_norm(values, steps, k, window))
        logger.debug("rho = %g: wall trace norm %.6e", rho, norms[-1])
    slope, exact = _fit_top(rho_list, norms, scale)
    return DecayReport(rho_list, norms, slope, target, exact)


# Remainders


@dataclass(frozen=True, eq=False)
class Remainder:
    rho: float
    direction: Direction
    grid: GridField = field(repr=False)

    @property
    def sup_norm(self) -> float:
        return self.grid.sup_norm()


def make_remainder(
    quasimode: Quasimode,
    problem: WaveProblem,
    direction: Direction = "forward",
    source: ResidualSource = "lattice",
) -> Remainder:
    """r solving box r = -box v with zero lateral data and zero initial (forward) or final (backward) data"""
    if source == "lattice":
        forcing = -apply_wave_operator(problem, quasimode.grid)
    else:
        forcing = -quasimode.residual_field()
    r = solve_linear_wave(problem, forcing, direction=direction)
    logger.debug("remainder rho = %g (%s): sup %.3e", quasimode.rho, direction, r.sup_norm())
    return Remainder(quasimode.rho, direction, r)


def remainder_decay(remainders: Sequence[Remainder], n: int) -> DecayReport:
    rhos = [r.rho for r in remainders]
    norms = [r.sup_norm for r in remainders]
    slope, exact = _fit_top(rhos, norms, 1.0)
    return DecayReport(rhos, norms, slope, -((n + 1) / 2 + 2), exact)


# Dumps


def write_beam(beam: GaussianBeam, path: Path, kappa: float = 1.0) -> list[Path]:
    """YAML header plus an .npz of grids, Riccati data and jet coefficients"""
    path = Path(path)
    phase = beam.phase
    header = {
        "N": phase.N,
        "s_hat": float(phase.s_hat),
        "H0": [[[float(v.real), float(v.imag)] for v in row] for row in phase.H0],
        "radius": float(beam.chart.radius),
        "inner_radius": float(beam.chart.inner_radius),
        "kappa": float(kappa),
        "phase_degree": phase.degree,
        "amplitude_degrees": [beam.amplitude.degree(k) for k in range(beam.amplitude.orders)],
    }
    header_path = path.with_suffix(".yaml")
    data_path = path.with_suffix(".npz")
    header_path.write_text(yaml.safe_dump(header, sort_keys=False))
    blocks = {f"b{k}": b.coeffs for k, b in enumerate(beam.amplitude.b)}
    np.savez(data_path, s_grid=beam.chart.s_grid, H=phase.H, Y=phase.Y, Z=phase.Z, phi=phase.phi.coeffs, **blocks)
    return [header_path, data_path]
