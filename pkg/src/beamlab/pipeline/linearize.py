from collections.abc import Sequence

import numpy as np

from beamlab.lattice import Lattice
from beamlab.lib.errors import ConfigValidationError
from beamlab.linearization import (
    GreensReport,
    LinearizedField,
    direct_linearized_solution,
    greens_identity_check,
    greens_refinement_study,
    linearized_hierarchy,
    mixed_derivative,
)
from beamlab.pipeline.type import Pipeline
from beamlab.wave_forward import (
    BoundaryData,
    NonlinearitySpec,
    WaveProblem,
    boundary_battery,
    gamma_mask,
    neumann_trace,
    solve_linear_wave,
)

ROUNDOFF = 1e-12


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = float(np.linalg.norm(exact))
    return float(np.linalg.norm(approx - exact)) / scale if scale else float(np.linalg.norm(approx))


class Linearize(Pipeline, name="linearize"):
    """Mixed eps-derivatives of the solution map against their linear equations"""

    def battery(self, lattice: Lattice, count: int) -> list[BoundaryData]:
        battery = boundary_battery(lattice, self.config.boundary, gamma_mask(lattice, self.config.boundary.gamma))
        if len(battery) < count:
            raise ConfigValidationError([("boundary.battery", f"needs at least {count} inputs")])
        return battery

    def derivative(self, V: NonlinearitySpec, data: Sequence[BoundaryData], eps: float, m: int) -> LinearizedField:
        return mixed_derivative(self.problem, V, data, eps, m, trace_mask=self.gamma, threads=self.config.threads)

    def run(self) -> None:
        cfg = self.config.linearization
        m = cfg.m
        V, alt = self.nonlinearities
        data = self.battery(self.lattice, m)[:m]

        with self.stage("stencil"):
            result = self.derivative(V, data, cfg.eps_step, m)
            self.artifacts.csv("stencil.csv", ["signs", "solve", "sup_norm"], result.rows())
            self.artifacts.grid("derivative.bin", result.grid)
        with self.stage("linear solves"):
            w = [solve_linear_wave(self.problem, boundary=f) for f in data]

        match m:
            case 1:
                self.first_order(V, data, result, w[0].values)
            case 2:
                norm = result.grid.l2_norm()
                self.check("second_order_vanishes", norm <= 10 * result.noise or norm <= ROUNDOFF, f"norm {norm:.3e}, stencil noise {result.noise:.3e}")
            case _:
                with self.stage("direct solve"):
                    lower = linearized_hierarchy(self.problem, V, w, m)
                    direct = direct_linearized_solution(self.problem, V, w, m, lower)
                    self.artifacts.grid("direct.bin", direct)
                error = relative_error(result.grid.values, direct.values)
                self.check("direct_agreement", error <= 0.03, f"relative L2 error {error:.3e}, error bar {result.error_bar:.3e}")

        if m != 3 or alt is None:
            self.verdict("greens_identity", "skipped", "needs m = 3 and a second nonlinearity")
            return
        with self.stage("green's identity"):
            study = greens_refinement_study(lambda lattice: self.greens(lattice, V, alt), self.lattice)
            coarse, fine = study.coarse, study.fine
            self.artifacts.yaml("greens_identity.yaml", {
                "coarse": report_dict(coarse),
                "fine": report_dict(fine),
                "observed_order": study.observed_order,
            })
        estimate = abs(coarse.lhs - fine.lhs) + abs(coarse.rhs - fine.rhs)
        self.check("greens_identity", fine.defect <= 5 * estimate and study.observed_order >= 1.8, f"defect {fine.defect:.3e}, estimate {estimate:.3e}, order {study.observed_order:.2f}")

    def first_order(self, V: NonlinearitySpec, data: Sequence[BoundaryData], result: LinearizedField, w: np.ndarray) -> None:
        coarse = relative_error(result.grid.values, w)
        fine = relative_error(self.derivative(V, data, result.eps / 2, 1).grid.values, w)
        if coarse <= ROUNDOFF:
            self.verdict("first_order", "pass", f"exact to roundoff ({coarse:.1e})")
            return
        order = float(np.log2(coarse / fine))
        self.check("first_order", order >= 1.9, f"errors {coarse:.3e} -> {fine:.3e}, order {order:.2f}")

    def greens(self, lattice: Lattice, first: NonlinearitySpec, second: NonlinearitySpec) -> GreensReport:
        problem = self.problem if lattice.same_as(self.lattice) else WaveProblem(self.spec, lattice)
        battery = self.battery(lattice, 4)
        w0 = solve_linear_wave(problem, boundary=battery[3], direction="backward")
        w = [solve_linear_wave(problem, boundary=f) for f in battery[:3]]
        walls = gamma_mask(lattice)
        traces = tuple(neumann_trace(problem, direct_linearized_solution(problem, V, w, 3), walls) for V in (first, second))
        one, two = first.sample(lattice).get(3), second.sample(lattice).get(3)
        zero = np.zeros(lattice.shape)
        difference = (zero if one is None else one) - (zero if two is None else two)
        return greens_identity_check(problem, difference, [w0, *w], traces, gamma_mask(lattice, self.config.boundary.gamma))


def report_dict(report: GreensReport) -> dict[str, list[float] | float]:
    return {
        "lhs": [report.lhs.real, report.lhs.imag],
        "rhs": [report.rhs.real, report.rhs.imag],
        "rhs_gamma": [report.rhs_gamma.real, report.rhs_gamma.imag],
        "rhs_outside": [report.rhs_outside.real, report.rhs_outside.imag],
        "defect": report.defect,
    }
