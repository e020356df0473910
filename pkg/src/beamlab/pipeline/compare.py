from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from beamlab.causal_geom import ReachableSet
from beamlab.pipeline.reconstruct import ReconstructionSetup, coefficient_difference, localized
from beamlab.pipeline.type import Pipeline
from beamlab.reconstruction import FieldReport
from beamlab.wave_forward import BoundaryData, NonlinearitySpec, WaveProblem, boundary_battery, dtn_apply


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    discrepancies: list[float]
    """sup distance of the two DtN traces per battery input"""
    scales: list[float]
    """sup of the first trace per battery input"""
    reconstruction: FieldReport = field(repr=False)

    @property
    def discrepancy(self) -> float:
        return max(self.discrepancies, default=0.0)

    @property
    def scale(self) -> float:
        return max(self.scales, default=0.0)

    @property
    def estimate_norm(self) -> float:
        return self.reconstruction.norm()


def uniqueness_compare(
    problem: WaveProblem,
    first: NonlinearitySpec,
    second: NonlinearitySpec,
    battery: Sequence[BoundaryData],
    mask: np.ndarray,
    reconstruct: Callable[[], FieldReport],
) -> ComparisonReport:
    """DtN traces of both nonlinearities on a shared battery, then the reconstructed difference"""
    one, two = first.sample(problem.lattice), second.sample(problem.lattice)
    discrepancies, scales = [], []
    for f in battery:
        a = dtn_apply(problem, first, f, mask, one)
        b = dtn_apply(problem, second, f, mask, two)
        discrepancies.append((a.trace - b.trace).sup_norm())
        scales.append(a.trace.sup_norm())
    return ComparisonReport(discrepancies, scales, reconstruct())


def differs_inside(reach: ReachableSet, difference: np.ndarray) -> bool:
    return bool(np.any(difference[reach.mask] != 0))


class Compare(Pipeline, name="compare"):
    """Uniqueness check on a nonlinearity pair: boundary measurements and recovered difference"""

    def run(self) -> None:
        setup = ReconstructionSetup(self)
        first, second = setup.pair
        with self.stage("comparison"):
            battery = boundary_battery(self.lattice, self.config.boundary, self.gamma)
            report = uniqueness_compare(self.problem, first, second, battery, self.gamma, setup.field)
            self.artifacts.csv("discrepancy.csv", ["input", "sup_norm", "trace_scale"], [[i, d, s] for i, (d, s) in enumerate(zip(report.discrepancies, report.scales))])
            self.artifacts.add(report.reconstruction.write(self.artifacts.path("reconstruction.csv")))

        order = self.config.reconstruction.m
        difference = coefficient_difference(self, order)
        tolerance = 5 * self.config.solver.picard_tol * max(report.scale, 1.0)
        detail = f"discrepancy {report.discrepancy:.3e}, tolerance {tolerance:.3e}, estimate norm {report.estimate_norm:.3e}"
        if not differs_inside(self.reach, difference):
            self.check("uniqueness", report.discrepancy <= tolerance, detail)
            return
        self.check("uniqueness", report.discrepancy > tolerance, detail)
        if not report.reconstruction.tested:
            self.verdict("localization", "skipped", "no point could be tested")
            return
        ok, cells = localized(self, report.reconstruction, difference)
        self.check("localization", ok, f"estimate peak {cells:.2f} cell(s) from the true peak")
