from collections.abc import Callable
from functools import cached_property, partial

import numpy as np

from beamlab.lib.errors import BeamLabError
from beamlab.pipeline.type import Pipeline
from beamlab.reconstruction import (
    BeamBundle,
    DtnOracle,
    FieldOracle,
    FieldReport,
    Oracle,
    PointEstimate,
    build_bundle,
    bump_field,
    calibrate_constant,
    candidate_points,
    phase_sum_diagnostics,
    reconstruct_v3_field,
    stationary_phase_constant,
)
from beamlab.spacetime import SpacetimePoint
from beamlab.wave_forward import NonlinearitySpec


def coefficient_difference(pipeline: Pipeline, order: int) -> np.ndarray:
    first, second = pipeline.nonlinearities
    second = second or NonlinearitySpec.zero(first.k_max)
    return FieldOracle(pipeline.problem, first, second).difference(order)


def truth_at(pipeline: Pipeline, difference: np.ndarray, estimate: PointEstimate) -> float:
    return float(difference[pipeline.lattice.index_of(estimate.point)])


def localized(pipeline: Pipeline, report: FieldReport, difference: np.ndarray, cells: float = 2.0) -> tuple[bool, float]:
    """Whether the largest estimate sits within `cells` lattice cells of the largest true value"""
    tested = report.tested
    peak = max(tested, key=lambda e: abs(e.value))
    truth = max(tested, key=lambda e: abs(truth_at(pipeline, difference, e)))
    cell = max(pipeline.lattice.dt, *pipeline.lattice.spacing)
    distance = float(np.linalg.norm(peak.point - truth.point))
    return distance <= cells * cell, distance / cell


class ReconstructionSetup:
    """Oracle and bundle builder for a pipeline's configuration"""

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self.cfg = pipeline.config.reconstruction

    @cached_property
    def pair(self) -> tuple[NonlinearitySpec, NonlinearitySpec]:
        first, second = self.pipeline.nonlinearities
        return first, second or NonlinearitySpec.zero(first.k_max)

    def oracle(self) -> Oracle:
        first, second = self.pair
        pipeline = self.pipeline
        if self.cfg.oracle == "field":
            return FieldOracle(pipeline.problem, first, second, self.cfg.window)
        boundary = pipeline.config.boundary
        return DtnOracle(pipeline.problem, first, second, pipeline.gamma, boundary.eps0, boundary.s_data, pipeline.config.threads)

    def builder(self) -> Callable[[SpacetimePoint], BeamBundle]:
        beam = self.pipeline.config.beam
        return partial(
            build_bundle,
            self.pipeline.spec,
            N=beam.N,
            h0_scale=beam.h0_scale,
            reach=self.pipeline.reach,
            order=self.cfg.m,
            radius=beam.chart_radius,
            margin=beam.chart_margin,
            nodes=beam.s_nodes,
        )

    def field(self, constant: complex | None = None) -> FieldReport:
        pipeline = self.pipeline
        return reconstruct_v3_field(
            self.oracle(),
            pipeline.problem,
            pipeline.reach,
            pipeline.config.beam.rho_list,
            self.builder(),
            self.cfg.points,
            self.cfg.stride,
            constant,
            self.cfg.s_tol,
            self.cfg.grad_tol,
            pipeline.config.threads,
        )


class Reconstruct(Pipeline, name="reconstruct"):
    """Point recovery of V_m over the recoverable set, checked against the configured coefficient pair"""

    def calibrate(self, setup: ReconstructionSetup) -> complex | None:
        cfg = self.config.reconstruction
        points = candidate_points(self.reach, cfg.stride, cfg.points)
        if not points:
            self.verdict("calibration", "skipped", "no candidate point")
            return None
        center = points[0] if cfg.bump_center is None else np.asarray(cfg.bump_center, dtype=float)
        try:
            bundle = setup.builder()(SpacetimePoint.of(center))
            rho = max(self.config.beam.rho_list)
            fitted = calibrate_constant(bundle, self.problem, rho, bump_field(center, cfg.bump_width, cfg.bump_height), cfg.window)
            sqrt_g = float(np.sqrt(-np.linalg.det(self.spec.metric_at(center))))
            explicit = stationary_phase_constant(phase_sum_diagnostics(bundle).hessian, sqrt_g)
        except BeamLabError as err:
            self.verdict("calibration", "skipped", str(err))
            return None
        self.artifacts.yaml("calibration.yaml", {
            "point": [float(c) for c in center],
            "rho": rho,
            "fitted": [fitted.real, fitted.imag],
            "explicit": [explicit.real, explicit.imag],
        })
        mismatch = abs(fitted / explicit - 1)
        self.check("calibration", mismatch <= 0.15, f"fitted / explicit - 1 = {mismatch:.3e}")
        return fitted

    def run(self) -> None:
        cfg = self.config.reconstruction
        setup = ReconstructionSetup(self)
        with self.stage("recoverable set"):
            self.artifacts.mask("recoverable.bin", self.lattice, self.reach.mask)
        constant = None
        if cfg.calibration:
            with self.stage("calibration"):
                constant = self.calibrate(setup)
        with self.stage("point estimates"):
            report = setup.field(constant)
            self.artifacts.add(report.write(self.artifacts.path("reconstruction.csv")))
            self.artifacts.grid("estimate.bin", report.field())
        self.judge(report, coefficient_difference(self, cfg.m), 0.15 if cfg.m == 3 else 0.2)

    def judge(self, report: FieldReport, difference: np.ndarray, tolerance: float) -> None:
        tested = report.tested
        if not tested:
            self.verdict("recovery", "skipped", "no point could be tested")
            return
        truths = [truth_at(self, difference, e) for e in tested]
        if max(abs(t) for t in truths) == 0.0:
            worst = max(abs(e.value) - 3 * e.error_bar for e in tested)
            self.check("recovery", worst <= 0.0, f"{len(tested)} point(s), coefficients agree")
            return
        index = int(np.argmax(np.abs(truths)))
        peak, truth = tested[index], truths[index]
        error = abs(peak.value.real - truth) / abs(truth)
        self.check("recovery", error <= tolerance, f"relative error {error:.3e} at {peak.point}")
        steps = [abs(e - truth) for e in peak.estimates[-3:]]
        self.check("rho_convergence", all(a >= b for a, b in zip(steps, steps[1:])), "errors " + ", ".join(f"{s:.2e}" for s in steps))
