from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from beamlab.causal_geom import reachable_set
from beamlab.lattice import Lattice
from beamlab.lib.config import BoundaryConfig
from beamlab.lib.errors import (
    BundleRejectedError,
    DegenerateBundleError,
    DependencyError,
    InvalidInputError,
    ResolutionError,
    SelectionError,
)
from beamlab.reconstruction import (
    BeamBundle,
    DtnOracle,
    FieldOracle,
    FieldReport,
    PhaseDiagnostics,
    PointEstimate,
    build_bundle,
    bump_field,
    calibrate_constant,
    candidate_points,
    oscillatory_integral,
    phase_sum_diagnostics,
    reconstruct_v3_field,
    recover_at_point,
    recover_vm,
    stationary_phase_constant,
    stationary_phase_extract,
)
from beamlab.spacetime import MetricSpec, SpacetimePoint
from beamlab.wave_forward import NonlinearitySpec, WaveProblem, boundary_battery, gamma_mask, solve_linear_wave


def test_stationary_phase_constant():
    # -i H / 2 pi = I gives sqrt|g| back
    assert stationary_phase_constant(2j * np.pi * np.eye(2), 1.5) == pytest.approx(1.5)
    assert stationary_phase_constant(3j * np.eye(2), 1.0) == pytest.approx(2 * np.pi / 3)


def test_phase_diagnostics_reject_bad_bundles():
    hessian = 2j * np.pi * np.eye(2)
    PhaseDiagnostics(1e-12, 1e-9, 0.5, hessian).check()
    with pytest.raises(BundleRejectedError, match=r"\|S\(p\)\|"):
        PhaseDiagnostics(1e-6, 0.0, 0.5, hessian).check()
    with pytest.raises(BundleRejectedError, match=r"\|dS\(p\)\|"):
        PhaseDiagnostics(0.0, 1e-3, 0.5, hessian).check()
    with pytest.raises(BundleRejectedError):
        PhaseDiagnostics(0.0, 0.0, -0.1, hessian).check()
    PhaseDiagnostics(1e-6, 0.0, 0.5, hessian).check(s_tol=1e-5)


def test_extraction_divides_out_the_amplitudes():
    diagnostics = PhaseDiagnostics(0.0, 0.0, 1.0, 2j * np.pi * np.eye(2))
    bundle = SimpleNamespace(amplitude_product=lambda rho: 2.0 + 0j)
    estimates, error = stationary_phase_extract([4.0, 4.2], [8.0, 16.0], bundle, diagnostics, sqrt_g=1.0)
    assert estimates == pytest.approx([2.0, 2.1])
    assert error == pytest.approx(0.1)

    _, single = stationary_phase_extract([4.0], [8.0], bundle, diagnostics, 1.0, constant=1.0)
    assert single == float("inf")


def test_degenerate_bundles_are_rejected():
    diagnostics = PhaseDiagnostics(0.0, 0.0, 1.0, 2j * np.pi * np.eye(2))
    bundle = SimpleNamespace(amplitude_product=lambda rho: 1e-12 + 0j)
    with pytest.raises(DegenerateBundleError):
        stationary_phase_extract([1.0], [8.0], bundle, diagnostics, 1.0)


def test_bump_field():
    bump = bump_field([1.0, 0.5], 0.3, height=2.0)
    values = bump(np.array([[1.0, 0.5], [1.0, 0.8], [1.1, 0.5]]))
    assert values[0] == pytest.approx(2.0)
    assert values[1] == 0.0
    assert 0.0 < values[2] < 2.0


def test_candidate_points(flat: MetricSpec, lattice: Lattice):
    reach = reachable_set(flat, lattice)
    explicit = candidate_points(reach, points=[[1.0, 0.5]])
    assert len(explicit) == 1
    assert explicit[0].tolist() == [1.0, 0.5]

    sampled = candidate_points(reach, stride=8)
    assert sampled
    assert all(reach.contains(p) for p in sampled)


def test_higher_order_recovery_needs_order_four():
    with pytest.raises(InvalidInputError):
        recover_vm(3, None, None, [8.0], None)


def test_failing_points_are_untested(flat: MetricSpec, lattice: Lattice, problem: WaveProblem, tmp_path: Path):
    reach = reachable_set(flat, lattice)

    def build(point: SpacetimePoint):
        raise SelectionError("no quadruple closes")

    report = reconstruct_v3_field(None, problem, reach, [8.0], build, points=[[1.0, 0.5], [0.1, 0.5]])
    assert [e.status for e in report.estimates] == ["untested", "untested"]
    assert report.estimates[0].reason == "no quadruple closes"
    assert report.estimates[1].reason == "outside the recoverable set"
    assert report.tested == []
    assert report.peak() is None
    assert report.norm() == 0.0
    assert not report.field().values.any()

    lines = report.write(tmp_path / "v3.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["t", "x", "rho"]
    assert len(lines) == 3
    assert lines[2].endswith("untested,outside the recoverable set")


def test_field_report_of_tested_points(lattice: Lattice):
    a = PointEstimate(np.array([1.0, 0.5]), "tested", rhos=[8.0, 16.0], integrals=[1j, 2j], estimates=[1.9 + 0j, 2.0 + 0j], error_bar=0.1)
    b = PointEstimate(np.array([0.5, 0.25]), "tested", rhos=[16.0], integrals=[1.0], estimates=[-3.0 + 0j])
    report = FieldReport(lattice, [a, b])
    assert report.peak() is b
    assert report.norm() == pytest.approx(3.0)
    field = report.field()
    assert field.values[64, 16] == pytest.approx(2.0)
    assert field.values[32, 8] == pytest.approx(-3.0)
    assert len(a.rows()) == 2
    assert len(a.rows()[0]) == len(report.header())


@pytest.fixture
def bundle(flat: MetricSpec) -> BeamBundle:
    return build_bundle(flat, SpacetimePoint.of([1.0, 0.5]), N=1, radius=0.25, margin=0.1, nodes=101)


def test_flat_bundle_is_stationary_at_its_point(bundle: BeamBundle):
    assert bundle.point.tolist() == [1.0, 0.5]
    assert [j for j, _ in bundle.pattern] == [0, 1, 2, 3]
    assert bundle.with_order(4).pattern[-2:] == [(3, bundle.kappa[3] / 2)] * 2
    diagnostics = phase_sum_diagnostics(bundle)
    diagnostics.check()
    assert diagnostics.convexity > 0
    assert diagnostics.hessian.shape == (2, 2)


def test_oscillatory_integral(bundle: BeamBundle, problem: WaveProblem):
    ones = np.ones(problem.lattice.shape)
    once = oscillatory_integral(ones, bundle, 4.0, problem)
    assert once != 0
    assert oscillatory_integral(2 * ones, bundle, 4.0, problem) == pytest.approx(2 * once)
    assert oscillatory_integral(np.zeros_like(ones), bundle, 4.0, problem) == 0
    with pytest.raises(ResolutionError):
        oscillatory_integral(ones, bundle, 1e4, problem)


def test_field_oracle_integrates_the_coefficient_difference(bundle: BeamBundle, problem: WaveProblem):
    oracle = FieldOracle(problem, NonlinearitySpec({3: "1"}), NonlinearitySpec({3: "x"}))
    x = problem.lattice.points()[..., 1]
    np.testing.assert_allclose(oracle.difference(3), 1 - x)
    assert not oracle.difference(4).any()
    assert oracle.integral(bundle, 4.0) == pytest.approx(oscillatory_integral(1 - x, bundle, 4.0, problem))


def test_dtn_oracle_needs_shared_lower_orders(problem: WaveProblem):
    gamma = gamma_mask(problem.lattice)
    oracle = DtnOracle(problem, NonlinearitySpec({3: "1", 4: "x"}), NonlinearitySpec({3: "2"}), gamma)
    oracle.check_shared_lower(3)
    with pytest.raises(DependencyError, match=r"orders \[3\]"):
        oracle.check_shared_lower(4)

    shared = DtnOracle(problem, NonlinearitySpec({3: "1", 4: "x"}), NonlinearitySpec({3: "1"}), gamma)
    shared.check_shared_lower(4)
    with pytest.raises(DependencyError) as err:
        shared.check_shared_lower(5)
    assert err.value.missing == [4]


def test_dtn_oracle_lower_term(problem: WaveProblem, lattice: Lattice, boundary_cfg: BoundaryConfig):
    gamma = gamma_mask(lattice)
    V = NonlinearitySpec({3: "1"})
    oracle = DtnOracle(problem, V, V, gamma)
    (f,) = boundary_battery(lattice, boundary_cfg.model_copy(update={"battery": 1}), gamma)
    linear = [solve_linear_wave(problem, boundary=f)] * 5
    backward = solve_linear_wave(problem, boundary=f, direction="backward").values.astype(complex)
    assert oracle.lower_term(V, 3, [], backward) == 0
    assert oracle.lower_term(NonlinearitySpec({4: "1"}), 4, linear[:4], backward) == 0
    # V_3 feeds the fifth-order measurement through the triple blocks
    assert oracle.lower_term(V, 5, linear, backward) != 0


@pytest.mark.slow
def test_dtn_oracle_sees_only_the_difference(flat: MetricSpec, bundle: BeamBundle, problem: WaveProblem):
    gamma = gamma_mask(problem.lattice)
    same = DtnOracle(problem, NonlinearitySpec({3: "1"}), NonlinearitySpec({3: "1"}), gamma)
    assert same.integral(bundle, 2.0) == 0
    different = DtnOracle(problem, NonlinearitySpec({3: "1"}), NonlinearitySpec.zero(), gamma)
    assert different.integral(bundle, 2.0) != 0
    with pytest.raises(DependencyError):
        DtnOracle(problem, NonlinearitySpec({3: "1"}), NonlinearitySpec({4: "1"}), gamma).integral(bundle.with_order(4), 2.0)


@pytest.fixture
def fine(flat: MetricSpec) -> WaveProblem:
    return WaveProblem(flat, Lattice.for_metric(flat, 1024, 256))


RHOS = [16.0, 32.0, 64.0, 128.0]


@pytest.mark.slow
def test_constant_coefficient_is_recovered(bundle: BeamBundle, fine: WaveProblem):
    oracle = FieldOracle(fine, NonlinearitySpec({3: "1"}), NonlinearitySpec.zero())
    estimate = recover_at_point(oracle, bundle, RHOS, fine)
    assert estimate.status == "tested"
    assert estimate.rhos == RHOS
    errors = [abs(e - 1) for e in estimate.estimates]
    assert errors[-1] < 0.15
    assert errors[-1] < errors[0]
    assert estimate.diagnostics.convexity > 0


@pytest.mark.slow
def test_fitted_constant_matches_the_explicit_one(bundle: BeamBundle, fine: WaveProblem):
    fitted = calibrate_constant(bundle, fine, 128.0, bump_field([1.0, 0.5], 0.5))
    explicit = stationary_phase_constant(phase_sum_diagnostics(bundle).hessian, 1.0)
    assert abs(fitted / explicit - 1) < 0.15
    with pytest.raises(InvalidInputError):
        calibrate_constant(bundle, fine, 128.0, bump_field([0.2, 0.1], 0.05))


@pytest.mark.slow
def test_fourth_order_coefficient_is_recovered(bundle: BeamBundle, fine: WaveProblem):
    oracle = FieldOracle(fine, NonlinearitySpec({4: "1"}), NonlinearitySpec.zero())
    estimate = recover_vm(4, oracle, bundle, RHOS, fine)
    assert estimate.order == 4
    assert abs(estimate.value - 1) < 0.2
    # the third-order product sees no V_3 difference
    assert abs(recover_at_point(oracle, bundle, RHOS, fine).value) < 1e-12
