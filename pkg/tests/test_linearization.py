import numpy as np
import pytest
from numpy.testing import assert_allclose

from beamlab.lattice import GridField, Lattice
from beamlab.lib.config import BoundaryConfig, WindowConfig
from beamlab.lib.errors import AlignmentError, DependencyError, InvalidInputError
from beamlab.lib.helpers import set_partitions
from beamlab.linearization import (
    direct_linearized_solution,
    greens_identity_check,
    lateral_weights,
    linearized_hierarchy,
    mixed_derivative,
    source_polynomial,
)
from beamlab.spacetime import MetricSpec
from beamlab.wave_forward import (
    BoundaryData,
    NonlinearitySpec,
    WaveProblem,
    boundary_battery,
    gamma_mask,
    neumann_trace,
    solve_linear_wave,
)


@pytest.fixture
def bump(lattice: Lattice, boundary_cfg: BoundaryConfig) -> BoundaryData:
    return BoundaryData.from_waveform(lattice, boundary_cfg)


def test_set_partitions_count():
    assert sum(1 for _ in set_partitions([1, 2, 3, 4])) == 15
    assert sum(1 for _ in set_partitions([1, 2, 3, 4, 5])) == 52


def test_source_polynomial():
    w = [np.array([2.0]), np.array([3.0]), np.array([5.0]), np.array([7.0])]
    samples = {3: np.array([0.5]), 4: np.array([0.25])}

    rest, top = source_polynomial(samples, w[:3], {}, 3)
    assert_allclose(top, [15.0])
    assert_allclose(rest, [0.0])

    # every order-3 term for m = 4 has a pair block, which vanishes
    rest, top = source_polynomial(samples, w, {}, 4)
    assert_allclose(top, [0.25 * 210.0])
    assert_allclose(rest, [0.0])

    with pytest.raises(DependencyError):
        source_polynomial({3: np.array([1.0])}, w + [np.array([1.0])], {}, 5)


def test_source_polynomial_uses_lower_terms():
    w = [np.array([1.0])] * 5
    lower = {frozenset(b): np.array([2.0]) for b in ((1, 2, 3), (1, 2, 4), (1, 2, 5), (1, 3, 4), (1, 3, 5), (1, 4, 5), (2, 3, 4), (2, 3, 5), (2, 4, 5), (3, 4, 5))}
    rest, top = source_polynomial({3: np.array([1.0])}, w, lower, 5)
    # ten ways to merge three of five indices into one block
    assert_allclose(rest, [20.0])
    assert_allclose(top, [0.0])


def test_order_checks(problem: WaveProblem, bump: BoundaryData):
    V = NonlinearitySpec({3: 1.0})
    with pytest.raises(InvalidInputError):
        mixed_derivative(problem, V, [bump, bump], m=3)
    with pytest.raises(InvalidInputError):
        mixed_derivative(problem, V, [bump] * 6)


def test_first_order_derivative_is_the_linear_solution(problem: WaveProblem, bump: BoundaryData):
    result = mixed_derivative(problem, NonlinearitySpec({3: 1.0}), [bump], m=1, trace_mask=gamma_mask(problem.lattice))
    linear = solve_linear_wave(problem, boundary=bump)
    assert (result.grid - linear).l2_norm() <= 1e-6 * linear.l2_norm()
    assert result.trace is not None
    assert len(result.rows()) == 2
    assert not result.ill_conditioned


def test_second_order_derivative_vanishes_for_a_cubic(problem: WaveProblem, bump: BoundaryData):
    result = mixed_derivative(problem, NonlinearitySpec({3: 1.0}), [bump, bump.scaled(0.5)], m=2)
    assert result.grid.l2_norm() <= 10 * result.noise + 1e-12


@pytest.mark.slow
def test_third_order_derivative_matches_the_direct_solve(problem: WaveProblem, lattice: Lattice):
    f = BoundaryData.from_waveform(lattice, BoundaryConfig(center=1.0, width=0.4, amplitude=1.0))
    V = NonlinearitySpec({3: 1.0})
    stencil = mixed_derivative(problem, V, [f, f, f], threads=2)
    w = solve_linear_wave(problem, boundary=f)
    direct = direct_linearized_solution(problem, V, [w, w, w])
    assert direct.l2_norm() > 0
    assert (stencil.grid - direct).l2_norm() <= 0.03 * direct.l2_norm()


def test_hierarchy_builds_every_lower_block(problem: WaveProblem, bump: BoundaryData):
    w = solve_linear_wave(problem, boundary=bump)
    blocks = linearized_hierarchy(problem, NonlinearitySpec({3: 1.0, 4: 1.0}), [w] * 4)
    assert sorted(sorted(b) for b in blocks) == [[1, 2, 3], [1, 2, 4], [1, 3, 4], [2, 3, 4]]
    assert_allclose(blocks[frozenset({1, 2, 3})].values, blocks[frozenset({2, 3, 4})].values)


def test_direct_solution_needs_one_lattice(problem: WaveProblem, lattice: Lattice):
    other = GridField.zeros(lattice.refine(2))
    with pytest.raises(AlignmentError):
        direct_linearized_solution(problem, NonlinearitySpec({3: 1.0}), [other] * 3)


def test_lateral_weights_integrate_the_walls(problem: WaveProblem, lattice: Lattice):
    weights = lateral_weights(problem)
    assert weights.sum() == pytest.approx(2 * lattice.T)
    assert not weights[:, 1:-1].any()
    mask = gamma_mask(lattice)
    mask[:, -1] = False
    assert lateral_weights(problem, mask).sum() == pytest.approx(lattice.T)


def test_greens_identity_with_equal_coefficients(problem: WaveProblem, lattice: Lattice, bump: BoundaryData):
    w = solve_linear_wave(problem, boundary=bump)
    trace = GridField.zeros(lattice)
    report = greens_identity_check(problem, np.zeros(lattice.shape), [w] * 4, (trace, trace))
    assert report.lhs == 0
    assert report.rhs == 0
    assert report.defect == 0
    with pytest.raises(AlignmentError):
        greens_identity_check(problem, np.zeros((3, 3)), [w] * 4, (trace, trace))


@pytest.mark.slow
def test_greens_identity_with_different_coefficients(flat: MetricSpec, boundary_cfg: BoundaryConfig):
    first, second = NonlinearitySpec({3: "1"}), NonlinearitySpec({3: "2"})
    reports = []
    for nt, nx in ((128, 32), (256, 64)):
        lattice = Lattice.for_metric(flat, nt, nx)
        problem = WaveProblem(flat, lattice)
        walls = gamma_mask(lattice)
        battery = boundary_battery(lattice, boundary_cfg, walls)
        w0 = solve_linear_wave(problem, boundary=battery[3], direction="backward")
        w = [solve_linear_wave(problem, boundary=f) for f in battery[:3]]
        traces = tuple(neumann_trace(problem, direct_linearized_solution(problem, V, w, 3), walls) for V in (first, second))
        left = gamma_mask(lattice, [WindowConfig(wall=0)])
        reports.append(greens_identity_check(problem, np.full(lattice.shape, -1.0), [w0, *w], traces, left))
    coarse, fine = reports
    assert abs(fine.lhs) > 0
    assert fine.defect < coarse.defect
    assert fine.rhs_outside == pytest.approx(fine.rhs - fine.rhs_gamma)
    assert fine.rhs_outside != 0
