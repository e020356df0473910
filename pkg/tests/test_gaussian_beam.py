from pathlib import Path

import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose

from beamlab.causal_geom import build_fermi_chart
from beamlab.causal_geom import shoot_null_geodesic
from beamlab.gaussian_beam import (
    BeamChain,
    GaussianBeam,
    Remainder,
    assemble_quasimode,
    boundary_smallness,
    build_beam,
    build_beam_chain,
    defect_profile,
    hessian_from_jet,
    leading_amplitude,
    make_remainder,
    matched_window,
    remainder_decay,
    residual_decay,
    solve_riccati,
    wall_points,
    write_beam,
)
from beamlab.jets import Jet
from beamlab.lattice import GridField, Lattice
from beamlab.lib.errors import InvalidInputError, ResolutionError
from beamlab.spacetime import MetricSpec, SpacetimePoint, TangentObject, conformal
from beamlab.wave_forward import WaveProblem


@pytest.fixture
def beam(flat: MetricSpec, through) -> GaussianBeam:
    return build_beam(flat, through, N=1, radius=0.25, margin=0.1, nodes=101)


def test_flat_riccati_solution_is_constant(beam: GaussianBeam):
    phase = beam.phase
    assert_allclose(phase.H[:, 0, 0], 1j, atol=1e-12)
    invariant = phase.invariant()
    assert np.ptp(invariant) < 1e-10
    assert phase.riccati_residual() < 1e-8
    assert phase.min_imag_eigenvalue().min() > 0
    assert phase.degree == 4


def test_plane_wave_beams_are_exact(beam: GaussianBeam):
    assert beam.is_exact()


def test_beam_lives_in_its_tube(beam: GaussianBeam):
    values = beam.evaluate(np.array([[1.0, 0.5], [1.0, 0.1]]), rho=10.0)
    assert abs(values[0]) == pytest.approx(1.0, rel=1e-8)
    assert values[1] == 0


def test_initial_hessian_is_checked(flat: MetricSpec, through):
    chart = build_fermi_chart(flat, through, N=1, radius=0.25, margin=0.1, nodes=101)
    with pytest.raises(InvalidInputError):
        solve_riccati(chart, np.array([[-1j]]))
    with pytest.raises(InvalidInputError):
        solve_riccati(chart, np.eye(2) * 1j)


def test_hessian_from_jet():
    jet = Jet(np.array([0.0, 0.0, 0.0, 1.0, 3.0, 2.0j]), 2, 2)
    assert_allclose(hessian_from_jet(jet), [[1.0, 1.5], [1.5, 2.0j]])


def test_quasimode_on_the_lattice(beam: GaussianBeam, lattice: Lattice):
    with pytest.raises(InvalidInputError):
        assemble_quasimode(beam, lattice, 0.0)
    quasimode = assemble_quasimode(beam, lattice, 4.0)
    assert quasimode.support[64, 16]
    assert not quasimode.support[0, 0]
    assert np.abs(quasimode.grid.values).max() == pytest.approx(1.0, rel=1e-6)


def test_residual_decay_of_an_exact_beam(beam: GaussianBeam, lattice: Lattice):
    report = residual_decay(beam, lattice, [1.0, 2.0, 3.0, 4.0])
    assert report.exact
    assert report.passed
    with pytest.raises(InvalidInputError):
        residual_decay(beam, lattice, [1.0, 2.0, 3.0])
    with pytest.raises(ResolutionError):
        residual_decay(beam, lattice, [25.0, 50.0, 75.0, 100.0])


def test_vanishing_defect_has_no_slope(beam: GaussianBeam):
    chart = beam.chart
    radii, values, slope = defect_profile(Jet.zeros(1, 4, (len(chart.s_grid),)), chart)
    assert len(radii) == 8
    assert not values.any()
    assert slope is None


def test_write_beam(beam: GaussianBeam, tmp_path: Path):
    header_path, data_path = write_beam(beam, tmp_path / "beam")
    header = yaml.safe_load(header_path.read_text())
    assert header["N"] == 1
    assert header["radius"] == 0.25
    assert header["H0"] == [[[0.0, 1.0]]]
    with np.load(data_path) as data:
        assert data["H"].shape == (len(beam.chart.s_grid), 1, 1)
        assert "b0" in data.files


def test_leading_amplitude_matches_the_transport_solution(beam: GaussianBeam):
    closed = leading_amplitude(beam.phase)
    assert closed.shape == beam.chart.s_grid.shape
    assert_allclose(beam.amplitude.leading, closed, rtol=1e-6)


def test_leading_amplitude_on_a_curved_metric():
    spec = conformal("1 + 0.05*x**2", 1, 2.0)
    p = SpacetimePoint.of([1.0, 0.5])
    segment = shoot_null_geodesic(spec, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=0).through_segment()
    curved = build_beam(spec, segment, N=1, radius=0.25, margin=0.1, nodes=201)
    assert not curved.is_exact()
    assert_allclose(curved.amplitude.leading, leading_amplitude(curved.phase), rtol=1e-5)


@pytest.fixture
def chain(flat: MetricSpec) -> BeamChain:
    p = SpacetimePoint.of([0.1, 0.5])
    geodesic = shoot_null_geodesic(flat, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=1)
    return build_beam_chain(flat, geodesic, N=1, radius=0.25, margin=0.1, nodes=101)


def test_flat_reflection_cancels_on_the_wall(chain: BeamChain, lattice: Lattice):
    incident, reflected = chain.beams
    # incident beam meets x = 1 at t = 0.6
    points, steps = wall_points(lattice, incident.chart.spec, np.array([0.6, 1.0]))
    assert steps == (lattice.dt,)
    window = matched_window(incident, reflected, points)
    assert window.any()
    assert not window.all()
    assert np.all(np.abs(points[window, 0] - 0.6) < 0.25)
    report = boundary_smallness(incident, reflected, lattice, [1.0, 2.0, 3.0, 4.0])
    assert max(report.norms) < 1e-6
    assert report.target == pytest.approx(-1.75)
    with pytest.raises(InvalidInputError):
        boundary_smallness(incident, reflected, lattice, [1.0, 2.0])


@pytest.mark.slow
def test_curved_reflection_trace_decays():
    spec = conformal("1 + 0.05*x**2", 1, 2.0)
    p = SpacetimePoint.of([0.1, 0.5])
    geodesic = shoot_null_geodesic(spec, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=1)
    chain = build_beam_chain(spec, geodesic, N=3, radius=0.25, margin=0.1, nodes=201)
    incident, reflected = chain.beams
    fine = Lattice.for_metric(spec, 2048, 512)
    report = boundary_smallness(incident, reflected, fine, [64.0, 128.0, 256.0, 512.0])
    assert not report.exact
    assert report.norms[-1] < report.norms[0]
    assert report.passed


def test_remainders_carry_zero_data_at_their_start(beam: GaussianBeam, problem: WaveProblem):
    quasimode = assemble_quasimode(beam, problem.lattice, 4.0)
    forward = make_remainder(quasimode, problem)
    assert forward.rho == 4.0
    assert forward.direction == "forward"
    assert not forward.grid.values[0].any()
    backward = make_remainder(quasimode, problem, direction="backward")
    assert not backward.grid.values[-1].any()
    assert backward.sup_norm > 0
    analytic = make_remainder(quasimode, problem, source="analytic")
    assert not analytic.grid.values[0].any()


def test_remainder_decay_fits_the_sup_norms(lattice: Lattice):
    rhos = [2.0, 4.0, 8.0, 16.0]
    remainders = [Remainder(rho, "forward", GridField(lattice, np.full(lattice.shape, rho**-3.5))) for rho in rhos]
    report = remainder_decay(remainders, n=1)
    assert report.target == pytest.approx(-3.0)
    assert report.slope == pytest.approx(-3.5)
    assert report.passed
    slow = [Remainder(rho, "forward", GridField(lattice, np.full(lattice.shape, 1 / rho))) for rho in rhos]
    assert not remainder_decay(slow, n=1).passed
