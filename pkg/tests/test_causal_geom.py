import numpy as np
import pytest
from numpy.testing import assert_allclose

from beamlab.causal_geom import (
    build_fermi_chart,
    conjugate_point_scan,
    jacobi_scan,
    null_convexity_scan,
    reachable_set,
    reflect_at_boundary,
    select_beam_covectors,
    shoot_null_geodesic,
)
from beamlab.lattice import Lattice
from beamlab.lib.errors import InvalidInputError, TangencyError, UnreachableError
from beamlab.spacetime import Disk, MetricSpec, Rectangle, SpacetimePoint, TangentObject, minkowski


def test_reflection_reverses_the_normal_component(flat: MetricSpec):
    q = SpacetimePoint.of([0.75, 1.0])
    out = reflect_at_boundary(flat, q, TangentObject(q, np.array([1.0, 1.0])))
    assert_allclose(out.components, [1.0, -1.0])

    covector = reflect_at_boundary(flat, q, TangentObject(q, np.array([-1.0, 1.0]), "covector"))
    assert covector.variance == "covector"
    assert_allclose(covector.components, [-1.0, -1.0])


def test_reflection_rejects_tangent_and_incoming_directions(flat: MetricSpec):
    q = SpacetimePoint.of([0.75, 1.0])
    with pytest.raises(TangencyError):
        reflect_at_boundary(flat, q, TangentObject(q, np.array([1.0, 0.0])))
    with pytest.raises(InvalidInputError):
        reflect_at_boundary(flat, q, TangentObject(q, np.array([1.0, -1.0])))
    with pytest.raises(InvalidInputError):
        reflect_at_boundary(flat, SpacetimePoint.of([0.75, 0.5]), TangentObject(q, np.array([1.0, 1.0])))


def test_broken_geodesic_in_a_flat_slab(flat: MetricSpec):
    p = SpacetimePoint.of([0.25, 0.5])
    geodesic = shoot_null_geodesic(flat, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=1)

    assert len(geodesic.segments) == 2
    assert geodesic.end_reason == "exit"
    assert geodesic.s_plus == pytest.approx(0.5, abs=1e-8)
    assert geodesic.s_minus is None
    assert geodesic.reflection_times == pytest.approx([0.5], abs=1e-8)
    assert_allclose(geodesic.reflection_points[0], [0.75, 1.0], atol=1e-8)
    assert_allclose(geodesic.segments[1].v[-1], [1.0, -1.0], atol=1e-10)
    assert geodesic.segments[1].x[-1][1] == pytest.approx(0.0, abs=1e-8)
    assert geodesic.max_defect < 1e-12
    assert len(geodesic.rows()[0]) == len(geodesic.header())


def test_geodesic_ends_at_the_time_cap(flat: MetricSpec):
    p = SpacetimePoint.of([1.6, 0.5])
    geodesic = shoot_null_geodesic(flat, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=3)
    assert geodesic.end_reason == "cap"
    assert geodesic.segments[-1].x[-1][0] == pytest.approx(2.0, abs=1e-8)


def test_non_null_directions_are_rejected(flat: MetricSpec):
    p = SpacetimePoint.of([1.0, 0.5])
    with pytest.raises(InvalidInputError):
        shoot_null_geodesic(flat, p, TangentObject(p, np.array([1.0, 0.5])))


def test_through_segment_joins_both_directions(through):
    assert through.start == pytest.approx(-0.5, abs=1e-8)
    assert through.end == pytest.approx(0.5, abs=1e-8)
    assert_allclose(through.position(0.0), [1.0, 0.5], atol=1e-12)
    assert np.all(np.diff(through.s) > 0)


def test_flat_fermi_chart(flat: MetricSpec, through):
    chart = build_fermi_chart(flat, through, N=1, radius=0.25, margin=0.1, nodes=101)
    metric_error, derivative_error = chart.on_gamma_errors()
    assert metric_error < 1e-10
    assert derivative_error < 1e-10
    assert chart.radius == 0.25
    assert conjugate_point_scan(chart) is None

    s = np.array([-0.2, 0.1])
    z = np.array([[0.05], [-0.03]])
    points = chart.map(s, z)
    found_s, found_z, ok = chart.locate(points)
    assert ok.all()
    assert_allclose(found_s, s, atol=1e-10)
    assert_allclose(found_z, z, atol=1e-10)


def test_reversed_chart_traces_the_same_curve(flat: MetricSpec, through):
    chart = build_fermi_chart(flat, through, N=1, radius=0.25, margin=0.1, nodes=101)
    back = chart.reversed()
    assert_allclose(back.map(np.array([-0.3]), np.array([[0.02]])), chart.map(np.array([0.3]), np.array([[-0.02]])), atol=1e-10)


def test_jacobi_scan_finds_the_first_zero():
    # Y'' = -2 Y: first zero at pi / (2 sqrt 2)
    s = np.linspace(0.0, 2.0, 201)
    assert jacobi_scan(s, np.array([[2.0]]), np.array([[1.0]])) == pytest.approx(np.pi / (2 * np.sqrt(2)), abs=1e-6)
    assert jacobi_scan(s, np.array([[0.0]]), np.array([[1.0]])) is None


def test_null_convexity():
    interval = null_convexity_scan(minkowski(1, 1.0), np.array([[0.5, 0.0]]))
    assert not interval.violated

    box = minkowski(2, 1.0, Rectangle(1.0, 1.0))
    flat_walls = null_convexity_scan(box, np.array([[0.5, 0.0, 0.5], [0.2, 0.5, 1.0]]))
    assert abs(flat_walls.minimum) < 1e-6
    assert not flat_walls.violated

    disk = minkowski(2, 1.0, Disk(1.0))
    samples = np.array([[0.5, np.cos(a), np.sin(a)] for a in np.linspace(0, 2 * np.pi, 5, endpoint=False)])
    report = null_convexity_scan(disk, samples)
    assert report.minimum > 0.5
    assert not report.violated


def test_recoverable_set_in_a_flat_slab(flat: MetricSpec, lattice: Lattice):
    reach = reachable_set(flat, lattice)
    # earliest arrival is the distance to the nearer wall
    assert_allclose(reach.tau_plus, np.minimum(lattice.axes[0], 1.0 - lattice.axes[0]), atol=1e-12)
    assert_allclose(reach.sigma, 2.0 - reach.tau_plus, atol=1e-12)
    assert reach.contains(np.array([1.0, 0.5]))
    assert not reach.contains(np.array([0.25, 0.5]))
    assert not reach.contains(SpacetimePoint.of([1.9, 0.5]))


def test_covector_quadruple_closes(flat: MetricSpec, lattice: Lattice):
    p = SpacetimePoint.of([1.0, 0.5])
    selection = select_beam_covectors(flat, p, reach=reachable_set(flat, lattice))
    assert selection.theta.shape == (4, 2)
    assert selection.closure < 1e-12
    assert np.all(selection.kappa > 0)
    assert len(selection.geodesics) == 4

    pattern = selection.multiplicity(4)
    assert [j for j, _ in pattern] == [0, 1, 2, 3, 3]
    assert pattern[-1][1] == pytest.approx(selection.kappa[3] / 2)
    with pytest.raises(InvalidInputError):
        selection.multiplicity(2)


def test_unreachable_points_have_no_quadruple(flat: MetricSpec, lattice: Lattice):
    p = SpacetimePoint.of([0.1, 0.5])
    with pytest.raises(UnreachableError):
        select_beam_covectors(flat, p, reach=reachable_set(flat, lattice))
