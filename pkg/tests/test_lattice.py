from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from beamlab.lattice import GridField, Lattice
from beamlab.lib.errors import AlignmentError, ConfigurationError, GeometryError
from beamlab.spacetime import Disk, MetricSpec, Rectangle, minkowski, read_grid


def test_shape_and_steps(lattice: Lattice):
    assert lattice.shape == (129, 33)
    assert lattice.dt == pytest.approx(2.0 / 128)
    assert lattice.spacing == pytest.approx((1.0 / 32,))
    assert lattice.points().shape == (129, 33, 2)


def test_trapezoid_weights_integrate_the_box(lattice: Lattice):
    assert lattice.weights().sum() == pytest.approx(2.0)
    field = GridField.sample(lattice, lambda p: p[..., 0] * p[..., 1])
    assert np.sum(lattice.weights() * field.values) == pytest.approx(1.0, rel=1e-3)


def test_too_coarse_lattice_is_rejected(flat: MetricSpec):
    with pytest.raises(ConfigurationError):
        Lattice.for_metric(flat, 1, 16)


def test_index_and_window(lattice: Lattice):
    assert lattice.index_of(np.array([1.0, 0.5])) == (64, 16)
    assert lattice.index_of(np.array([5.0, -1.0])) == (128, 0)
    window = lattice.window(np.array([1.0, 0.5]), np.array([1.5 * 2 / 128, 1.5 / 32]))
    assert window == (slice(63, 66), slice(15, 18))


def test_refine_and_compare(lattice: Lattice):
    fine = lattice.refine(2)
    assert fine.shape == (257, 65)
    assert not fine.same_as(lattice)
    assert lattice.refine(1).same_as(lattice)


def test_walls_exclude_corners():
    spec = minkowski(2, 1.0, Rectangle(1.0, 1.0))
    lattice = Lattice.for_metric(spec, 16, 8)
    assert [w for w, _, _ in lattice.walls()] == [0, 1, 2, 3]
    left = lattice.wall_mask(0)
    assert left[0, 1:-1].all()
    assert not left[0, 0] and not left[0, -1]
    assert lattice.boundary().sum() == 4 * 8
    with pytest.raises(GeometryError):
        lattice.wall_mask(4)


def test_curved_boundary_nodes():
    spec = MetricSpec(n=2, T=1.0, domain=Disk(1.0), beta=minkowski(2).beta, g0=minkowski(2).g0)
    lattice = Lattice.for_metric(spec, 16, 16)
    ring = lattice.boundary(spec.domain)
    inside = lattice.inside(spec.domain)
    assert ring.any()
    assert not (ring & ~inside).any()
    assert not ring[8, 8]


def test_field_arithmetic_needs_the_same_lattice(lattice: Lattice):
    a = GridField.zeros(lattice) + 2.0
    b = GridField.sample(lattice, lambda p: p[..., 1])
    assert_allclose((a * b - b).values, b.values)
    with pytest.raises(AlignmentError):
        a + GridField.zeros(lattice.refine(2))
    with pytest.raises(AlignmentError):
        GridField(lattice, np.zeros((3, 3)))


def test_norms(lattice: Lattice):
    one = GridField.zeros(lattice) + 1.0
    assert one.sup_norm() == 1.0
    assert one.l2_norm() == pytest.approx(np.sqrt(2.0))
    # derivatives of a constant vanish, so every H^k norm is the L2 norm
    assert one.hk_norm(2) == pytest.approx(one.l2_norm())

    slope = GridField.sample(lattice, lambda p: p[..., 1])
    assert slope.hk_norm(1) ** 2 == pytest.approx(slope.l2_norm() ** 2 + 2.0)


def test_complex_fields_are_written_as_two_components(lattice: Lattice, tmp_path: Path):
    field = GridField.sample(lattice, lambda p: np.exp(1j * p[..., 1]))
    paths = field.write(tmp_path / "beam.bin")
    assert [p.name for p in paths] == ["beam.bin", "beam.yaml"]
    header, data = read_grid(paths[0])
    assert header.components == ["real", "imag"]
    assert header.dims == [129, 33]
    assert_allclose(data[0] + 1j * data[1], field.values)
