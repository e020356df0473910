from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from beamlab.lib.config import MetricConfig
from beamlab.lib.errors import ConfigurationError, DerivativeOrderError, DomainError, InvalidInputError
from beamlab.spacetime import (
    Disk,
    Interval,
    MetricSpec,
    Rectangle,
    SpacetimePoint,
    TangentObject,
    causal_character,
    christoffel,
    conformal,
    contains,
    eval_metric,
    metric_from_config,
    metric_taylor,
    musical,
    parse_expression,
    read_grid,
    sampled,
    static,
    write_grid,
)


def test_minkowski_metric_and_inverse(flat: MetricSpec):
    g, ginv = eval_metric(flat, SpacetimePoint.of([1.0, 0.5]))
    assert_allclose(g, np.diag([-1.0, 1.0]))
    assert_allclose(ginv, np.diag([-1.0, 1.0]))


def test_points_outside_the_domain_are_rejected(flat: MetricSpec):
    with pytest.raises(DomainError):
        eval_metric(flat, SpacetimePoint.of([0.5, 1.5]))
    with pytest.raises(DomainError):
        eval_metric(flat, SpacetimePoint.of([2.5, 0.5]))
    with pytest.raises(InvalidInputError):
        eval_metric(flat, SpacetimePoint.of([0.5, 0.5, 0.5]))


def test_causal_character(flat: MetricSpec):
    p = SpacetimePoint.of([1.0, 0.5])
    assert causal_character(flat, TangentObject(p, np.array([1.0, 1.0])))[0] == "null"
    assert causal_character(flat, TangentObject(p, np.array([1.0, 0.2])))[0] == "timelike"
    assert causal_character(flat, TangentObject(p, np.array([0.2, 1.0])))[0] == "spacelike"
    with pytest.raises(InvalidInputError):
        causal_character(flat, TangentObject(p, np.zeros(2)))


def test_complex_covectors_are_classified_by_their_real_part(flat: MetricSpec):
    p = SpacetimePoint.of([1.0, 0.5])
    gradient = TangentObject(p, np.array([1.0 + 0.4j, -1.0 + 0.1j]), "covector")
    character, value = causal_character(flat, gradient)
    assert character == "null"
    assert isinstance(value, float)
    assert causal_character(flat, TangentObject(p, np.array([1.0 + 2j, 0.2j]), "covector"))[0] == "timelike"
    with pytest.raises(InvalidInputError):
        causal_character(flat, TangentObject(p, np.array([0.5j, 1j]), "covector"))


def test_musical_isomorphisms_are_inverse():
    spec = conformal("1 + 0.1*x**2", 1, 2.0)
    p = SpacetimePoint.of([1.0, 0.6])
    v = TangentObject(p, np.array([1.0, 0.3]))
    lowered = musical(spec, v)
    assert lowered.variance == "covector"
    assert_allclose(musical(spec, lowered).components, v.components)


def test_flat_christoffel_symbols_vanish(flat: MetricSpec):
    assert_allclose(christoffel(flat, SpacetimePoint.of([1.0, 0.5])), 0.0, atol=1e-14)


def test_conformal_christoffel_symbols():
    spec = conformal("exp(x)", 1, 2.0)
    gamma = christoffel(spec, SpacetimePoint.of([1.0, 0.5]))
    # g = e^x (-dt^2 + dx^2): Gamma^x_xx = Gamma^x_tt = Gamma^t_tx = 1/2
    assert gamma[1, 1, 1] == pytest.approx(0.5)
    assert gamma[1, 0, 0] == pytest.approx(0.5)
    assert gamma[0, 0, 1] == pytest.approx(0.5)
    assert gamma[0, 1, 0] == pytest.approx(0.5)


def test_finite_difference_taylor_matches_analytic():
    spec = conformal("1 + 0.1*x**2 + 0.05*t*x", 1, 2.0)
    fd = replace(spec, derivative_mode="finite-difference")
    points = np.array([[1.0, 0.4], [0.5, 0.7]])
    assert_allclose(fd.taylor(points, 2).coeffs, spec.taylor(points, 2).coeffs, atol=1e-6)
    with pytest.raises(DerivativeOrderError):
        fd.taylor(points, 3)


def test_taylor_jet_reproduces_the_metric_nearby():
    spec = static("1 + t*x/4", [["1 + x**2/2"]], 2.0)
    base = np.array([1.0, 0.5])
    step = np.array([0.01, -0.02])
    jet = spec.taylor(base, 4)
    assert_allclose(jet(step), spec.metric_at(base + step), atol=1e-10)


def test_metric_taylor_is_exact_for_a_quadratic_factor():
    spec = conformal("1 + 0.05*x**2", 1, 2.0)
    bases = np.array([[1.0, 0.5], [0.3, 0.1]])
    jet = metric_taylor(spec, bases, 2)
    assert jet.shape == (2, 2, 2)
    step = np.array([0.0, 0.2])
    assert_allclose(jet(step), spec.metric_at(bases + step), atol=1e-12)
    # x = 0.7: g_xx = 1 + 0.05 * 0.49
    assert jet(step)[0, 1, 1] == pytest.approx(1.0245)


def test_two_dimensional_static_metric():
    spec = static("1", [["1", "0"], ["0", "1 + y/2"]], 1.0, Rectangle(1.0, 2.0))
    g = spec.metric_at(np.array([0.5, 0.5, 1.0]))
    assert_allclose(g, np.diag([-1.0, 1.0, 1.5]))


def test_metric_rejects_unknown_symbols_and_bad_domains():
    with pytest.raises(ConfigurationError):
        conformal("1 + z", 1, 1.0)
    with pytest.raises(ConfigurationError):
        MetricSpec(n=2, T=1.0, domain=Interval(), beta=parse_expression("1"), g0=((parse_expression("1"),),))
    with pytest.raises(ConfigurationError):
        parse_expression("1 +* x")


def test_domains():
    assert contains(Interval(2.0), np.array([[1.0], [2.5]])).tolist() == [True, False]
    assert Rectangle(1.0, 2.0).wall(np.array([0.5, 2.0])) == (1, 2.0)
    assert_allclose(Disk(2.0).outward_normal(np.array([0.0, 1.0])), [0.0, 1.0])
    assert Disk(2.0).diameter == 4.0


def test_sample_grid_roundtrip(tmp_path: Path):
    t = np.linspace(0.0, 2.0, 9)
    x = np.linspace(0.0, 1.0, 6)
    tt, xx = np.meshgrid(t, x, indexing="ij")
    values = np.stack([1.0 + 0.1 * xx, 1.0 + 0.2 * tt])
    path = tmp_path / "metric.bin"
    write_grid(path, values, [[0.0, 2.0], [0.0, 1.0]], ["beta", "g0_xx"])

    header, data = read_grid(path)
    assert header.dims == [9, 6]
    assert_allclose(data, values)

    spec = sampled(path, 2.0, Interval(1.0))
    assert spec.derivative_mode == "finite-difference"
    beta, g0 = spec.fields(np.array([1.3, 0.35]))
    assert beta == pytest.approx(1.035)
    assert g0[0, 0] == pytest.approx(1.26)


def test_missing_sample_grid(tmp_path: Path):
    with pytest.raises(ConfigurationError):
        read_grid(tmp_path / "absent.bin")


def test_metric_from_config():
    spec = metric_from_config(MetricConfig(kind="conformal", factor="1 + x/10", T=3.0))
    assert spec.name == "conformal"
    assert spec.T == 3.0
    assert spec.metric_at(np.array([0.0, 1.0]))[1, 1] == pytest.approx(1.1)

    fd = metric_from_config(MetricConfig(derivative_mode="finite-difference"))
    assert fd.derivative_mode == "finite-difference"
