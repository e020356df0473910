import numpy as np
import pytest
from numpy.testing import assert_allclose

from beamlab.jets import Jet, JetSpline, basis, det, matinv, matmul, quadratic_form
from beamlab.lib.errors import InvalidInputError


def test_basis_is_graded():
    b = basis(2, 3)
    assert b.size == 10
    assert [int(e.sum()) for e in b.exponents] == [0, 1, 1, 2, 2, 2, 3, 3, 3, 3]
    assert b.index[(1, 1)] == 4


def test_product_drops_terms_above_degree():
    x, y = Jet.variable(0, 2, 3), Jet.variable(1, 2, 3)
    assert_allclose(((1 + x) * (1 + y)).part(2), [0.0, 1.0, 0.0])

    z = Jet.variable(0, 1, 2)
    assert_allclose(((1 + z) ** 3).coeffs, [1.0, 3.0, 3.0])


def test_reciprocal_inverts_within_truncation():
    x, y = Jet.variable(0, 2, 4), Jet.variable(1, 2, 4)
    a = 2.0 + x - 0.5 * y + x * y
    one = a * a.reciprocal()
    assert one.constant_term == pytest.approx(1.0)
    assert_allclose(one.coeffs[1:], 0.0, atol=1e-14)


def test_log_undoes_exp():
    x, y = Jet.variable(0, 2, 5), Jet.variable(1, 2, 5)
    a = 0.5 + x + 2.0 * y
    assert_allclose(a.exp().log().coeffs, a.coeffs, atol=1e-12)


def test_compose_substitutes_variables():
    z = Jet.variable(0, 1, 3)
    square = z * z
    assert_allclose(square.compose([z.scale(2.0)]).coeffs, [0.0, 0.0, 4.0, 0.0])

    with pytest.raises(InvalidInputError):
        square.compose([z + 1.0])


def test_diff_and_evaluation_agree_with_polynomial():
    x, y = Jet.variable(0, 2, 3), Jet.variable(1, 2, 3)
    p = 1.0 + 2.0 * x + x * y - 3.0 * y * y * y
    point = np.array([0.3, -0.7])
    assert p(point) == pytest.approx(1.0 + 0.6 - 0.21 + 3.0 * 0.343)
    assert p.diff(1)(point) == pytest.approx(0.3 - 9.0 * 0.49)
    assert p.gradient().shape == (2,)


def test_batched_evaluation_broadcasts():
    z = Jet.variable(0, 1, 2)
    batch = Jet.stack([z, z * 2.0, z * z])
    assert batch.shape == (3,)
    assert_allclose(batch(np.array([[0.5]])), [0.5, 1.0, 0.25])


def test_wrong_coefficient_count_is_rejected():
    with pytest.raises(InvalidInputError):
        Jet(np.zeros(5), 2, 2)


def test_matrix_inverse_and_determinant():
    x = Jet.variable(0, 2, 3)
    a = Jet.constant(np.array([[2.0, 1.0], [1.0, 3.0]]), 2, 3) + x.scale(np.array([[1.0, 0.0], [0.5, -1.0]]))
    identity = matmul(a, matinv(a))
    assert_allclose(identity.constant_term, np.eye(2), atol=1e-14)
    assert_allclose(identity.coeffs[..., 1:], 0.0, atol=1e-13)

    point = np.array([0.2, 0.4])
    assert det(a)(point) == pytest.approx(np.linalg.det(a(point)))


def test_quadratic_form_matches_dense_product():
    m = Jet.constant(np.array([[1.0, 2.0], [2.0, -1.0]]), 1, 1)
    v = Jet.constant(np.array([1.0, 3.0]), 1, 1)
    assert quadratic_form(m, v, v).constant_term == pytest.approx(1.0 + 12.0 - 9.0)


def test_spline_reproduces_linear_data():
    grid = np.linspace(0.0, 1.0, 11)
    slope = np.array([1.0, -2.0, 0.5])
    spline = JetSpline(grid, Jet(grid[:, None] * slope, 1, 2))
    assert_allclose(spline(0.37).coeffs, 0.37 * slope, atol=1e-13)
    assert_allclose(spline(0.37, 1).coeffs, slope, atol=1e-12)
    assert spline.bounds == (0.0, 1.0)
