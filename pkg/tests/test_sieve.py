import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survfuse.errors import InvalidInputError
from survfuse.sieve import (SieveBasis, build_basis, default_interior_knots, eval_basis,
                            penalty_matrix, pooled_domain)


def _cox_de_boor(knots, k, i, x):
    """Textbook recursion, half-open intervals, closed at the right end."""
    if k == 0:
        if knots[i] <= x < knots[i + 1]:
            return 1.0
        last = x == knots[-1] and knots[i] < knots[i + 1] == knots[-1]
        return 1.0 if last else 0.0
    out = 0.0
    if knots[i + k] > knots[i]:
        out += (x - knots[i]) / (knots[i + k] - knots[i]) * _cox_de_boor(knots, k - 1, i, x)
    if knots[i + k + 1] > knots[i + 1]:
        out += ((knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1])
                * _cox_de_boor(knots, k - 1, i + 1, x))
    return out


def _greville(basis, d):
    t, k = basis.knots(d), basis.degree
    return np.array([t[j + 1:j + k + 1].mean() for j in range(basis.sizes[d])])


def test_basis_counts():
    assert build_basis([(0, 1)], 0, 3).dim == 4
    assert build_basis([(0, 1), (-2, 2)], 3, 3).dim == 49


def test_corner_has_single_unit_function():
    b = build_basis([(0, 1), (-2, 2)], 3, 3)
    for corner in ([0, -2], [1, 2], [0, 2], [1, -2]):
        v = eval_basis(b, np.array([corner], float))[0]
        assert np.count_nonzero(v) == 1 and v.max() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.integers(0, 6),
       st.integers(1, 4))
def test_partition_of_unity(x, knots, degree):
    b = build_basis([(-1.0, 2.0), (-2.0, 0.5)], knots, degree)
    assert abs(eval_basis(b, np.array([x]))[0].sum() - 1.0) < 1e-12


def test_linear_hats_at_cell_midpoint():
    b = build_basis([(0, 4)], 3, 1)
    v = eval_basis(b, np.array([[1.5]]))[0]
    nz = v[v != 0]
    np.testing.assert_allclose(nz, [0.5, 0.5], atol=1e-15)


def test_matches_naive_recursion(rng):
    b = build_basis([(-1.0, 2.0)], 4, 3)
    t = b.knots(0)
    xs = rng.uniform(-1, 2, 100)
    got = eval_basis(b, xs[:, None])
    ref = np.array([[_cox_de_boor(t, 3, i, x) for i in range(b.dim)] for x in xs])
    assert np.max(np.abs(got - ref)) < 1e-12


def test_tensor_product_order(rng):
    b = build_basis([(0, 1), (0, 1)], (2, 1), 2)
    x = rng.uniform(size=(5, 2))
    got = eval_basis(b, x)
    b1 = eval_basis(build_basis([(0, 1)], 2, 2), x[:, :1])
    b2 = eval_basis(build_basis([(0, 1)], 1, 2), x[:, 1:])
    ref = np.stack([np.kron(u, v) for u, v in zip(b1, b2)])
    np.testing.assert_allclose(got, ref, atol=1e-15)


def test_points_outside_domain_are_clamped():
    b = build_basis([(0, 1)], 2, 3)
    np.testing.assert_array_equal(eval_basis(b, [[5.0]]), eval_basis(b, [[1.0]]))
    assert b.clamped == 1


def test_penalty_null_space_contains_affine_functions(rng):
    b = build_basis([(-1.0, 2.0), (0.0, 3.0)], 3, 3)
    P = penalty_matrix(b, 2).matrix
    gx, gy = _greville(b, 0), _greville(b, 1)
    for _ in range(5):
        c0, c1, c2 = rng.normal(size=3)
        theta = (c0 + c1 * gx[:, None] + c2 * gy[None, :]).ravel()
        # the coefficients reproduce the affine function exactly
        pts = rng.uniform([-1, 0], [2, 3], size=(10, 2))
        np.testing.assert_allclose(eval_basis(b, pts) @ theta, c0 + c1 * pts[:, 0] + c2 * pts[:, 1],
                                   atol=1e-12)
        assert abs(theta @ P @ theta) < 1e-10
    # the bilinear term is penalized through the mixed derivative
    xy = (gx[:, None] * gy[None, :]).ravel()
    assert xy @ P @ xy == pytest.approx(2 * 3.0 * 3.0, rel=1e-10)


def test_penalty_is_symmetric():
    P = penalty_matrix(build_basis([(0, 1), (0, 2)], 4, 3), 2).matrix
    assert np.max(np.abs(P - P.T)) < 1e-14


def test_penalty_matches_trapezoid_quadrature():
    b = build_basis([(0.0, 1.0)], 1, 3)
    P = penalty_matrix(b, 2).matrix
    from scipy.interpolate import BSpline
    d2 = BSpline(b.knots(0), np.eye(b.dim), 3).derivative(2)
    ref = np.zeros_like(P)
    # 10^4-point trapezoid rule on each knot cell, where the integrand is smooth
    for lo, hi in ((0.0, 0.5), (0.5, 1.0)):
        t = np.linspace(lo, hi, 10_000)
        v = d2(t)
        ref += np.trapezoid(v[:, :, None] * v[:, None, :], t, axis=0)
    assert np.max(np.abs(P - ref)) <= 1e-8 * np.max(np.abs(P))


def test_penalty_order_checks():
    b = build_basis([(0, 1)], 2, 2)
    with pytest.raises(InvalidInputError):
        penalty_matrix(b, 3)
    P0 = penalty_matrix(b, 0).matrix
    # order 0 is the Gram matrix: ones' quadratic form is the domain length
    assert np.ones(b.dim) @ P0 @ np.ones(b.dim) == pytest.approx(1.0, rel=1e-12)


def test_domain_and_knot_helpers():
    assert default_interior_knots(1500, 2, 2) == 3
    assert default_interior_knots(1, 2, 2) == 0
    dom = pooled_domain(np.array([[0.0, 1.0], [2.0, 1.0]]))
    assert dom[0] == pytest.approx((-0.02, 2.02))
    assert dom[1][0] < 1.0 < dom[1][1]
    with pytest.raises(InvalidInputError):
        SieveBasis(3, ((1.0, 0.0),), (2,))


def test_basis_dict_round_trip():
    b = build_basis([(0.1, 0.9), (-3, 3)], (2, 4), 3)
    assert SieveBasis.from_dict(b.to_dict()) == b
