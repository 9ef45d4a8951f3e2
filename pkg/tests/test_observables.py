import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopsteady.observables import (
    MonomialDictionary,
    Mu_from_lifted,
    Mx_from_lifted,
    build_Mu,
    build_Mx,
    generator_separability_check,
    lift,
    lift_mixed,
)
from koopsteady.systems import iffl_field


@pytest.fixture
def d22():
    return MonomialDictionary.build(2, 2)


def test_worked_example_ordering(d22):
    assert d22.exponents == ((1, 0), (0, 1), (1, 1), (2, 0), (0, 2))
    np.testing.assert_array_equal(lift(d22, [2.0, 3.0]), [2, 3, 6, 4, 9])
    np.testing.assert_array_equal(lift(d22, [0.0, 0.0]), np.zeros(5))


@pytest.mark.parametrize("d,k", [(1, 1), (1, 4), (2, 2), (3, 2), (3, 3), (5, 2)])
def test_dimension_law_and_inclusiveness(d, k):
    dic = MonomialDictionary.build(d, k)
    assert dic.lifted_dim == MonomialDictionary.expected_dim(d, k)
    assert len(set(dic.exponents)) == dic.lifted_dim
    v = np.random.default_rng(d * 10 + k).normal(size=d)
    np.testing.assert_array_equal(lift(dic, v)[:d], v)


def test_batched_lift_matches_columns(d22):
    V = np.random.default_rng(0).normal(size=(2, 7))
    L = lift(d22, V)
    for j in range(7):
        np.testing.assert_array_equal(L[:, j], lift(d22, V[:, j]))


def test_lift_dimension_mismatch(d22):
    with pytest.raises(ValueError):
        lift(d22, [1.0, 2.0, 3.0])


def test_dictionary_validation():
    with pytest.raises(ValueError):
        MonomialDictionary.from_table(2, 2, [[0, 1], [1, 0]])
    with pytest.raises(ValueError):
        MonomialDictionary.from_table(2, 2, [[1, 0], [0, 1], [1, 1], [1, 1]])
    with pytest.raises(ValueError):
        MonomialDictionary.from_table(2, 2, [[1, 0], [0, 1], [0, 0]])
    d = MonomialDictionary.build(3, 2)
    assert MonomialDictionary.from_dict(d.to_dict()) == d


def test_jacobian_matches_finite_differences():
    dic = MonomialDictionary.build(3, 3)
    v = np.array([0.7, -1.2, 2.0])
    h = 1e-6
    fd = np.column_stack([(lift(dic, v + h * e) - lift(dic, v - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(dic.jacobian(v), fd, atol=1e-6)


def test_mixed_zero_and_scalar():
    d1 = MonomialDictionary.build(1, 1)
    np.testing.assert_array_equal(lift_mixed(d1, d1, [3.0], [2.0]), [6.0])
    d = MonomialDictionary.build(2, 2)
    assert not np.any(lift_mixed(d, d, np.zeros(2), [1.0, 2.0]))
    assert not np.any(lift_mixed(d, d, [1.0, 2.0], np.zeros(2)))


def test_worked_example_shapes(d22):
    x, u = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert lift_mixed(d22, d22, x, u).shape == (25,)
    assert build_Mx(d22, d22, x).shape == (25, 5)
    assert build_Mu(d22, d22, u).shape == (25, 5)
    assert not np.any(build_Mx(d22, d22, np.zeros(2)))
    assert not np.any(build_Mu(d22, d22, np.zeros(2)))


def test_state_major_layout(d22):
    x, u = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    px, pu = lift(d22, x), lift(d22, u)
    mixed = lift_mixed(d22, d22, x, u)
    for i in range(5):
        np.testing.assert_array_equal(mixed[i * 5:(i + 1) * 5], px[i] * pu)


def test_block_structure(d22):
    x = np.array([1.5, -0.5])
    Mx = build_Mx(d22, d22, x)
    px = lift(d22, x)
    for i in range(5):
        np.testing.assert_array_equal(Mx[i * 5:(i + 1) * 5], px[i] * np.eye(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_separability_identities(n, m, k, seed):
    dx, du = MonomialDictionary.build(n, k), MonomialDictionary.build(m, k)
    rng = np.random.default_rng(seed)
    x, u = rng.normal(size=n), rng.normal(size=m)
    mixed = lift_mixed(dx, du, x, u)
    assert mixed.size == dx.lifted_dim * du.lifted_dim
    scale = max(1.0, np.max(np.abs(mixed)))
    assert np.max(np.abs(build_Mx(dx, du, x) @ lift(du, u) - mixed)) <= 1e-13 * scale
    assert np.max(np.abs(build_Mu(dx, du, u) @ lift(dx, x) - mixed)) <= 1e-13 * scale


def test_generic_factorizations_on_arbitrary_lifts():
    rng = np.random.default_rng(3)
    px, pu = rng.normal(size=4), rng.normal(size=3)
    mixed = np.outer(px, pu).reshape(-1)
    np.testing.assert_allclose(Mx_from_lifted(px, 3) @ pu, mixed, rtol=0, atol=1e-15)
    np.testing.assert_allclose(Mu_from_lifted(pu, 4) @ px, mixed, rtol=0, atol=1e-15)


def test_generator_constant_G_has_no_mixed_terms():
    dic = MonomialDictionary.build(2, 2)
    W = np.array([[1.0, 0.0], [0.0, -1.0]])
    rng = np.random.default_rng(0)
    rep = generator_separability_check(
        W, lambda u: np.eye(2), lambda x: x, dic,
        x_samples=rng.normal(size=(20, 2)), u_samples=rng.normal(size=(20, 1)),
    )
    assert rep.max_residual == 0.0
    assert not rep.input_dependent


def test_generator_scalar_bilinear():
    dic = MonomialDictionary.build(1, 2)
    rng = np.random.default_rng(1)
    xs, us = rng.uniform(-2, 2, (50, 1)), rng.uniform(-2, 2, (50, 1))
    rep = generator_separability_check(
        [[1.0]], lambda u: np.array([[u[0]]]), lambda x: x, dic,
        field=lambda x, u: u * x, x_samples=xs, u_samples=us,
    )
    assert rep.max_residual < 1e-12 and rep.input_dependent
    # symbolic: d/dt (x, x^2) = (u x, 2 u x^2)
    x, u = 1.3, -0.4
    expected = np.array([u * x, 2 * u * x**2])
    np.testing.assert_allclose(dic.jacobian([x]) @ np.array([u * x]), expected)


def test_generator_iffl_linear_line():
    # x2' = k2 x1 + k3 u0 - delta2 x2 with W = [k2, k3, -delta2],
    # G(u) = diag(1, u0, 1), h(x) = (x1, 1, x2)
    dic = MonomialDictionary.build(1, 2)
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 5, (30, 5))
    U = rng.uniform(0, 10, (30, 2))
    W = np.array([[1.0, 1.0, -0.5]])
    rep = generator_separability_check(
        W,
        lambda u: np.diag([1.0, u[0], 1.0]),
        lambda x: np.array([x[1], 1.0, x[2]]),
        _Sub(dic, 2),
        field=lambda x, u: iffl_field(x, u)[2:3],
        x_samples=X,
        u_samples=U,
    )
    assert rep.max_residual < 1e-12 and rep.input_dependent


class _Sub:
    """Dictionary over a single coordinate of a larger state."""

    def __init__(self, dic, index):
        self.dic, self.index = dic, index

    def jacobian(self, x):
        return self.dic.jacobian([x[self.index]])
