import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sicure.splines import (KnotWarning, SplineBasis, bspline_matrix, eval_bspline, eval_ispline,
                            ispline_matrix, make_basis)

from oracles import cox_de_boor, mspline


@pytest.fixture
def basis():
    return make_basis([0.3, 0.8, 1.1, 1.7, 2.2, 2.9, 3.5, 4.0], degree=3, n_knots=5)


def test_example_range():
    b = make_basis([1, 2, 3, 4, 5], degree=3, n_knots=5)
    vals = ispline_matrix(b, np.linspace(0, 6, 500))
    assert vals.min() >= 0 and vals.max() <= 1


def test_counts_and_boundary(basis):
    assert basis.k == 5 + 3
    assert basis.m == 5 + 3 + 1
    assert basis.boundary == (0.0, 4.0 * (1 + 1e-9))


def test_zero_and_saturation(basis):
    assert np.all(eval_ispline(basis, 0.0) == 0)
    assert np.all(eval_ispline(basis, basis.hi) == 1)
    assert np.all(eval_ispline(basis, 10.0) == 1)


def test_negative_time_rejected(basis):
    with pytest.raises(ValueError):
        eval_ispline(basis, -1e-3)


@pytest.mark.parametrize("degree", [1, 2, 3, 4])
def test_quadrature_oracle(degree):
    b = make_basis(np.linspace(0.2, 5, 30), degree=degree, n_knots=4)
    for t in (0.5 * b.hi, 0.13 * b.hi, 0.77 * b.hi):
        got = eval_ispline(b, t)
        knots = [b.lo, *b.interior_knots, b.hi]
        for i in range(b.k):
            val = sum(integrate.quad(lambda s: mspline(b, i, s), a, min(c, t), epsabs=1e-14, epsrel=1e-12)[0]
                      for a, c in zip(knots[:-1], knots[1:]) if a < t)
            assert got[i] == pytest.approx(val, abs=1e-8)


@pytest.mark.parametrize("degree", [2, 3])
def test_monotone_grid_scan(degree):
    b = make_basis(np.random.default_rng(1).gamma(2.0, 1.0, 100), degree=degree, n_knots=5)
    vals = ispline_matrix(b, np.linspace(0, b.hi * 1.1, 1000))
    assert np.all(np.diff(vals, axis=0) >= -1e-14)


def test_bspline_recursion_oracle(basis):
    u = np.random.default_rng(7).uniform(basis.lo, basis.hi, 200)
    u = np.r_[u, basis.lo, basis.hi, basis.interior_knots]
    got = bspline_matrix(basis, u)
    kv = basis.knot_vector
    want = np.array([[cox_de_boor(kv, basis.degree, j, x) for j in range(basis.m)] for x in u])
    assert np.max(np.abs(got - want)) < 1e-12


def test_bspline_boundaries_and_clamping(basis):
    lo = eval_bspline(basis, basis.lo)
    assert lo[0] == 1 and np.all(lo[1:] == 0)
    assert np.array_equal(eval_bspline(basis, -5.0), lo)
    hi = eval_bspline(basis, basis.hi + 3.0)
    assert hi[-1] == pytest.approx(1.0)


def test_partition_of_unity(basis):
    vals = bspline_matrix(basis, np.linspace(basis.lo, basis.hi, 1000))
    assert np.all(vals >= 0)
    assert np.max(np.abs(vals.sum(axis=1) - 1)) < 1e-12


def test_continuity_at_knots(basis):
    for kn in basis.interior_knots:
        left = eval_ispline(basis, kn - 1e-10)
        right = eval_ispline(basis, kn + 1e-10)
        assert np.max(np.abs(left - right)) < 1e-8


def test_ties_collapse_with_warning():
    with pytest.warns(KnotWarning):
        b = make_basis([1.0] * 20 + [2.0], degree=3, n_knots=5)
    assert b.k < 5 + 3
    assert b.notes


def test_bad_arguments():
    with pytest.raises(ValueError):
        make_basis([1, 2, 3], degree=5)
    with pytest.raises(ValueError):
        make_basis([1, 2, 3], n_knots=1)
    with pytest.raises(ValueError):
        make_basis([], n_knots=3)
    with pytest.raises(ValueError):
        make_basis([1, 2], placement="random")
    with pytest.raises(ValueError):
        SplineBasis(3, (0.5,), (1.0, 0.0))


def test_even_placement():
    b = make_basis([1.0, 10.0], n_knots=4, placement="even")
    assert np.allclose(np.diff([0.0, *b.interior_knots, b.hi]), b.hi / 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 50), min_size=3, max_size=40),
       st.integers(1, 4), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_nonnegative_combination_is_monotone(times, degree, n_knots, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KnotWarning)
        b = make_basis(times, degree=degree, n_knots=n_knots)
    rng = np.random.default_rng(seed)
    eta = rng.exponential(size=b.k)
    t = np.sort(rng.uniform(0, b.hi * 1.2, 300))
    lam = ispline_matrix(b, np.r_[0.0, t]) @ eta
    assert lam[0] == 0
    assert np.all(np.diff(lam) >= -1e-12)


def test_roundtrip_dict(basis):
    assert SplineBasis.from_dict(basis.to_dict()) == basis
