import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_discovery.library import (CandidateLibrary, CoefficientState, Term, build_polynomial_library,
                                      evaluate_terms, format_equations, library_from_config, normalize_library,
                                      polynomial_term_count, rescale_coefficients, scale_coefficients,
                                      term_jacobian_hessian)


@pytest.mark.parametrize("d,q,const,p,total", [
    (2, 3, False, 9, 18),
    (3, 3, False, 19, 57),
    (5, 2, True, 21, 105),
    (2, 6, False, 27, 54),
])
def test_library_sizes(d, q, const, p, total):
    lib = build_polynomial_library(d, q, const)
    assert lib.n_terms == p
    assert d * lib.n_terms == total
    assert polynomial_term_count(d, q, const) == p


def test_term_count_formula():
    for d in range(1, 5):
        for q in range(1, 5):
            assert build_polynomial_library(d, q).n_terms == math.comb(d + q, q) - 1


def test_graded_lex_order_and_determinism():
    lib = build_polynomial_library(2, 2)
    assert lib.names(["x", "y"]) == ["x", "y", "x^2", "x*y", "y^2"]
    again = build_polynomial_library(2, 2)
    assert [t.exponents for t in lib.terms] == [t.exponents for t in again.terms]


def test_invalid_construction():
    with pytest.raises(ValueError):
        build_polynomial_library(2, 0)
    with pytest.raises(ValueError):
        Term.monomial((1, -1))
    with pytest.raises(ValueError):
        CandidateLibrary(2, [Term.monomial((1, 0)), Term.monomial((1, 0))])
    with pytest.raises(ValueError):
        CandidateLibrary(2, [Term.exponential(0, 0)])  # no inner slot declared
    with pytest.raises(ValueError):
        CandidateLibrary(1, [Term.monomial((1,))], scales=[0.0])


def test_point_values():
    lib = CandidateLibrary(2, [Term.monomial((1, 1)), Term.monomial((0, 0)), Term.exponential(0, 0)], n_inner=1)
    v = evaluate_terms(lib, [2.0, 3.0], [-0.7])
    assert v[0] == 6.0
    assert v[1] == 1.0
    assert evaluate_terms(lib, [0.0, 5.0], [3.3])[2] == 1.0
    with pytest.raises(ValueError):
        evaluate_terms(lib, [np.nan, 1.0], [0.0])


def test_point_derivatives():
    lib = CandidateLibrary(2, [Term.monomial((2, 1)), Term.monomial((3, 0)), Term.exponential(0, 0)], n_inner=1)
    T = term_jacobian_hessian(lib, [2.0, 3.0], [-1.0])
    assert T.dx[0, 0] == pytest.approx(12.0)
    assert T.dxx[1, 0, 0] == pytest.approx(12.0)
    T = term_jacobian_hessian(lib, [1.0, 0.0], [-1.0])
    assert T.da[2, 0] == pytest.approx(math.exp(-1.0), rel=1e-12)


def _fd_check(lib, x, inner, h=1e-5):
    T = term_jacobian_hessian(lib, x, inner)
    d, q = lib.state_dim, lib.n_inner
    for j in range(d):
        e = np.zeros(d)
        e[j] = h * max(1.0, abs(x[j]))
        fp = term_jacobian_hessian(lib, x + e, inner)
        fm = term_jacobian_hessian(lib, x - e, inner)
        np.testing.assert_allclose(T.dx[:, j], (fp.values - fm.values) / (2 * e[j]), rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(T.dxx[:, :, j], (fp.dx - fm.dx) / (2 * e[j]), rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(T.dxa[:, j, :], (fp.da - fm.da) / (2 * e[j]), rtol=1e-6, atol=1e-6)
    for l in range(q):
        e = np.zeros(q)
        e[l] = h
        fp = term_jacobian_hessian(lib, x, inner + e)
        fm = term_jacobian_hessian(lib, x, inner - e)
        np.testing.assert_allclose(T.da[:, l], (fp.values - fm.values) / (2 * h), rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(T.daa[:, :, l], (fp.da - fm.da) / (2 * h), rtol=1e-6, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 3), q=st.integers(1, 4), const=st.booleans(), seed=st.integers(0, 2**31))
def test_derivatives_match_finite_differences(d, q, const, seed):
    rng = np.random.default_rng(seed)
    lib = build_polynomial_library(d, q, const, exp_vars=[int(rng.integers(d))])
    lib = lib.with_scales(rng.uniform(0.5, 2.0, lib.n_terms))
    _fd_check(lib, rng.uniform(-1.5, 1.5, d), rng.uniform(-1.0, 1.0, 1))


def test_batched_evaluation_matches_rowwise():
    rng = np.random.default_rng(4)
    lib = build_polynomial_library(3, 3, True, exp_vars=[1])
    X = rng.normal(size=(7, 3))
    batch = evaluate_terms(lib, X, [0.3])
    rows = np.array([evaluate_terms(lib, x, [0.3]) for x in X])
    np.testing.assert_array_equal(batch, rows)


def test_normalization(caplog):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 2))
    X[:, 1] = 0.0
    lib = build_polynomial_library(2, 2, include_constant=True)
    libn = normalize_library(lib, X)
    assert "vanishing data norm" in caplog.text
    names = lib.names()
    assert libn.scales[names.index("1")] == pytest.approx(math.sqrt(50))
    assert libn.degenerate[names.index("x2")]
    assert libn.scales[names.index("x2")] == 1.0
    norms = np.linalg.norm(evaluate_terms(libn, X), axis=0)
    np.testing.assert_allclose(norms[~libn.degenerate], 1.0, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_predictions_invariant_under_normalization(seed):
    rng = np.random.default_rng(seed)
    lib = build_polynomial_library(2, 3, True, exp_vars=[0])
    libn = normalize_library(lib, rng.normal(size=(20, 2)), [0.4])
    theta = rng.normal(size=(2, lib.n_terms))
    c = CoefficientState(theta, np.ones_like(theta, bool), [0.4], scaled=False)
    cs = scale_coefficients(c, libn)
    x = rng.normal(size=(5, 2))
    raw = evaluate_terms(lib, x, [0.4]) @ theta.T
    scaled = evaluate_terms(libn, x, [0.4]) @ cs.theta.T
    np.testing.assert_allclose(raw, scaled, rtol=1e-12, atol=1e-12)
    back = rescale_coefficients(cs, libn)
    np.testing.assert_allclose(back.theta, theta, rtol=1e-14)


def test_rescale_simple_cases():
    lib = build_polynomial_library(1, 1)
    c = CoefficientState([[2.0]], [[True]])
    assert rescale_coefficients(c, lib).theta[0, 0] == 2.0
    assert rescale_coefficients(c, lib.with_scales([4.0])).theta[0, 0] == 0.5
    with pytest.raises(ValueError):
        rescale_coefficients(rescale_coefficients(c, lib), lib)


def test_standardization_round_trip():
    # fit in xbar = x / sigma coordinates, map back and compare predictions
    rng = np.random.default_rng(1)
    lib = build_polynomial_library(3, 2, True, exp_vars=[0])
    sig = np.array([2.0, 0.5, 3.0])
    libn = normalize_library(lib, rng.normal(size=(30, 3)), [-0.6])
    theta_bar = rng.normal(size=(3, lib.n_terms))
    cb = CoefficientState(theta_bar, np.ones_like(theta_bar, bool), [-0.6], scaled=True)
    c = rescale_coefficients(cb, libn, sig)
    x = rng.normal(size=(6, 3))
    # d(x)/dt = sigma * d(xbar)/dt = sigma * f_bar(x / sigma)
    lhs = evaluate_terms(lib, x, c.inner) @ c.theta.T
    rhs = sig * (evaluate_terms(libn, x / sig, cb.inner) @ theta_bar.T)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)
    again = scale_coefficients(c, libn, sig)
    np.testing.assert_allclose(again.theta, theta_bar, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(again.inner, cb.inner, rtol=1e-12)


def test_masked_entries_are_zero():
    c = CoefficientState(np.ones((2, 3)), [[1, 0, 1], [0, 0, 1]])
    assert c.theta[0, 1] == 0 and c.theta[1, 0] == 0
    assert c.n_active == 3


def test_config_round_trip_and_equations():
    lib = build_polynomial_library(3, 2, True, exp_vars=[0])
    cfg = lib.to_config()
    assert cfg == {"state_dim": 3, "max_degree": 2, "include_constant": True,
                   "nonlinear": [{"kind": "exp", "var": 0}]}
    again = library_from_config(cfg)
    assert again.names() == lib.names()
    theta = np.zeros((3, lib.n_terms))
    theta[0, lib.names().index("x3")] = 5.0
    theta[1, lib.names().index("1")] = 6.0
    theta[1, lib.names().index("exp(a0*x1)")] = -6.0
    c = CoefficientState(theta, theta != 0, [-1.0], scaled=False)
    eqs = format_equations(c, lib, ["x", "y", "z"])
    assert eqs[0] == "dx/dt = 5*z"
    assert "exp(-1*x)" in eqs[1] and "6" in eqs[1]
    assert eqs[2].endswith("= 0")
