import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_discovery.discrete import (HybridObjective, LossWeights, Observations, StateGrid, build_grid, loss,
                                       midpoint_residual, midpoint_residuals, smooth_l0, unnormalized_fit)
from hybrid_discovery.library import CoefficientState, build_polynomial_library


def test_grid_refinement():
    g = build_grid([0.0, 0.1, 0.2], 1, 2)
    np.testing.assert_array_equal(g.times, [0.0, 0.1, 0.2])
    g = build_grid([0.0, 0.1, 0.2], 2, 2)
    np.testing.assert_allclose(g.times, [0, 0.05, 0.1, 0.15, 0.2])
    assert list(g.data_index) == [0, 2, 4]
    g = build_grid(0.4 * np.arange(5), 16)
    np.testing.assert_allclose(g.dt, 0.025)
    with pytest.raises(ValueError):
        build_grid([0.0, 0.2, 0.1])
    with pytest.raises(ValueError):
        build_grid([0.0, 0.1], 0)


def test_midpoint_residual_examples():
    lib = build_polynomial_library(2, 1)   # x1, x2
    theta = np.array([[0.0, 1.0], [0.0, 0.0]])
    c = CoefficientState(theta, theta != 0)
    g = StateGrid(np.array([0.0, 0.1]), np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]))
    r = midpoint_residual(g, lib, c, 0)
    assert r[0] == pytest.approx(9.5)
    assert r[1] == pytest.approx(10.0)
    # constant states and zero model
    g0 = StateGrid(np.linspace(0, 1, 5), np.ones((5, 2)), np.arange(5))
    zero = CoefficientState(np.zeros((2, 2)), np.zeros((2, 2), bool))
    np.testing.assert_array_equal(midpoint_residuals(g0, lib, zero), 0.0)
    with pytest.raises(IndexError):
        midpoint_residual(g0, lib, zero, 4)


def test_midpoint_exact_for_constant_flow():
    lib = build_polynomial_library(1, 1, include_constant=True)
    c = CoefficientState([[3.0, 0.0]], [[True, False]])
    t = np.sort(np.random.default_rng(0).uniform(0, 2, 12))
    g = StateGrid(t, (1.0 + 3.0 * t)[:, None], np.arange(t.size))
    np.testing.assert_allclose(midpoint_residuals(g, lib, c), 0.0, atol=1e-12)


def test_smooth_l0():
    assert smooth_l0(np.zeros(4), 0.01) == 0.0
    assert smooth_l0(np.array([0.01]), 0.01) == pytest.approx(1 - math.exp(-0.5))
    assert abs(smooth_l0(np.array([0.1, -0.5, 2.0]), 0.01) - 3) < 1e-21
    c = CoefficientState([[5.0, 7.0]], [[True, False]])
    assert smooth_l0(c, 0.01) == pytest.approx(1.0)


def _toy(seed, d=2, n=7, missing=0.3):
    rng = np.random.default_rng(seed)
    lib = build_polynomial_library(d, 2, True)
    t = np.cumsum(rng.uniform(0.05, 0.2, n))
    obs_vals = rng.normal(size=(n, d))
    mask = rng.random((n, d)) > missing
    obs = Observations(t, obs_vals, mask)
    grid = build_grid(t, 1, d)
    grid.values = rng.normal(size=(n, d))
    cmask = rng.random((d, lib.n_terms)) > 0.3
    c = CoefficientState(rng.normal(size=(d, lib.n_terms)), cmask)
    return lib, obs, grid, c


def test_loss_matches_hand_summation():
    lib, obs, grid, c = _toy(3)
    w = LossWeights(0.7, 0.2, 0.05)
    parts = loss(grid, obs, lib, c, w)
    # brute force over all indices
    n = grid.n
    model = 0.0
    for i in range(n - 1):
        u0, u1 = grid.values[i], grid.values[i + 1]
        m = 0.5 * (u0 + u1)
        for comp in range(lib.state_dim):
            f = sum(c.theta[comp, k] * np.prod(m ** np.array(lib.terms[k].exponents))
                    for k in range(lib.n_terms) if c.mask[comp, k])
            model += ((u1[comp] - u0[comp]) / (grid.times[i + 1] - grid.times[i]) - f) ** 2
    data, count = 0.0, 0
    for i in range(n):
        for comp in range(lib.state_dim):
            if obs.mask[i, comp]:
                data += (obs.values[i, comp] - grid.values[i, comp]) ** 2
                count += 1
    active = c.theta[c.mask]
    pen = sum(1 - math.exp(-v * v / (2 * 0.05 ** 2)) for v in active) / active.size
    assert parts.model_err == pytest.approx(model / n, rel=1e-12)
    assert parts.data_err == pytest.approx(0.7 * data / count, rel=1e-12)
    assert parts.penalty == pytest.approx(0.2 * pen, rel=1e-12)
    assert parts.total == pytest.approx(parts.model_err + parts.data_err + parts.penalty, rel=1e-14)
    F = unnormalized_fit(grid, obs, lib, c, 0.7)
    assert F == pytest.approx(n * parts.model_err + obs.n_hat * parts.data_err, rel=1e-12)


def test_zero_loss_cases():
    lib = build_polynomial_library(1, 1)
    t = np.linspace(0, 1, 4)
    obs = Observations(t, np.full((4, 1), 2.0))
    grid = StateGrid(t, np.full((4, 1), 2.0), np.arange(4))
    c = CoefficientState([[0.0]], [[True]])
    assert loss(grid, obs, lib, c, LossWeights(1.0, 1.0)).total == 0.0
    assert unnormalized_fit(grid, obs, lib, c, 1.0) == 0.0
    with pytest.raises(ValueError):
        loss(grid, obs, build_polynomial_library(2, 1), CoefficientState(np.zeros((2, 2)), np.ones((2, 2))),
             LossWeights(1.0))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0.0)
    with pytest.raises(ValueError):
        LossWeights(1.0, -1.0)
    with pytest.raises(ValueError):
        LossWeights(1.0, 0.0, 0.0)


def test_loss_invariant_under_term_permutation():
    lib, obs, grid, c = _toy(5)
    w = LossWeights(1.3, 0.1)
    perm = np.random.default_rng(1).permutation(lib.n_terms)
    from dataclasses import replace
    lib_p = replace(lib, terms=[lib.terms[k] for k in perm])
    c_p = CoefficientState(c.theta[:, perm], c.mask[:, perm])
    a = loss(grid, obs, lib, c, w)
    b = loss(grid, obs, lib_p, c_p, w)
    assert b.total == pytest.approx(a.total, rel=1e-13)


def test_objective_agrees_with_loss():
    lib, obs, grid, c = _toy(8)
    w = LossWeights(2.0, 0.3)
    obj = HybridObjective(grid.times, grid.data_index, obs, lib, c.mask, c.inner, w)
    x = obj.pack(grid.values, c)
    ref = loss(grid, obs, lib, c, w)
    got = obj.parts(x)
    for a, b in zip(got, ref):
        assert a == pytest.approx(b, rel=1e-13)
    assert obj.unnormalized_fit(x) == pytest.approx(unnormalized_fit(grid, obs, lib, c, 2.0), rel=1e-13)
    u, c2 = obj.unpack(x)
    np.testing.assert_array_equal(u, grid.values)
    np.testing.assert_array_equal(c2.theta, c.theta)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 3), refine=st.integers(1, 2))
def test_objective_gradient_matches_central_differences(seed, d, refine):
    rng = np.random.default_rng(seed)
    lib = build_polynomial_library(d, 2, True, exp_vars=[0])
    n_obs = 5
    t = np.cumsum(rng.uniform(0.1, 0.3, n_obs))
    obs = Observations(t, rng.normal(size=(n_obs, d)), rng.random((n_obs, d)) > 0.2)
    grid = build_grid(t, refine, d)
    mask = rng.random((d, lib.n_terms)) > 0.3
    mask[0, -1] = True
    obj = HybridObjective(grid.times, grid.data_index, obs, lib, mask, [-0.4],
                          LossWeights(rng.uniform(0.1, 5), rng.uniform(0, 1), 0.5))
    x = rng.normal(scale=0.5, size=obj.size)
    g = obj.gradient(x)
    fd = np.empty_like(g)
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
    assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-6


def test_observation_csv_round_trip(tmp_path):
    obs = Observations([0.0, 0.5, 1.0], [[1.0, np.nan], [2.5, 3.0], [np.nan, np.nan]])
    path = tmp_path / "obs.csv"
    text = obs.to_csv(path)
    assert text.splitlines()[0] == "t,x1,x2"
    assert text.splitlines()[1] == "0.0,1.0,"
    back = Observations.from_csv(path)
    np.testing.assert_array_equal(back.mask, obs.mask)
    np.testing.assert_array_equal(back.values[back.mask], obs.values[obs.mask])
    with pytest.raises(ValueError):
        Observations.from_csv("time,x1\n0,1\n")


def test_full_data_touches_every_row_once():
    lib = build_polynomial_library(2, 1)
    t = np.linspace(0, 1, 6)
    obs = Observations(t, np.ones((6, 2)))
    grid = build_grid(t, 1, 2)
    obj = HybridObjective(grid.times, grid.data_index, obs, lib, np.ones((2, 2), bool), [], LossWeights(1.0))
    assert sorted(obj.data_flat.tolist()) == list(range(12))
