import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hybrid_discovery.curvature import (assemble_hessian, check_star_coloring, derive_pattern,
                                        hessian_vector_product, star_coloring, write_pattern_edges)
from hybrid_discovery.discrete import HybridObjective, LossWeights, Observations
from hybrid_discovery.library import build_polynomial_library, normalize_library


def _objective(seed, n=8, d=2, degree=3, exp=True, missing=True):
    rng = np.random.default_rng(seed)
    lib = build_polynomial_library(d, degree, True, [0] if exp else [])
    t = np.sort(rng.uniform(0, 1, n))
    obs = Observations(t, rng.normal(size=(n, d)))
    if missing:
        obs.mask[n // 2, d - 1] = False
    lib = normalize_library(lib, rng.normal(size=(n, d)), [0.3] if exp else [])
    mask = rng.uniform(size=(d, lib.n_terms)) < 0.7
    obj = HybridObjective(t, np.arange(n), obs, lib, mask, [0.3] if exp else [], LossWeights(2.0, 0.5, 0.3))
    return obj, rng.normal(size=obj.size)


def _fd_hessian(obj, x, h=1e-6):
    E = np.eye(obj.size)
    return np.array([(obj.gradient(x + h * e) - obj.gradient(x - h * e)) / (2 * h) for e in E])


def test_pattern_of_tiny_grid():
    p = derive_pattern(2, 1)
    assert p.neighbors == ((1,), (0,))
    assert p.dimension == 2
    p = derive_pattern(3, 2, num_inner_params=1)
    assert p.n_states == 6 and p.dimension == 7
    # state 0 couples to the other component at t0 and both at t1, not to t2
    assert set(p.neighbors[0]) == {1, 2, 3}
    with pytest.raises(ValueError):
        derive_pattern(1, 2)


def test_pattern_symmetric_and_covers_true_hessian():
    obj, x = _objective(0)
    H = _fd_hessian(obj, x)
    p = derive_pattern(obj.n, obj.d, obj.mask, obj.live_inner.size, obj.lib)
    M = p.dense_mask()
    assert np.array_equal(M, M.T)
    assert np.all(np.abs(H[~M]) < 1e-6)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_star_coloring_valid(d):
    p = derive_pattern(12, d)
    c = star_coloring(p)
    assert check_star_coloring(p, c)


def test_color_count_independent_of_grid_length():
    counts = []
    for n in (50, 500, 5000):
        p = derive_pattern(n, 3)
        c = star_coloring(p)
        assert check_star_coloring(p, c, max_paths=2000, rng=0)
        counts.append(c.num_colors)
    assert counts[0] == counts[1] == counts[2]
    assert counts[0] <= 3 * 3


def test_invalid_coloring_detected():
    p = derive_pattern(6, 1)   # a path graph
    from hybrid_discovery.curvature import Coloring
    assert not check_star_coloring(p, Coloring(np.zeros(6, int), 1))
    # proper 2-colouring of a path is not a star colouring
    assert not check_star_coloring(p, Coloring(np.arange(6) % 2, 2))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 3), exp=st.booleans())
def test_assembled_hessian_matches_finite_differences(seed, d, exp):
    obj, x = _objective(seed, n=6, d=d, degree=2, exp=exp)
    Hfd = _fd_hessian(obj, x)
    H = obj.hessian(x)
    assert sp.issparse(H)
    Hd = H.toarray()
    np.testing.assert_allclose(Hd, Hd.T, atol=0, rtol=0)
    assert np.linalg.norm(Hd - Hfd) <= 1e-6 * max(np.linalg.norm(Hfd), 1.0)
    blk = obj.hessian_blocks(x)
    np.testing.assert_allclose(blk.toarray(), Hd, rtol=1e-14, atol=1e-14)
    v = np.random.default_rng(seed).normal(size=obj.size)
    np.testing.assert_allclose(blk @ v, Hd @ v, rtol=1e-12, atol=1e-12)


def test_assembly_uses_one_hvp_per_color():
    obj, x = _objective(2, n=30)
    p = derive_pattern(obj.n, obj.d, obj.mask, obj.live_inner.size, obj.lib)
    c = star_coloring(p)
    calls = []
    orig = obj.hvp

    def counted(pt, V):
        calls.append(np.asarray(V).shape)
        return orig(pt, V)
    obj.hvp = counted
    H, k = assemble_hessian(obj, x, p, c, return_count=True)
    assert k == c.num_colors == calls[0][1]
    assert len(calls) == 1


def test_complex_step_hvp_for_plain_gradient():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])

    def grad(z):
        return A @ z + z ** 3
    x = np.array([0.5, -1.0])
    v = np.array([1.0, 2.0])
    exact = (A + np.diag(3 * x ** 2)) @ v
    np.testing.assert_allclose(hessian_vector_product(grad, x, v), exact, rtol=1e-14)
    with pytest.raises(ValueError):
        hessian_vector_product(grad, [np.nan, 0.0], v)


def test_edge_dump(tmp_path):
    p = derive_pattern(4, 1)
    c = star_coloring(p)
    path = tmp_path / "edges.txt"
    write_pattern_edges(path, p, c)
    lines = path.read_text().splitlines()
    edges = [l for l in lines if not l.startswith("#")]
    assert edges == ["0 1", "1 2", "2 3"]
    assert sum(l.startswith("# ") and len(l.split()) == 3 for l in lines) == 4
