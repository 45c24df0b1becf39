"""Sparse Hessian assembly from coloured Hessian-vector products.

The state-state block of the hybrid loss only couples grid values inside
one collocation interval, so it is banded in time.  A star colouring of
that graph lets every entry be read off from one HVP per colour.  The
parameter rows and columns are dense and are evaluated directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import BlockHessian


@dataclass(frozen=True)
class SparsityPattern:
    """Structural nonzeros of the Hessian.

    ``neighbors[v]`` lists the state variables coupled to state ``v``
    (excluding ``v``).  The ``n_params`` trailing variables form a dense
    strip against all states plus a dense parameter block.
    """

    n_grid: int
    state_dim: int
    n_params: int
    neighbors: tuple

    @property
    def n_states(self) -> int:
        return self.n_grid * self.state_dim

    @property
    def dimension(self) -> int:
        return self.n_states + self.n_params

    def state_edges(self):
        rows, cols = [], []
        for v, nb in enumerate(self.neighbors):
            rows.extend([v] * len(nb))
            cols.extend(nb)
        return np.array(rows, dtype=int), np.array(cols, dtype=int)

    def dense_mask(self) -> np.ndarray:
        """Boolean (dimension x dimension) mask; meant for small problems."""
        N = self.dimension
        M = np.zeros((N, N), bool)
        r, c = self.state_edges()
        M[r, c] = True
        ns = self.n_states
        M[np.arange(ns), np.arange(ns)] = True
        M[:ns, ns:] = True
        M[ns:, :] = True
        return M


@dataclass(frozen=True)
class Coloring:
    colors: np.ndarray
    num_colors: int

    def seeds(self, n_total: int | None = None) -> np.ndarray:
        """Binary seed matrix (n_total x num_colors); parameter rows are zero."""
        n = self.colors.size if n_total is None else n_total
        D = np.zeros((n, self.num_colors))
        D[np.arange(self.colors.size), self.colors] = 1.0
        return D


def _coupling(lib, mask, d):
    """Boolean (d, d) state coupling inside one interval, plus the diagonal."""
    if lib is None:
        return np.ones((d, d), bool)
    mask = np.asarray(mask, bool)
    # dep[c, a]: residual component c depends on state a
    dep = np.eye(d, dtype=bool)
    second = np.eye(d, dtype=bool)
    for k, t in enumerate(lib.terms):
        rows = mask[:, k]
        if not rows.any():
            continue
        vars_ = [a for a in range(d) if t.depends_on(a)]
        for a in vars_:
            dep[rows, a] = True
        for a in vars_:
            for b in vars_:
                second[a, b] = True
    gn = (dep.T.astype(int) @ dep.astype(int)) > 0
    return gn | second


def derive_pattern(n: int, d: int, active_mask=None, num_inner_params: int = 0, lib=None) -> SparsityPattern:
    """Hessian structure of the midpoint-collocation loss.

    States at grid rows ``i`` and ``i+1`` interact through interval ``i``;
    which components interact is read from the active terms of ``lib``
    (all pairs when ``lib`` is omitted).  Only active coefficients and
    live inner parameters appear in the dense border.
    """
    if n < 2:
        raise ValueError("need at least two grid points")
    n_active = 0 if active_mask is None else int(np.asarray(active_mask, bool).sum())
    C = _coupling(lib, active_mask, d)
    nbrs = []
    for i in range(n):
        for a in range(d):
            v = i * d + a
            nb = []
            for di in (-1, 0, 1):
                j = i + di
                if not 0 <= j < n:
                    continue
                for b in range(d):
                    w = j * d + b
                    if w != v and C[a, b]:
                        nb.append(w)
            nbrs.append(tuple(nb))
    return SparsityPattern(n, d, n_active + int(num_inner_params), tuple(nbrs))


_STRUCTURE_CACHE: dict = {}


def cached_structure(n: int, d: int, active_mask=None, num_inner_params: int = 0, lib=None):
    """``(pattern, coloring)`` for a loss structure, reused across identical structures."""
    C = _coupling(lib, active_mask, d)
    n_active = 0 if active_mask is None else int(np.asarray(active_mask, bool).sum())
    key = (n, d, C.tobytes(), n_active + int(num_inner_params))
    hit = _STRUCTURE_CACHE.get(key)
    if hit is None:
        pattern = derive_pattern(n, d, active_mask, num_inner_params, lib)
        hit = (pattern, star_coloring(pattern))
        if len(_STRUCTURE_CACHE) > 64:
            _STRUCTURE_CACHE.clear()
        _STRUCTURE_CACHE[key] = hit
    return hit


def star_coloring(pattern: SparsityPattern) -> Coloring:
    """Greedy star colouring of the state graph in natural (time) order.

    A vertex may not take a colour that would make it equal to a
    neighbour, equal to a distance-two vertex through an uncoloured
    middle, or close a two-coloured path on four vertices.
    """
    nb = pattern.neighbors
    N = len(nb)
    color = np.full(N, -1, dtype=int)
    for v in range(N):
        forbidden = set()
        for w in nb[v]:
            cw = color[w]
            if cw >= 0:
                forbidden.add(cw)
            for x in nb[w]:
                if x == v:
                    continue
                cx = color[x]
                if cx < 0:
                    continue
                if cw < 0:
                    forbidden.add(cx)
                else:
                    # w-x already coloured: a y ~ x sharing w's colour would
                    # give the bicoloured path v-w-x-y
                    for y in nb[x]:
                        if y != w and color[y] == cw:
                            forbidden.add(cx)
                            break
        c = 0
        while c in forbidden:
            c += 1
        color[v] = c
    return Coloring(color, int(color.max()) + 1 if N else 0)


def check_star_coloring(pattern: SparsityPattern, coloring: Coloring, max_paths: int | None = None,
                        rng=None) -> bool:
    """Verify properness and that no 4-vertex path is two-coloured.

    Enumerates every path when ``max_paths`` is None, otherwise checks a
    random sample of paths starting from random vertices.
    """
    nb = pattern.neighbors
    col = coloring.colors
    for v, ns in enumerate(nb):
        for w in ns:
            if col[v] == col[w]:
                return False
    if max_paths is None:
        for a in range(len(nb)):
            for b in nb[a]:
                for c in nb[b]:
                    if c == a:
                        continue
                    for e in nb[c]:
                        if e in (a, b):
                            continue
                        if col[a] == col[c] and col[b] == col[e]:
                            return False
        return True
    rng = np.random.default_rng(rng)
    for _ in range(max_paths):
        a = int(rng.integers(len(nb)))
        if not nb[a]:
            continue
        b = nb[a][rng.integers(len(nb[a]))]
        cs = [c for c in nb[b] if c != a]
        if not cs:
            continue
        c = cs[rng.integers(len(cs))]
        for e in nb[c]:
            if e not in (a, b) and col[a] == col[c] and col[b] == col[e]:
                return False
    return True


def hessian_vector_product(objective, point, v) -> np.ndarray:
    """``H(point) @ v`` for an objective exposing ``hvp``.

    Objectives given as a plain gradient callable are handled by
    complex-step differentiation of the gradient, which is exact to
    rounding for gradients that are analytic in their argument.
    """
    point = np.asarray(point, float)
    v = np.asarray(v, float)
    if not (np.all(np.isfinite(point)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite point or direction")
    if hasattr(objective, "hvp"):
        out = objective.hvp(point, v)
    else:
        h = 1e-30
        out = np.imag(objective(point + 1j * h * v)) / h
    out = np.asarray(out, float)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


@dataclass
class _Recovery:
    rows: np.ndarray
    cols: np.ndarray
    src_rows: np.ndarray
    src_colors: np.ndarray
    transpose: np.ndarray


_RECOVERY_CACHE: dict = {}


def _recovery_plan(pattern: SparsityPattern, coloring: Coloring) -> _Recovery:
    key = (id(pattern), id(coloring))
    plan = _RECOVERY_CACHE.get(key)
    if plan is not None and plan[0] is pattern and plan[1] is coloring:
        return plan[2]
    nb = pattern.neighbors
    col = coloring.colors
    rows, cols, srow, scol = [], [], [], []
    for v in range(len(nb)):
        rows.append(v); cols.append(v); srow.append(v); scol.append(col[v])
        counts = {}
        for w in nb[v]:
            counts[col[w]] = counts.get(col[w], 0) + 1
        for w in nb[v]:
            if counts[col[w]] == 1:
                rows.append(v); cols.append(w); srow.append(v); scol.append(col[w])
            else:
                # fall back to reading (w, v) from the HVP of v's colour
                c2 = sum(1 for y in nb[w] if col[y] == col[v])
                if c2 != 1:
                    raise RuntimeError(f"Hessian entry ({v}, {w}) cannot be recovered from this colouring")
                rows.append(v); cols.append(w); srow.append(w); scol.append(col[v])
    rows, cols, srow, scol = (np.array(a, dtype=int) for a in (rows, cols, srow, scol))
    # position of (w, v) for every (v, w), used to symmetrise the recovered values
    ns = len(nb)
    keys = rows * ns + cols
    order = np.argsort(keys)
    tpos = order[np.searchsorted(keys[order], cols * ns + rows)]
    plan = _Recovery(rows, cols, srow, scol, tpos)
    if len(_RECOVERY_CACHE) > 64:
        _RECOVERY_CACHE.clear()
    _RECOVERY_CACHE[key] = (pattern, coloring, plan)
    return plan


def assemble_hessian(objective, point, pattern: SparsityPattern, coloring: Coloring,
                     return_count: bool = False, blocks: bool = False):
    """Sparse symmetric Hessian from ``num_colors`` HVPs plus the dense border.

    Returns CSR, or a :class:`BlockHessian` when ``blocks`` is set and there
    are parameters.

    ``objective`` must provide ``hvp(x, V)``; when it also provides
    ``parameter_blocks(x)`` the border is filled from there, otherwise the
    border must be empty.
    """
    ns = pattern.n_states
    N = pattern.dimension
    seeds = coloring.seeds(N)
    HV = np.asarray(objective.hvp(point, seeds)).reshape(N, coloring.num_colors)
    plan = _recovery_plan(pattern, coloring)
    vals = HV[plan.src_rows, plan.src_colors]
    vals = 0.5 * (vals + vals[plan.transpose])
    if pattern.n_params:
        strip, Hpp = objective.parameter_blocks(point)
        H = BlockHessian((plan.rows, plan.cols, vals), strip, Hpp)
        if not blocks:
            H = H.tocsr()
    else:
        H = sp.csr_matrix((vals, (plan.rows, plan.cols)), shape=(ns, ns))
    if return_count:
        return H, coloring.num_colors
    return H


def write_pattern_edges(path, pattern: SparsityPattern, coloring: Coloring | None = None) -> None:
    """Edge list ``u v`` of the state graph, preceded by ``# vertex color`` lines."""
    from .io import atomic_write
    lines = [f"# n_grid={pattern.n_grid} state_dim={pattern.state_dim} n_params={pattern.n_params}"]
    if coloring is not None:
        lines += [f"# {v} {c}" for v, c in enumerate(coloring.colors)]
    for v, nb in enumerate(pattern.neighbors):
        lines += [f"{v} {w}" for w in nb if w > v]
    atomic_write(path, "\n".join(lines) + "\n")
