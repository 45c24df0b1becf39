"""Sparse symmetric positive-definite factorisation for bordered band matrices.

The hybrid-loss Hessian has a banded state block and a short dense border
of parameters.  Ordering states first (optionally after reverse
Cuthill-McKee) and the border last keeps the Cholesky factor inside the
band plus the border rows, so the factorisation is a banded Cholesky of
the leading block followed by a dense Cholesky of the Schur complement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.lapack import dtbtrs as tbtrs
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


def _bandwidth(rows, cols) -> int:
    return int(np.max(np.abs(rows - cols), initial=0))


class BlockHessian:
    """Symmetric matrix ``[[S, B], [B.T, C]]`` with sparse ``S`` and dense ``B``, ``C``.

    Keeps the dense state/parameter strip out of sparse storage; supports
    ``@`` with vectors, ``tocsr`` and ``toarray``.  ``S`` may be given as a
    sparse matrix or as ``(rows, cols, vals)`` triplets with unique index
    pairs; the triplet form skips sparse conversions in the factorisation.
    """

    def __init__(self, state, strip, params):
        self.strip = np.asarray(strip, float)
        self.params = np.asarray(params, float)
        ns, P = self.strip.shape
        if isinstance(state, tuple):
            self.triplets = tuple(np.asarray(a) for a in state)
            self._state = None
        else:
            self._state = sp.csr_matrix(state)
            A = self._state.tocoo()
            self.triplets = (A.row, A.col, A.data)
            if self._state.shape != (ns, ns):
                raise ValueError("inconsistent block shapes")
        self.n_states = ns
        if self.params.shape != (P, P):
            raise ValueError("inconsistent block shapes")
        self.shape = (ns + P, ns + P)

    @property
    def state(self):
        if self._state is None:
            r, c, v = self.triplets
            self._state = sp.csr_matrix((v, (r, c)), shape=(self.n_states, self.n_states))
        return self._state

    @property
    def border(self) -> int:
        return self.params.shape[0]

    def __matmul__(self, v):
        v = np.asarray(v, float)
        ns = self.n_states
        r, c, vals = self.triplets
        top = np.bincount(r, weights=vals * v[c], minlength=ns) + self.strip @ v[ns:]
        bottom = self.strip.T @ v[:ns] + self.params @ v[ns:]
        return np.concatenate([top, bottom])

    def tocsr(self):
        return sp.bmat([[self.state, sp.csr_matrix(self.strip)],
                        [sp.csr_matrix(self.strip.T), sp.csr_matrix(self.params)]], format="csr")

    def toarray(self):
        return self.tocsr().toarray()


@dataclass
class _BandLayout:
    perm: np.ndarray
    inv: np.ndarray
    keep: np.ndarray     # entries of the lower triangle of the leading block
    pos: tuple           # their (diagonal offset, column) in band storage
    bw: int


# band layouts keyed by the identity of the index arrays (reused across
# Hessians of one sparsity structure)
_LAYOUT_CACHE: dict = {}


def _band_layout(r, c, nb: int, reorder: bool) -> _BandLayout:
    lead = (r < nb) & (c < nb)
    lr, lc = r[lead], c[lead]
    perm = np.arange(nb)
    if reorder and nb > 2:
        bw0 = _bandwidth(lr, lc)
        if bw0 > 1:
            cand = reverse_cuthill_mckee(sp.csr_matrix((np.ones(lr.size), (lr, lc)), shape=(nb, nb)),
                                         symmetric_mode=True)
            inv = np.empty(nb, dtype=int)
            inv[cand] = np.arange(nb)
            if _bandwidth(inv[lr], inv[lc]) < bw0:
                perm = cand
    inv = np.empty(nb, dtype=int)
    inv[perm] = np.arange(nb)
    pr, pc = inv[lr], inv[lc]
    low = pr >= pc
    keep = np.flatnonzero(lead)[low]
    pr, pc = pr[low], pc[low]
    return _BandLayout(perm, inv, keep, (pr - pc, pc), _bandwidth(pr, pc))


def _cached_layout(r, c, nb, reorder):
    key = (id(r), id(c), nb, reorder)
    hit = _LAYOUT_CACHE.get(key)
    if hit is not None and hit[0] is r and hit[1] is c:
        return hit[2]
    lay = _band_layout(r, c, nb, reorder)
    if len(_LAYOUT_CACHE) > 64:
        _LAYOUT_CACHE.clear()
    _LAYOUT_CACHE[key] = (r, c, lay)
    return lay


class BorderedMatrix:
    """Band/border split of a symmetric matrix, ready for repeated shifted factorisations.

    Parameters
    ----------
    A : sparse or dense (N, N)
        Symmetric matrix; only its lower triangle is used in the band.
    border : int
        Number of trailing rows/columns treated as dense.
    reorder : bool
        Apply reverse Cuthill-McKee to the leading block when it reduces the
        bandwidth.
    """

    def __init__(self, A, border: int = 0, reorder: bool = True):
        blocks = None
        if isinstance(A, BlockHessian):
            if border not in (0, A.border):
                raise ValueError("border must match the dense block")
            blocks, border = A, A.border
            r, c, v = A.triplets
            N = A.shape[0]
            nb = A.n_states
            lay = _cached_layout(r, c, nb, reorder)
        else:
            A = sp.coo_matrix(A)
            r, c, v = A.row, A.col, A.data
            N = A.shape[0]
            nb = N - int(border)
            if nb < 0:
                raise ValueError("border larger than matrix")
            lay = _band_layout(r, c, nb, reorder)
        self.N, self.nb, self.border = N, nb, N - nb
        self.perm = lay.perm
        self.ab = np.zeros((lay.bw + 1, nb))
        np.add.at(self.ab, lay.pos, v[lay.keep])
        if blocks is not None:
            self.B, self.C = blocks.strip[lay.perm], blocks.params
        elif self.border:
            inv = lay.inv
            B = np.zeros((nb, self.border))
            C = np.zeros((self.border, self.border))
            m = (r < nb) & (c >= nb)
            np.add.at(B, (inv[r[m]], c[m] - nb), v[m])
            m = (r >= nb) & (c >= nb)
            np.add.at(C, (r[m] - nb, c[m] - nb), v[m])
            self.B, self.C = B, C

    def factor(self, shift: float = 0.0) -> BorderedCholesky:
        """Cholesky factor of ``A + shift * I``."""
        return BorderedCholesky(self, shift=shift)


class BorderedCholesky:
    """Cholesky factorisation of a symmetric matrix with a dense trailing border.

    Accepts a matrix (sparse or dense) or a prepared :class:`BorderedMatrix`;
    ``shift`` is added to the diagonal before factorising.

    Raises
    ------
    NotPositiveDefinite
        If the matrix is not numerically positive definite.
    """

    def __init__(self, A, border: int = 0, reorder: bool = True, shift: float = 0.0):
        M = A if isinstance(A, BorderedMatrix) else BorderedMatrix(A, border, reorder)
        self.N, self.nb, self.border, self.perm = M.N, M.nb, M.border, M.perm
        ab = M.ab.copy()
        if shift:
            ab[0] += shift
        if not np.all(np.isfinite(ab)):
            raise NotPositiveDefinite("non-finite matrix entries")
        try:
            self.L = sla.cholesky_banded(ab, lower=True) if self.nb else ab
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        if self.border:
            B = M.B
            C = M.C + shift * np.eye(self.border) if shift else M.C
            # Z = L^-1 B needs one triangular band solve instead of two
            self.Z = self._tri(B) if self.nb else np.zeros((0, self.border))
            S = C - self.Z.T @ self.Z
            try:
                self.S = sla.cho_factor(S, lower=True, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NotPositiveDefinite(str(exc)) from exc

    def _tri(self, b, trans="N"):
        x, info = tbtrs(self.L, b, uplo="L", trans=trans)
        if info != 0:
            raise NotPositiveDefinite("singular band factor")
        return x

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, float)
        b1 = b[:self.nb][self.perm]
        w = self._tri(b1[:, None])[:, 0] if self.nb else b1
        if self.border:
            x2 = sla.cho_solve(self.S, b[self.nb:] - self.Z.T @ w)
            w = w - self.Z @ x2
        else:
            x2 = np.zeros(0)
        x1 = self._tri(w[:, None], "T")[:, 0] if self.nb else w
        out = np.empty(self.N)
        out[self.perm] = x1
        out[self.nb:] = x2
        return out


def spd_solve(A, b, border: int = 0) -> np.ndarray:
    return BorderedCholesky(A, border).solve(b)
