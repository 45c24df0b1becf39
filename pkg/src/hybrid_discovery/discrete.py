"""Midpoint collocation of the state trajectory and the hybrid loss.

The optimisation variables are the states ``u`` on a computational grid
(every observation time is a grid node), the active linear coefficients
and the inner parameters of active nonlinear terms.  The loss is

    (1/n) sum_i |N_{i+1/2}|^2 + (lam/n_hat) sum_D (uhat - u)^2
        + (R/k) sum_active (1 - exp(-theta^2 / (2 eps^2)))

with ``N_{i+1/2} = (u_{i+1} - u_i)/dt_i - f((u_i + u_{i+1})/2)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .library import CandidateLibrary, CoefficientState, evaluate_terms, term_jacobian_hessian


@dataclass
class Observations:
    """Sampled times, values and a per-entry availability mask.

    Missing entries are stored as NaN in ``values`` and False in ``mask``.
    """

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.array(self.values, dtype=float, ndmin=2)
        if self.values.shape[0] != self.times.size:
            raise ValueError("one row of values per observation time required")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool) & np.isfinite(self.values)
        self.values = np.where(self.mask, self.values, np.nan)

    @property
    def state_dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_hat(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask) -> Observations:
        return Observations(self.times, self.values, np.asarray(mask, bool) & self.mask)

    def to_csv(self, path=None, names=None) -> str:
        names = names or [f"x{j + 1}" for j in range(self.state_dim)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *names])
        for t, row, ok in zip(self.times, self.values, self.mask):
            w.writerow([repr(float(t))] + [repr(float(v)) if o else "" for v, o in zip(row, ok)])
        text = buf.getvalue()
        if path is not None:
            from .io import atomic_write
            atomic_write(path, text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> Observations:
        if isinstance(path_or_text, str) and "\n" in path_or_text:
            rows = list(csv.reader(io.StringIO(path_or_text)))
        else:
            with open(path_or_text, newline="") as fh:
                rows = list(csv.reader(fh))
        header, body = rows[0], [r for r in rows[1:] if r]
        if not header or header[0].strip() != "t":
            raise ValueError("first CSV column must be 't'")
        d = len(header) - 1
        if d < 1:
            raise ValueError("CSV has no state columns")
        times = np.empty(len(body))
        vals = np.full((len(body), d), np.nan)
        for i, r in enumerate(body):
            if len(r) != d + 1:
                raise ValueError(f"row {i + 2} has {len(r)} columns, expected {d + 1}")
            times[i] = float(r[0])
            for j, cell in enumerate(r[1:]):
                if cell.strip():
                    vals[i, j] = float(cell)
        return cls(times, vals)


@dataclass
class StateGrid:
    times: np.ndarray
    values: np.ndarray
    data_index: np.ndarray

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def to_csv(self, path=None, names=None) -> str:
        obs = Observations(self.times, self.values)
        return obs.to_csv(path, names)


@dataclass(frozen=True)
class LossWeights:
    lam: float
    R: float = 0.0
    epsilon: float = 0.01

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.R >= 0:
            raise ValueError("R must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class LossParts(NamedTuple):
    total: float
    model_err: float
    data_err: float
    penalty: float


def build_grid(observation_times, refinement_factor: int = 1, state_dim: int = 1) -> StateGrid:
    """Observation times with every interval split into ``refinement_factor`` parts."""
    t = np.asarray(observation_times, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("need at least two observation times")
    if not np.all(np.diff(t) > 0):
        raise ValueError("observation times must be strictly increasing")
    r = int(refinement_factor)
    if r < 1:
        raise ValueError("refinement factor must be >= 1")
    frac = np.arange(r) / r
    inner = (t[:-1, None] + frac[None, :] * np.diff(t)[:, None]).ravel()
    times = np.append(inner, t[-1])
    index = np.arange(t.size) * r
    return StateGrid(times, np.zeros((times.size, state_dim)), index)


def _masked_f(lib, coeffs, m):
    vals = evaluate_terms(lib, m, coeffs.inner)
    return vals @ np.where(coeffs.mask, coeffs.theta, 0.0).T


def midpoint_residuals(grid: StateGrid, lib: CandidateLibrary, coeffs: CoefficientState) -> np.ndarray:
    u = grid.values
    m = 0.5 * (u[1:] + u[:-1])
    return (u[1:] - u[:-1]) / grid.dt[:, None] - _masked_f(lib, coeffs, m)


def midpoint_residual(grid: StateGrid, lib: CandidateLibrary, coeffs: CoefficientState, i: int) -> np.ndarray:
    if not 0 <= i < grid.n - 1:
        raise IndexError(f"interval {i} outside 0..{grid.n - 2}")
    u0, u1 = grid.values[i], grid.values[i + 1]
    dt = grid.times[i + 1] - grid.times[i]
    return (u1 - u0) / dt - _masked_f(lib, coeffs, 0.5 * (u0 + u1)[None, :])[0]


def smooth_l0(coeffs, epsilon: float) -> float:
    """Smooth count of nonzero active coefficients.

    Accepts a :class:`CoefficientState` (masked entries skipped) or a plain array.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    th = coeffs.theta[coeffs.mask] if isinstance(coeffs, CoefficientState) else np.ravel(coeffs)
    return float(np.sum(-np.expm1(-th ** 2 / (2.0 * epsilon ** 2))))


def _check(grid, obs, lib):
    if obs.state_dim != lib.state_dim or grid.values.shape[1] != lib.state_dim:
        raise ValueError("state dimension mismatch between grid, data and library")
    if grid.data_index.size != obs.times.size:
        raise ValueError("grid data index does not match observations")
    if not np.allclose(grid.times[grid.data_index], obs.times):
        raise ValueError("observation times are not grid nodes")


def loss(grid: StateGrid, obs: Observations, lib: CandidateLibrary, coeffs: CoefficientState,
         weights: LossWeights) -> LossParts:
    _check(grid, obs, lib)
    r = midpoint_residuals(grid, lib, coeffs)
    model = float(np.sum(r ** 2)) / grid.n
    e = (obs.values - grid.values[grid.data_index])[obs.mask]
    data = weights.lam * float(np.sum(e ** 2)) / max(obs.n_hat, 1)
    k = coeffs.n_active
    pen = weights.R * smooth_l0(coeffs, weights.epsilon) / k if k else 0.0
    return LossParts(model + data + pen, model, data, pen)


def unnormalized_fit(grid: StateGrid, obs: Observations, lib: CandidateLibrary, coeffs: CoefficientState,
                     lam: float) -> float:
    """``sum |N|^2 + lam * sum_D (uhat - u)^2`` without the 1/n, 1/n_hat factors."""
    _check(grid, obs, lib)
    r = midpoint_residuals(grid, lib, coeffs)
    e = (obs.values - grid.values[grid.data_index])[obs.mask]
    return float(np.sum(r ** 2) + lam * np.sum(e ** 2))


class HybridObjective:
    """Hybrid loss as a function of one flat vector of unknowns.

    Layout of ``x``: grid states (row-major, n*d), active coefficients
    (row-major order of ``mask``), then the inner parameters referenced by
    at least one active term.  Coefficients are against the scaled library.

    Parameters
    ----------
    times : array (n,)
        Grid times.
    data_index : array (m,)
        Grid row of each observation.
    obs : Observations
        Data; only entries with ``obs.mask`` enter the data term.
    lib : CandidateLibrary
    mask : bool array (d, p)
        Active terms.
    inner : array
        Values of inner parameters (used for those not optimised).
    weights : LossWeights
    penalized : bool
        Include the smooth-l0 penalty (False gives the two-term loss).
    """

    def __init__(self, times, data_index, obs: Observations, lib: CandidateLibrary, mask, inner,
                 weights: LossWeights, penalized: bool = True):
        self.times = np.asarray(times, float)
        self.dt = np.diff(self.times)
        self.n = self.times.size
        self.d = lib.state_dim
        self.lib = lib
        self.mask = np.asarray(mask, bool).copy()
        self.inner_base = np.asarray(inner, float).copy()
        self.weights = weights
        self.penalized = penalized and weights.R > 0
        rows, cols = np.nonzero(self.mask)
        self.act_rows, self.act_cols = rows, cols
        self.n_active = rows.size
        live = sorted({lib.terms[k].inner for k in set(cols.tolist()) if lib.terms[k].kind == "exp"})
        self.live_inner = np.array(live, dtype=int)
        self.n_states = self.n * self.d
        self.n_params = self.n_active + self.live_inner.size
        self.size = self.n_states + self.n_params

        data_index = np.asarray(data_index, int)
        r_idx, c_idx = np.nonzero(obs.mask)
        self.data_flat = data_index[r_idx] * self.d + c_idx
        self.data_vals = obs.values[r_idx, c_idx]
        self.n_hat = max(self.data_flat.size, 1)
        self.lam = weights.lam
        self._cache_x = None
        self._cache = None
        self.pattern = None
        self.coloring = None

    # packing ---------------------------------------------------------------
    def pack(self, u, coeffs: CoefficientState) -> np.ndarray:
        th = coeffs.theta[self.act_rows, self.act_cols]
        return np.concatenate([np.asarray(u, float).ravel(), th, coeffs.inner[self.live_inner]])

    def unpack(self, x):
        u = x[:self.n_states].reshape(self.n, self.d)
        theta = np.zeros(self.mask.shape)
        theta[self.act_rows, self.act_cols] = x[self.n_states:self.n_states + self.n_active]
        inner = self.inner_base.copy()
        inner[self.live_inner] = x[self.n_states + self.n_active:]
        return u.copy(), CoefficientState(theta, self.mask, inner, True)

    # core evaluation -------------------------------------------------------
    def _split(self, x):
        u = x[:self.n_states].reshape(self.n, self.d)
        th = x[self.n_states:self.n_states + self.n_active]
        Theta = np.zeros(self.mask.shape)
        Theta[self.act_rows, self.act_cols] = th
        inner = self.inner_base.copy()
        inner[self.live_inner] = x[self.n_states + self.n_active:]
        return u, th, Theta, inner

    def _residual(self, x):
        u, th, Theta, inner = self._split(x)
        m = 0.5 * (u[1:] + u[:-1])
        vals = evaluate_terms(self.lib, m, inner)
        r = (u[1:] - u[:-1]) / self.dt[:, None] - vals @ Theta.T
        return u, th, r

    def _penalty(self, th):
        if not self.penalized or th.size == 0:
            return 0.0, None, None
        eps2 = self.weights.epsilon ** 2
        c = self.weights.R / th.size
        ex = np.exp(-th ** 2 / (2 * eps2))
        val = c * float(np.sum(-np.expm1(-th ** 2 / (2 * eps2))))
        grad = c * th / eps2 * ex
        hdiag = c * ex * (1.0 / eps2 - th ** 2 / eps2 ** 2)
        return val, grad, hdiag

    def parts(self, x) -> LossParts:
        u, th, r = self._residual(x)
        model = float(np.sum(r ** 2)) / self.n
        e = u.ravel()[self.data_flat] - self.data_vals
        data = self.lam * float(e @ e) / self.n_hat
        pen = self._penalty(th)[0]
        return LossParts(model + data + pen, model, data, pen)

    def value(self, x) -> float:
        return self.parts(x).total

    def unnormalized_fit(self, x) -> float:
        u, th, r = self._residual(x)
        e = u.ravel()[self.data_flat] - self.data_vals
        return float(np.sum(r ** 2) + self.lam * (e @ e))

    def _prepare(self, x):
        if self._cache_x is not None and np.array_equal(x, self._cache_x):
            return self._cache
        u, th, Theta, inner = self._split(x)
        m = 0.5 * (u[1:] + u[:-1])
        T = term_jacobian_hessian(self.lib, m, inner, order=2)
        dt = self.dt[:, None]
        r = (u[1:] - u[:-1]) / dt - T.values @ Theta.T
        w = (2.0 / self.n) * r
        DF = np.einsum("ck,ika->ica", Theta, T.dx)
        # Jacobian of f with respect to the parameter block
        nI = self.n - 1
        A = self.n_active
        Fp = np.zeros((nI, self.d, self.n_params))
        Fp[:, self.act_rows, np.arange(A)] = T.values[:, self.act_cols]
        wTheta = w @ Theta  # (nI, p)
        Wmm = np.einsum("ik,ikab->iab", wTheta, T.dxx)
        Wmp = np.zeros((nI, self.d, self.n_params))
        Wmp[:, :, :A] = (w[:, self.act_rows][:, None, :] * T.dx[:, self.act_cols, :].transpose(0, 2, 1))
        Wpp = np.zeros((self.n_params, self.n_params))
        for li, l in enumerate(self.live_inner):
            col = A + li
            Fp[:, :, col] = np.einsum("ck,ik->ic", Theta, T.da[:, :, l])
            Wmp[:, :, col] = np.einsum("ik,ika->ia", wTheta, T.dxa[:, :, :, l])
            # coefficient / rate cross terms
            cross = np.sum(w[:, self.act_rows] * T.da[:, self.act_cols, l], axis=0)
            Wpp[:A, col] += cross
            Wpp[col, :A] += cross
            for lj, l2 in enumerate(self.live_inner):
                Wpp[col, A + lj] += np.sum(wTheta * T.daa[:, :, l, l2])
        self._cache_x = x.copy()
        self._cache = dict(u=u, th=th, r=r, w=w, DF=DF, Fp=Fp, Wmm=Wmm, Wmp=Wmp, Wpp=Wpp)
        return self._cache

    def gradient(self, x) -> np.ndarray:
        C = self._prepare(x)
        w, DF, Fp = C["w"], C["DF"], C["Fp"]
        dt = self.dt[:, None]
        wDF = np.einsum("ic,ica->ia", w, DF)
        gu = np.zeros((self.n, self.d))
        gu[:-1] += -w / dt - 0.5 * wDF
        gu[1:] += w / dt - 0.5 * wDF
        gu = gu.ravel()
        e = C["u"].ravel()[self.data_flat] - self.data_vals
        np.add.at(gu, self.data_flat, 2.0 * self.lam / self.n_hat * e)
        gp = -(w.ravel() @ Fp.reshape((self.n - 1) * self.d, self.n_params))
        pg = self._penalty(C["th"])[1]
        if pg is not None:
            gp[:self.n_active] += pg
        return np.concatenate([gu, gp])

    def hvp(self, x, V) -> np.ndarray:
        """Exact Hessian-vector products; ``V`` may hold several columns."""
        V = np.asarray(V, float)
        single = V.ndim == 1
        V2 = V[:, None] if single else V
        if not np.all(np.isfinite(V2)):
            raise ValueError("non-finite direction")
        C = self._prepare(x)
        DF, Fp, Wmm, Wmp, Wpp = C["DF"], C["Fp"], C["Wmm"], C["Wmp"], C["Wpp"]
        S = V2.shape[1]
        vu = V2[:self.n_states].reshape(self.n, self.d, S)
        vp = V2[self.n_states:]
        dt = self.dt[:, None, None]
        q = 0.5 * (vu[1:] + vu[:-1])
        dr = (vu[1:] - vu[:-1]) / dt - np.einsum("ica,ias->ics", DF, q) - (Fp @ vp)
        c2 = 2.0 / self.n
        DFt_dr = np.einsum("ica,ics->ias", DF, dr)
        sm = -(np.einsum("iab,ibs->ias", Wmm, q) + (Wmp @ vp))
        out_u = np.zeros((self.n, self.d, S))
        out_u[:-1] += c2 * (-dr / dt - 0.5 * DFt_dr) + 0.5 * sm
        out_u[1:] += c2 * (dr / dt - 0.5 * DFt_dr) + 0.5 * sm
        out_u = out_u.reshape(self.n_states, S)
        out_u[self.data_flat] += 2.0 * self.lam / self.n_hat * V2[self.data_flat]
        out_p = -c2 * (Fp.reshape((self.n - 1) * self.d, self.n_params).T @ dr.reshape(-1, S))
        out_p -= (Wmp.reshape((self.n - 1) * self.d, self.n_params).T @ q.reshape(-1, S)) + Wpp @ vp
        ph = self._penalty(C["th"])[2]
        if ph is not None:
            out_p[:self.n_active] += ph[:, None] * vp[:self.n_active]
        out = np.vstack([out_u, out_p])
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite Hessian-vector product")
        return out[:, 0] if single else out

    def parameter_blocks(self, x):
        """Dense state-parameter strip (n*d, P) and parameter block (P, P)."""
        C = self._prepare(x)
        DF, Fp, Wmp, Wpp = C["DF"], C["Fp"], C["Wmp"], C["Wpp"]
        c2 = 2.0 / self.n
        dt = self.dt[:, None, None]
        DFtFp = np.matmul(DF.transpose(0, 2, 1), Fp)
        strip = np.zeros((self.n, self.d, self.n_params))
        strip[:-1] += c2 * (Fp / dt + 0.5 * DFtFp) - 0.5 * Wmp
        strip[1:] += c2 * (-Fp / dt + 0.5 * DFtFp) - 0.5 * Wmp
        Fp2 = Fp.reshape((self.n - 1) * self.d, self.n_params)
        Hpp = c2 * (Fp2.T @ Fp2) - Wpp
        ph = self._penalty(C["th"])[2]
        if ph is not None:
            Hpp[np.arange(self.n_active), np.arange(self.n_active)] += ph
        return strip.reshape(self.n_states, self.n_params), 0.5 * (Hpp + Hpp.T)

    def hessian(self, x, blocks: bool = False):
        """Exact Hessian as CSR, or as a :class:`BlockHessian` with ``blocks=True``."""
        from .curvature import assemble_hessian, cached_structure
        if self.pattern is None:
            self.pattern, self.coloring = cached_structure(self.n, self.d, self.mask, self.live_inner.size,
                                                           self.lib)
        return assemble_hessian(self, x, self.pattern, self.coloring, blocks=blocks)

    def hessian_blocks(self, x):
        return self.hessian(x, blocks=True)

    @property
    def border(self) -> int:
        """Number of trailing dense variables (parameters) in the Hessian."""
        return self.n_params
