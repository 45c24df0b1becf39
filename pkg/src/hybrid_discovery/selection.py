"""Information-criterion model selection by adaptive term pruning.

:func:`select_model` alternates two fits per candidate mask, one with and
one without the smooth-l0 penalty.  The unpenalised fit is scored with BIC;
the penalised coefficients decide which terms to prune next.  Blocks of
``k0`` terms are removed while BIC improves, then single terms, and when
the first single-term prune fails, terms from the last accepted block are
restored one at a time.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .discrete import HybridObjective, LossWeights, Observations, StateGrid
from .io import read_csv_dicts, write_csv
from .library import CandidateLibrary, CoefficientState
from .lm import LMConfig, LMFailure, minimize

logger = logging.getLogger(__name__)

_FIT_FLOOR = 1e-300


def bic(n_params: int, fit: float, n_hat: int) -> float:
    """``ln(n_hat) * n_params + n_hat * ln(fit)``."""
    if n_hat < 1:
        raise ValueError("n_hat must be >= 1")
    if not fit > 0:
        if fit == 0:
            logger.warning("perfect fit; flooring at %g", _FIT_FLOOR)
            fit = _FIT_FLOOR
        else:
            raise ValueError(f"fit must be positive, got {fit}")
    return math.log(n_hat) * n_params + n_hat * math.log(fit)


def aic(n_params: int, fit: float, n_hat: int) -> float:
    """Akaike analogue: ``2 * n_params + n_hat * ln(fit)``."""
    if n_hat < 1:
        raise ValueError("n_hat must be >= 1")
    if not fit > 0:
        if fit == 0:
            fit = _FIT_FLOOR
        else:
            raise ValueError(f"fit must be positive, got {fit}")
    return 2.0 * n_params + n_hat * math.log(fit)


CRITERIA = {"bic": bic, "aic": aic}


def selection_bound(p: int, k0: int) -> int:
    """Maximum number of candidate fits visited by :func:`select_model`."""
    return math.ceil(p / k0) + k0 + 1


@dataclass
class SelectionRecord:
    iteration: int
    mode: str
    k: int
    mask: np.ndarray
    n_params: int
    score: float
    fit: float
    accepted: bool
    lm_iters: tuple = (0, 0)
    # every accepted LM step of both fits lowered the objective
    lm_monotone: bool = True


@dataclass
class SelectionTrace:
    records: list = field(default_factory=list)
    termination: str = ""

    @property
    def iterations(self) -> int:
        return len(self.records)

    def best_scores(self) -> list:
        out, best = [], math.inf
        for r in self.records:
            if r.accepted:
                best = min(best, r.score)
                out.append(best)
        return out

    def rows(self):
        for r in self.records:
            yield (r.iteration, r.mode, r.k, r.n_params, repr(r.score), repr(r.fit), int(r.accepted),
                   "".join("1" if b else "0" for b in r.mask.ravel()), r.lm_iters[0], r.lm_iters[1])

    def to_csv(self, path):
        write_csv(path, ["iteration", "mode", "k", "n_params", "score", "fit", "accepted", "mask",
                         "lm_iters_unpenalized", "lm_iters_penalized"], list(self.rows()))


@dataclass
class SelectionResult:
    u: np.ndarray
    coeffs: CoefficientState
    score: float
    fit: float
    trace: SelectionTrace
    n_hat: int

    @property
    def mask(self) -> np.ndarray:
        return self.coeffs.mask


@dataclass
class _Candidate:
    u: np.ndarray
    coeffs: CoefficientState
    pen_coeffs: CoefficientState
    score: float
    fit: float


def _n_params(lib: CandidateLibrary, mask) -> int:
    live = {lib.terms[k].inner for k in np.flatnonzero(mask.any(axis=0)) if lib.terms[k].kind == "exp"}
    return int(mask.sum()) + len(live)


def _fit(grid_times, data_index, obs, lib, mask, weights, penalized, u0, coeffs0, lm_config):
    obj = HybridObjective(grid_times, data_index, obs, lib, mask, coeffs0.inner, weights, penalized)
    x0 = obj.pack(u0, coeffs0.with_mask(mask))
    res = minimize(obj, x0, lm_config)
    u, c = obj.unpack(res.x)
    return u, c, obj.unnormalized_fit(res.x), res


def _monotone(res) -> bool:
    f = res.f0
    for it in res.trace:
        if it.accepted:
            if not it.f < f:
                return False
            f = it.f
    return True


def _prune(pen: CoefficientState, mask, k):
    """Mask with the ``k`` smallest |coefficients| of the active set removed."""
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return None
    mags = np.abs(pen.theta.ravel()[idx])
    order = idx[np.argsort(mags, kind="stable")]
    new = mask.ravel().copy()
    new[order[:k]] = False
    return new.reshape(mask.shape)


def select_model(obs: Observations, lib: CandidateLibrary, weights: LossWeights, k0: int = 5,
                 grid: StateGrid | None = None, coeffs0: CoefficientState | None = None,
                 lm_config: LMConfig | None = None, criterion: str = "bic",
                 max_iterations: int | None = None) -> SelectionResult:
    """Adaptive pruning with forward refinement and backward recovery.

    Parameters
    ----------
    obs : Observations
        Training data (entries with ``obs.mask``).
    lib : CandidateLibrary
        Normalised library; coefficients are fitted against it.
    weights : LossWeights
        ``lam`` weights the data term, ``R`` and ``epsilon`` the penalty.
    k0 : int
        Block size of the first pruning stage.
    grid : StateGrid
        Computational grid whose ``values`` are the initial states.
    coeffs0 : CoefficientState
        Initial coefficients; all ones on the full library by default.
    max_iterations : int, optional
        Safety cap on candidate fits, ``ceil(p/k0) + k0 + 1`` by default.

    Returns
    -------
    SelectionResult
        The lowest-scoring model and the full trace of candidates.
    """
    if k0 < 1:
        raise ValueError("k0 must be >= 1")
    if grid is None:
        raise ValueError("a StateGrid with initial states is required")
    score_fn = CRITERIA[criterion]
    lm_config = lm_config or LMConfig()
    d, p = lib.state_dim, lib.n_terms
    coeffs0 = coeffs0 or CoefficientState.full(lib)
    n_hat = obs.n_hat
    cap = max_iterations or selection_bound(d * p, k0)

    mask = np.ones((d, p), bool)
    mode, adaptive, k = "forward", True, k0
    start_u, start_c = grid.values.copy(), coeffs0
    best: _Candidate | None = None
    best_score = math.inf
    accepted_hist: list[_Candidate] = []
    restore_pool: list | None = None
    restore_ref: _Candidate | None = None
    trace = SelectionTrace()

    it = 0
    while True:
        if it >= cap:
            trace.termination = "iteration_cap"
            logger.warning("selection stopped at the iteration cap %d", cap)
            break
        it += 1
        try:
            u1, c1, fit1, r1 = _fit(grid.times, grid.data_index, obs, lib, mask, weights, False,
                                    start_u, start_c, lm_config)
            if weights.R > 0:
                _, c2, _, r2 = _fit(grid.times, grid.data_index, obs, lib, mask, weights, True,
                                    start_u, start_c, lm_config)
            else:
                c2, r2 = c1, r1
            n_par = _n_params(lib, mask)
            score = score_fn(n_par, fit1, n_hat)
            lm_iters = (r1.iterations, r2.iterations)
            mono = _monotone(r1) and _monotone(r2)
        except (LMFailure, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("fit failed for mask with %d terms: %s", mask.sum(), exc)
            u1, c1, c2, fit1, score, n_par, lm_iters = None, None, None, math.inf, math.inf, _n_params(lib, mask), (0, 0)
            mono = True

        ok = score < best_score
        trace.records.append(SelectionRecord(it, mode, k, mask.copy(), n_par, score, fit1, ok, lm_iters, mono))
        if ok:
            best = _Candidate(u1, c1, c2, score, fit1)
            best_score = score
            accepted_hist.append(best)
            if adaptive and k == 1:
                adaptive = False
        else:
            if adaptive and k > 1:
                k = 1
            elif adaptive and k == 1:
                mode = "backward"
                adaptive = False
            else:
                trace.termination = "rejected"
                break
        if best is None:
            trace.termination = "no_valid_fit"
            break

        # next candidate mask
        if mode == "forward":
            new = _prune(best.pen_coeffs, best.coeffs.mask, k)
            if new is None:
                trace.termination = "empty_model"
                break
        else:
            if restore_pool is None:
                restore_pool = _restore_candidates(accepted_hist)
                restore_ref = accepted_hist[-2] if len(accepted_hist) >= 2 else None
            if not restore_pool:
                trace.termination = "nothing_to_restore"
                break
            flat = restore_pool.pop(0)
            new = best.coeffs.mask.copy()
            new.ravel()[flat] = True
        mask = new
        start_u = best.u
        theta = np.where(mask, best.coeffs.theta, 0.0)
        if mode == "backward" and restore_ref is not None:
            # restored terms start from the larger model they were pruned from
            add = mask & ~best.coeffs.mask
            theta[add] = restore_ref.coeffs.theta[add]
        start_c = CoefficientState(theta, mask, best.coeffs.inner, True)

    if best is None:
        raise RuntimeError("no candidate model could be fitted")
    return SelectionResult(best.u, best.coeffs, best.score, best.fit, trace, n_hat)


def _restore_candidates(accepted_hist):
    """Terms pruned between the previous accepted model and the best one.

    Ranked by the previous model's penalised |coefficient|, largest first;
    the last one is dropped because restoring all of them reproduces the
    previous (worse) model.
    """
    if len(accepted_hist) < 2:
        return []
    ref, best = accepted_hist[-2], accepted_hist[-1]
    pool = np.flatnonzero((ref.coeffs.mask & ~best.coeffs.mask).ravel())
    mags = np.abs(ref.pen_coeffs.theta.ravel()[pool])
    order = pool[np.argsort(-mags, kind="stable")]
    return list(order[:-1])


@dataclass
class HyperGrid:
    lambdas: tuple = tuple(10.0 ** i for i in range(-3, 4))
    Rs: tuple = tuple(10.0 ** j for j in range(-4, 1))
    validation_every: int = 3
    validation_offset: int = 2

    def cells(self):
        return [(lam, R) for lam in self.lambdas for R in self.Rs]

    def validation_rows(self, n_obs: int) -> np.ndarray:
        """Observation rows held out for validation (every third sample)."""
        rows = np.zeros(n_obs, bool)
        rows[self.validation_offset::self.validation_every] = True
        return rows

    def split(self, obs: Observations):
        rows = self.validation_rows(obs.times.size)
        train = obs.mask & ~rows[:, None]
        val = obs.mask & rows[:, None]
        return train, val


@dataclass
class CellResult:
    lam: float
    R: float
    result: SelectionResult | None
    validation_error: float
    wall_time: float = 0.0
    error: str = ""


def validation_error(u_grid, data_index, obs: Observations, val_mask) -> float:
    """Sum of squared deviations between data and inferred states on held-out entries."""
    pred = u_grid[data_index]
    diff = (obs.values - pred)[val_mask]
    return float(np.sum(diff ** 2))


def hyperparameter_search(obs: Observations, lib: CandidateLibrary, grid: StateGrid, hyper: HyperGrid,
                          k0: int = 5, epsilon: float = 0.01, lm_config: LMConfig | None = None,
                          criterion: str = "bic", coeffs0: CoefficientState | None = None,
                          workers: int = 1) -> list[CellResult]:
    """Run :func:`select_model` on every (lambda, R) cell and rank by validation error.

    ``lib`` must already be normalised on the initial states held in
    ``grid.values``; ``obs`` is the full data set, split internally.
    """
    train_mask, val_mask = hyper.split(obs)
    train = obs.with_mask(train_mask)
    cells = hyper.cells()
    if not cells:
        raise ValueError("empty hyperparameter grid")

    def run(cell):
        lam, R = cell
        t0 = time.perf_counter()
        try:
            res = select_model(train, lib, LossWeights(lam, R, epsilon), k0, grid, coeffs0, lm_config, criterion)
            err = validation_error(res.u, grid.data_index, obs, val_mask)
            return CellResult(lam, R, res, err, time.perf_counter() - t0)
        except Exception as exc:  # a failed cell must not stop the sweep
            logger.warning("cell lambda=%g R=%g failed: %s", lam, R, exc)
            return CellResult(lam, R, None, math.inf, time.perf_counter() - t0, str(exc))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(run, cells))
    else:
        out = [run(c) for c in cells]
    if all(c.result is None for c in out):
        raise RuntimeError("every hyperparameter cell failed")
    order = sorted(range(len(out)), key=lambda i: (out[i].validation_error, i))
    return [out[i] for i in order]


def hyper_table_rows(cells):
    for rank, c in enumerate(cells, 1):
        r = c.result
        yield (rank, c.lam, c.R, repr(c.validation_error),
               repr(r.score) if r else "", r.coeffs.n_active if r else "",
               r.trace.iterations if r else "", f"{c.wall_time:.3f}", c.error)


HYPER_HEADER = ["rank", "lambda", "R", "validation_error", "score", "n_active", "iterations", "wall_time", "error"]


def metrics(theta, theta_true, u, u_true, tol: float = 0.0):
    """Relative coefficient error, relative state error and true positivity ratio.

    ``theta`` arguments are arrays (or CoefficientStates) in original units.
    A coefficient counts as present when its magnitude exceeds ``tol``.
    """
    th = theta.theta if isinstance(theta, CoefficientState) else np.asarray(theta, float)
    tt = theta_true.theta if isinstance(theta_true, CoefficientState) else np.asarray(theta_true, float)
    u, u_true = np.asarray(u, float), np.asarray(u_true, float)
    if th.shape != tt.shape or u.shape != u_true.shape:
        raise ValueError("shape mismatch between estimate and ground truth")
    nt, nu = np.linalg.norm(tt), np.linalg.norm(u_true)
    if nt == 0 or nu == 0:
        raise ValueError("ground truth has zero norm")
    re_theta = float(np.linalg.norm(th - tt) / nt)
    re_u = float(np.linalg.norm(u - u_true) / nu)
    est = np.abs(th) > tol
    true = np.abs(tt) > 0
    tp = int(np.sum(est & true))
    fn = int(np.sum(~est & true))
    fp = int(np.sum(est & ~true))
    return re_theta, re_u, tp / (tp + fn + fp)


COEFF_HEADER = ["equation", "term", "coefficient", "active", "inner"]


def coefficient_rows(coeffs: CoefficientState, lib: CandidateLibrary, state_names=None):
    """One row per (equation, term); ``inner`` holds the rate of exponential terms."""
    names = list(state_names or [f"x{j + 1}" for j in range(lib.state_dim)])
    terms = lib.names(names)
    for c in range(lib.state_dim):
        for k, t in enumerate(lib.terms):
            inner = repr(float(coeffs.inner[t.inner])) if t.kind == "exp" else ""
            yield (names[c], terms[k], repr(float(coeffs.theta[c, k])), int(coeffs.mask[c, k]), inner)


def write_coefficients(path, coeffs: CoefficientState, lib: CandidateLibrary, state_names=None):
    write_csv(path, COEFF_HEADER, coefficient_rows(coeffs, lib, state_names))


def read_coefficients(path, lib: CandidateLibrary, state_names=None) -> CoefficientState:
    """Inverse of :func:`write_coefficients` (coefficients in original units)."""
    names = list(state_names or [f"x{j + 1}" for j in range(lib.state_dim)])
    terms = {n: k for k, n in enumerate(lib.names(names))}
    theta = np.zeros((lib.state_dim, lib.n_terms))
    mask = np.zeros_like(theta, bool)
    inner = np.zeros(lib.n_inner)
    for row in read_csv_dicts(path):
        try:
            c, k = names.index(row["equation"]), terms[row["term"]]
        except (ValueError, KeyError):
            raise ValueError(f"coefficient row {row} does not match the library") from None
        theta[c, k] = float(row["coefficient"])
        mask[c, k] = bool(int(row["active"]))
        if row.get("inner"):
            inner[lib.terms[k].inner] = float(row["inner"])
    return CoefficientState(theta, mask, inner, scaled=False)
