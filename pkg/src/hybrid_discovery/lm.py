"""Levenberg-Marquardt minimisation with the exact (sparse) Hessian.

Each iteration solves ``(H + alpha I) d = -g`` with a sparse Cholesky
factorisation, accepts the step when the objective decreases, and adapts
``alpha`` from the ratio of actual to predicted decrease.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .io import write_csv
from .linalg import BlockHessian, BorderedCholesky, BorderedMatrix, NotPositiveDefinite

logger = logging.getLogger(__name__)


class LMFailure(RuntimeError):
    """Raised when ``H + alpha I`` cannot be factorised even at ``alpha_max``."""


@dataclass
class LMConfig:
    alpha_init: float = 1.0
    tau1: float = 0.25
    tau2: float = 2.0
    rho_low: float = 0.25
    rho_high: float = 0.75
    grad_tol: float = 1e-8
    max_iters: int = 500
    alpha_min: float = 1e-12
    alpha_max: float = 1e12
    # relative decrease below which an accepted step ends the run; 0 disables
    ftol: float = 0.0
    grad_norm: str = "max"

    def __post_init__(self):
        if not 0 < self.tau1 < 1 < self.tau2:
            raise ValueError("need 0 < tau1 < 1 < tau2")
        if not self.rho_low < self.rho_high:
            raise ValueError("need rho_low < rho_high")
        if not 0 < self.alpha_min <= self.alpha_init <= self.alpha_max:
            raise ValueError("alpha_init must lie in [alpha_min, alpha_max]")
        if self.grad_norm not in ("max", "l2"):
            raise ValueError("grad_norm must be 'max' or 'l2'")


@dataclass
class LMIteration:
    iter: int
    f: float
    grad_norm: float
    alpha: float
    rho: float
    accepted: bool


@dataclass
class LMResult:
    x: np.ndarray
    f: float
    grad_norm: float
    reason: str
    trace: list = field(default_factory=list)
    n_hessians: int = 0
    f0: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def converged(self) -> bool:
        return self.reason in ("gradient", "ftol")

    def trace_rows(self):
        return [(t.iter, t.f, t.grad_norm, t.alpha, t.rho, int(t.accepted)) for t in self.trace]

    def to_csv(self, path):
        write_csv(path, ["iter", "f", "grad_norm", "alpha", "rho", "accepted"], self.trace_rows())


class FunctionObjective:
    """Adapter for plain callables ``f``, ``grad`` and ``hess``."""

    def __init__(self, f, grad, hess, border: int = 0):
        self._f, self._g, self._h = f, grad, hess
        self.border = border

    def value(self, x):
        return float(self._f(x))

    def gradient(self, x):
        return np.asarray(self._g(x), float)

    def hessian(self, x):
        return self._h(x)


def _norm(g, kind):
    return float(np.max(np.abs(g), initial=0.0)) if kind == "max" else float(np.linalg.norm(g))


def _safe_value(objective, x):
    try:
        # trial points may overflow; they are rejected, not reported
        with np.errstate(over="ignore", invalid="ignore"):
            f = objective.value(x)
    except (FloatingPointError, ValueError, OverflowError):
        return np.inf
    return f if np.isfinite(f) else np.inf


def minimize(objective, x0, config: LMConfig | None = None, alpha: float | None = None) -> LMResult:
    """Minimise ``objective`` from ``x0``.

    ``objective`` provides ``value``, ``gradient`` and ``hessian`` (sparse or
    dense); an integer attribute ``border`` marks trailing dense variables
    for the factorisation.  ``alpha`` overrides ``config.alpha_init`` and
    may be 0 for a pure Newton step.
    """
    cfg = config or LMConfig()
    x = np.array(x0, dtype=float)
    f = f0 = objective.value(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    a = cfg.alpha_init if alpha is None else float(alpha)
    border = int(getattr(objective, "border", 0) or 0)
    trace = []
    g = H = None
    reason = "max_iters"
    n_hess = 0
    for it in range(cfg.max_iters):
        if g is None:
            g = objective.gradient(x)
            gnorm = _norm(g, cfg.grad_norm)
            if gnorm <= cfg.grad_tol:
                reason = "gradient"
                break
            if hasattr(objective, "hessian_blocks"):
                H = objective.hessian_blocks(x)
            else:
                H = objective.hessian(x)
                H = H if isinstance(H, BlockHessian) else sp.csr_matrix(H)
            n_hess += 1
            M = BorderedMatrix(H, border)
        while True:
            try:
                fac = BorderedCholesky(M, shift=a)
                break
            except NotPositiveDefinite:
                if a >= cfg.alpha_max:
                    raise LMFailure(f"H + alpha I not positive definite at alpha_max={cfg.alpha_max:g}")
                a = min(max(a, cfg.alpha_min) * cfg.tau2, cfg.alpha_max)
        d = -fac.solve(g)
        predicted = -(g @ d) - 0.5 * (d @ (H @ d))
        f_test = _safe_value(objective, x + d)
        rho = (f - f_test) / predicted if predicted != 0 else np.nan
        accepted = bool(f_test < f)
        a_used = a
        if accepted:
            decrease = f - f_test
            x = x + d
            f = f_test
            g = None
            if rho < cfg.rho_low:
                a = min(a * cfg.tau2, cfg.alpha_max)
            elif rho > cfg.rho_high:
                a = max(a * cfg.tau1, cfg.alpha_min)
        else:
            stalled = a >= cfg.alpha_max
            a = min(max(a, cfg.alpha_min) * cfg.tau2, cfg.alpha_max)
        trace.append(LMIteration(it, f, gnorm, a_used, float(rho), accepted))
        if accepted and cfg.ftol > 0 and decrease <= cfg.ftol * max(abs(f), 1e-300):
            reason = "ftol"
            break
        if not accepted and stalled:
            reason = "alpha_max"
            break
    if g is None:
        g = objective.gradient(x)
    gnorm = _norm(g, cfg.grad_norm)
    if reason == "max_iters" and gnorm <= cfg.grad_tol:
        reason = "gradient"
    return LMResult(x, f, gnorm, reason, trace, n_hess, f0)
