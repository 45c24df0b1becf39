"""Candidate right-hand-side terms for sparse ODE regression.

A library is an ordered list of terms shared by every equation of a
``d``-dimensional system.  Two kinds of term are supported:

* monomials ``prod_j x_j**e_j`` (the zero exponent vector is the constant 1)
* parametric exponentials ``exp(a * x_j)`` whose rate ``a`` is an inner
  parameter fitted together with the linear coefficients.

Every term is divided by a positive scale ``s_k``; scales are 1 until
:func:`normalize_library` sets them from data.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class Term:
    """One library term.

    ``kind`` is ``"monomial"`` (uses ``exponents``) or ``"exp"`` (uses
    ``var`` and ``inner``, the index of the shared inner parameter).
    """

    kind: str
    exponents: tuple[int, ...] = ()
    var: int = -1
    inner: int = -1

    @classmethod
    def monomial(cls, exponents) -> Term:
        exps = tuple(int(e) for e in exponents)
        if any(e < 0 for e in exps):
            raise ValueError(f"negative exponent in {exps}")
        return cls("monomial", exponents=exps)

    @classmethod
    def exponential(cls, var: int, inner: int = 0) -> Term:
        return cls("exp", var=int(var), inner=int(inner))

    @property
    def degree(self) -> int:
        return sum(self.exponents) if self.kind == "monomial" else 0

    def depends_on(self, j: int) -> bool:
        if self.kind == "monomial":
            return self.exponents[j] > 0
        return self.var == j

    def name(self, names=None) -> str:
        d = len(self.exponents) if self.kind == "monomial" else self.var + 1
        names = names or [f"x{j + 1}" for j in range(max(d, self.var + 1))]
        if self.kind == "exp":
            return f"exp(a{self.inner}*{names[self.var]})"
        parts = []
        for j, e in enumerate(self.exponents):
            if e == 1:
                parts.append(names[j])
            elif e > 1:
                parts.append(f"{names[j]}^{e}")
        return "*".join(parts) if parts else "1"


@dataclass
class CandidateLibrary:
    state_dim: int
    terms: list[Term]
    include_constant: bool = False
    scales: np.ndarray = None
    n_inner: int = 0
    degenerate: np.ndarray = None

    def __post_init__(self):
        p = len(self.terms)
        if self.scales is None:
            self.scales = np.ones(p)
        self.scales = np.asarray(self.scales, dtype=float)
        if self.degenerate is None:
            self.degenerate = np.zeros(p, dtype=bool)
        if self.scales.shape != (p,):
            raise ValueError("one scale per term required")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("scales must be positive and finite")
        monos = [t.exponents for t in self.terms if t.kind == "monomial"]
        if len(set(monos)) != len(monos):
            raise ValueError("duplicate monomial in library")
        for t in self.terms:
            if t.kind == "monomial" and len(t.exponents) != self.state_dim:
                raise ValueError(f"exponent vector {t.exponents} has wrong length")
            if t.kind == "exp":
                if not 0 <= t.var < self.state_dim:
                    raise ValueError(f"exp term variable {t.var} out of range")
                if not 0 <= t.inner < self.n_inner:
                    raise ValueError(f"exp term references missing inner parameter {t.inner}")
        self._cache = None

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def names(self, state_names=None) -> list[str]:
        return [t.name(state_names) for t in self.terms]

    def with_scales(self, scales, degenerate=None) -> CandidateLibrary:
        return replace(self, scales=np.asarray(scales, float).copy(),
                       degenerate=None if degenerate is None else np.asarray(degenerate, bool))

    def to_config(self) -> dict:
        """Structured description; scales are data-derived and not stored."""
        monos = [t for t in self.terms if t.kind == "monomial"]
        degree = max((t.degree for t in monos), default=0)
        return {
            "state_dim": self.state_dim,
            "max_degree": degree,
            "include_constant": self.include_constant,
            "nonlinear": [{"kind": "exp", "var": t.var} for t in self.terms if t.kind == "exp"],
        }

    # index tables used by the vectorised evaluators
    def _tables(self):
        if self._cache is None:
            mono = np.array([k for k, t in enumerate(self.terms) if t.kind == "monomial"], dtype=int)
            expo = np.array([k for k, t in enumerate(self.terms) if t.kind == "exp"], dtype=int)
            E = np.array([self.terms[k].exponents for k in mono], dtype=int).reshape(len(mono), self.state_dim)
            ev = np.array([self.terms[k].var for k in expo], dtype=int)
            ei = np.array([self.terms[k].inner for k in expo], dtype=int)
            self._cache = (mono, E, expo, ev, ei)
        return self._cache


def build_polynomial_library(state_dim: int, max_degree: int, include_constant: bool = False,
                             exp_vars=()) -> CandidateLibrary:
    """All monomials of total degree 1..max_degree in graded lexicographic order.

    Within a degree, exponent vectors are sorted lexicographically in
    descending order, so ``x1`` precedes ``x2`` and ``x1^2`` precedes
    ``x1*x2``.  ``exp_vars`` appends one ``exp(a*x_j)`` per entry, all
    sharing a single inner parameter.
    """
    if state_dim < 1:
        raise ValueError("state_dim must be >= 1")
    if max_degree < 1:
        raise ValueError("max_degree must be >= 1")
    terms = []
    if include_constant:
        terms.append(Term.monomial((0,) * state_dim))
    for q in range(1, max_degree + 1):
        exps = [e for e in itertools.product(range(q + 1), repeat=state_dim) if sum(e) == q]
        exps.sort(reverse=True)
        terms.extend(Term.monomial(e) for e in exps)
    exp_vars = list(exp_vars)
    for j in exp_vars:
        terms.append(Term.exponential(j, 0))
    return CandidateLibrary(state_dim, terms, include_constant, n_inner=1 if exp_vars else 0)


def library_from_config(cfg: dict) -> CandidateLibrary:
    nonlinear = cfg.get("nonlinear", [])
    for item in nonlinear:
        if item.get("kind", "exp") != "exp":
            raise ValueError(f"unsupported nonlinear term kind {item.get('kind')!r}")
    return build_polynomial_library(int(cfg["state_dim"]), int(cfg["max_degree"]),
                                    bool(cfg.get("include_constant", False)),
                                    [int(item["var"]) for item in nonlinear])


def polynomial_term_count(state_dim: int, max_degree: int, include_constant: bool = False) -> int:
    return math.comb(state_dim + max_degree, max_degree) - (0 if include_constant else 1)


def _check_inputs(lib: CandidateLibrary, x, inner):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != lib.state_dim:
        raise ValueError(f"expected {lib.state_dim} state components, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite state passed to library evaluation")
    inner = np.asarray(inner if inner is not None else np.zeros(lib.n_inner), dtype=float).ravel()
    if inner.size != lib.n_inner:
        raise ValueError(f"expected {lib.n_inner} inner parameters, got {inner.size}")
    if not np.all(np.isfinite(inner)):
        raise ValueError("non-finite inner parameter")
    return X, single, inner


def _monomial_factors(X, E, max_order):
    """Per-variable factors of each monomial and their first/second derivatives.

    Returns arrays of shape (d, n, m): ``G[j] = x_j**e_j``, ``G1[j]`` and
    ``G2[j]`` the first and second derivative of that factor in ``x_j``.
    """
    n, d = X.shape
    qmax = int(E.max(initial=0))
    pw = np.ones((qmax + 1, n, d))
    for e in range(1, qmax + 1):
        pw[e] = pw[e - 1] * X
    G = np.empty((d, n, E.shape[0]))
    G1 = np.empty_like(G) if max_order >= 1 else None
    G2 = np.empty_like(G) if max_order >= 2 else None
    for j in range(d):
        e = E[:, j]
        G[j] = pw[e, :, j].T
        if max_order >= 1:
            G1[j] = (e[:, None] * pw[np.maximum(e - 1, 0), :, j]).T
        if max_order >= 2:
            G2[j] = ((e * (e - 1))[:, None] * pw[np.maximum(e - 2, 0), :, j]).T
    return G, G1, G2


def evaluate_terms(lib: CandidateLibrary, x, inner=None) -> np.ndarray:
    """Scaled term values ``N_k(x) / s_k``; shape (p,) or (n, p) for a batch."""
    X, single, inner = _check_inputs(lib, x, inner)
    mono, E, expo, ev, ei = lib._tables()
    out = np.empty((X.shape[0], lib.n_terms))
    if mono.size:
        G, _, _ = _monomial_factors(X, E, 0)
        out[:, mono] = np.prod(G, axis=0)
    if expo.size:
        out[:, expo] = np.exp(inner[ei] * X[:, ev])
    out /= lib.scales
    return out[0] if single else out


@dataclass
class TermDerivatives:
    """Scaled term values and derivatives at a batch of n points.

    Shapes: ``values`` (n, p); ``dx`` (n, p, d); ``dxx`` (n, p, d, d);
    ``da`` (n, p, q); ``dxa`` (n, p, d, q); ``daa`` (n, p, q, q) with q the
    number of inner parameters.
    """

    values: np.ndarray
    dx: np.ndarray
    dxx: np.ndarray | None
    da: np.ndarray
    dxa: np.ndarray | None
    daa: np.ndarray | None


def term_jacobian_hessian(lib: CandidateLibrary, x, inner=None, order: int = 2) -> TermDerivatives:
    """Exact first (and, for ``order=2``, second) derivatives of every scaled term."""
    X, single, inner = _check_inputs(lib, x, inner)
    n, d = X.shape
    p, q = lib.n_terms, lib.n_inner
    mono, E, expo, ev, ei = lib._tables()
    vals = np.zeros((n, p))
    dx = np.zeros((n, p, d))
    dxx = np.zeros((n, p, d, d)) if order >= 2 else None
    da = np.zeros((n, p, q))
    dxa = np.zeros((n, p, d, q)) if order >= 2 else None
    daa = np.zeros((n, p, q, q)) if order >= 2 else None

    if mono.size:
        G, G1, G2 = _monomial_factors(X, E, order)
        vals[:, mono] = np.prod(G, axis=0)
        # products over all factors except j (and except j, l)
        without = [np.prod(np.delete(G, j, axis=0), axis=0) for j in range(d)]
        for j in range(d):
            dx[:, mono, j] = G1[j] * without[j]
        if order >= 2:
            for j in range(d):
                dxx[:, mono, j, j] = G2[j] * without[j]
                for l in range(j + 1, d):
                    rest = np.prod(np.delete(G, [j, l], axis=0), axis=0)
                    v = G1[j] * G1[l] * rest
                    dxx[:, mono, j, l] = v
                    dxx[:, mono, l, j] = v
    if expo.size:
        a = inner[ei]
        xv = X[:, ev]
        val = np.exp(a * xv)
        vals[:, expo] = val
        dx[:, expo, ev] = a * val
        da[:, expo, ei] = xv * val
        if order >= 2:
            dxx[:, expo, ev, ev] = a * a * val
            dxa[:, expo, ev, ei] = (1.0 + a * xv) * val
            daa[:, expo, ei, ei] = xv * xv * val

    s = lib.scales
    vals /= s
    dx /= s[:, None]
    da /= s[:, None]
    if order >= 2:
        dxx /= s[:, None, None]
        dxa /= s[:, None, None]
        daa /= s[:, None, None]
    if single:
        pick = lambda a: None if a is None else a[0]
        return TermDerivatives(*(pick(a) for a in (vals, dx, dxx, da, dxa, daa)))
    return TermDerivatives(vals, dx, dxx, da, dxa, daa)


def normalize_library(lib: CandidateLibrary, initial_states, inner=None) -> CandidateLibrary:
    """Return a copy whose scales are the data 2-norms of the unscaled terms.

    Terms whose column norm is below 1e-12 keep scale 1 and are flagged in
    ``degenerate``.
    """
    raw = evaluate_terms(lib.with_scales(np.ones(lib.n_terms)), initial_states, inner)
    norms = np.linalg.norm(np.atleast_2d(raw), axis=0)
    degenerate = ~(norms >= _DEGENERATE_NORM) | ~np.isfinite(norms)
    if degenerate.any():
        names = [lib.terms[k].name() for k in np.flatnonzero(degenerate)]
        logger.warning("terms with vanishing data norm keep unit scale: %s", ", ".join(names))
    scales = np.where(degenerate, 1.0, norms)
    return lib.with_scales(scales, degenerate)


@dataclass
class CoefficientState:
    """Coefficients ``theta`` (d x p), active-term ``mask`` and inner parameters."""

    theta: np.ndarray
    mask: np.ndarray
    inner: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scaled: bool = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.inner = np.asarray(self.inner, dtype=float).ravel()
        if self.theta.shape != self.mask.shape:
            raise ValueError("theta and mask shapes differ")
        self.theta = np.where(self.mask, self.theta, 0.0)

    @classmethod
    def full(cls, lib: CandidateLibrary, value: float = 1.0, inner=None) -> CoefficientState:
        shape = (lib.state_dim, lib.n_terms)
        inner = np.zeros(lib.n_inner) if inner is None else inner
        return cls(np.full(shape, value), np.ones(shape, bool), inner, True)

    def copy(self) -> CoefficientState:
        return CoefficientState(self.theta.copy(), self.mask.copy(), self.inner.copy(), self.scaled)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask) -> CoefficientState:
        return CoefficientState(self.theta, mask, self.inner, self.scaled)


def rescale_coefficients(coeffs: CoefficientState, lib: CandidateLibrary,
                         state_scales=None) -> CoefficientState:
    """Convert coefficients fitted against the scaled library to original units.

    ``state_scales`` (per-component standard deviations) additionally undoes a
    state standardisation ``xbar = x / sigma``: a monomial with exponents
    ``e`` in equation ``c`` picks up ``sigma_c / prod(sigma**e)``, an
    exponential ``exp(abar * xbar_j)`` picks up ``sigma_c`` and its rate
    becomes ``abar / sigma_j``.
    """
    if not coeffs.scaled:
        raise ValueError("coefficients are already in original units")
    theta = coeffs.theta / lib.scales
    inner = coeffs.inner.copy()
    if state_scales is not None:
        sig = np.asarray(state_scales, dtype=float)
        factor = np.empty(lib.n_terms)
        for k, t in enumerate(lib.terms):
            if t.kind == "monomial":
                factor[k] = 1.0 / np.prod(sig ** np.array(t.exponents))
            else:
                factor[k] = 1.0
                inner[t.inner] = coeffs.inner[t.inner] / sig[t.var]
        theta = sig[:, None] * theta * factor[None, :]
    return CoefficientState(theta, coeffs.mask.copy(), inner, scaled=False)


def scale_coefficients(coeffs: CoefficientState, lib: CandidateLibrary,
                       state_scales=None) -> CoefficientState:
    """Inverse of :func:`rescale_coefficients`."""
    if coeffs.scaled:
        raise ValueError("coefficients are already scaled")
    theta = coeffs.theta.copy()
    inner = coeffs.inner.copy()
    if state_scales is not None:
        sig = np.asarray(state_scales, dtype=float)
        factor = np.empty(lib.n_terms)
        for k, t in enumerate(lib.terms):
            if t.kind == "monomial":
                factor[k] = np.prod(sig ** np.array(t.exponents))
            else:
                factor[k] = 1.0
                inner[t.inner] = coeffs.inner[t.inner] * sig[t.var]
        theta = theta * factor[None, :] / sig[:, None]
    return CoefficientState(theta * lib.scales, coeffs.mask.copy(), inner, scaled=True)


def format_equations(coeffs: CoefficientState, lib: CandidateLibrary, state_names=None,
                     digits: int = 4) -> list[str]:
    """Human-readable right-hand sides, one string per equation."""
    names = state_names or [f"x{j + 1}" for j in range(lib.state_dim)]
    lines = []
    for c in range(lib.state_dim):
        parts = []
        for k, t in enumerate(lib.terms):
            if not coeffs.mask[c, k]:
                continue
            val = coeffs.theta[c, k]
            tname = t.name(names)
            if t.kind == "exp":
                tname = f"exp({coeffs.inner[t.inner]:.{digits}g}*{names[t.var]})"
            body = f"{abs(val):.{digits}g}" if tname == "1" else f"{abs(val):.{digits}g}*{tname}"
            sign = "-" if val < 0 else "+"
            parts.append((sign, body))
        if not parts:
            rhs = "0"
        else:
            first_sign, first = parts[0]
            rhs = ("-" if first_sign == "-" else "") + first
            rhs += "".join(f" {s} {b}" for s, b in parts[1:])
        lines.append(f"d{names[c]}/dt = {rhs}")
    return lines
