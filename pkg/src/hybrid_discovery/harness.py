"""Synthetic benchmarks: reference systems, noisy data and batch discovery runs."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import solve_ivp

from .discrete import Observations, StateGrid, build_grid
from .io import write_csv
from .library import (CandidateLibrary, CoefficientState, Term, build_polynomial_library, format_equations,
                      normalize_library, rescale_coefficients)
from .lm import LMConfig
from .selection import CellResult, HyperGrid, hyperparameter_search, metrics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSystem:
    """A reference ODE with its ground-truth sparse representation.

    ``truth`` maps ``(equation, term)`` to a coefficient, where ``term`` is
    a monomial exponent tuple or ``"exp"``; ``inner_truth`` holds the rate
    of exponential terms.
    """

    name: str
    dim: int
    rhs: object
    x0: tuple
    dt_hat: float
    n_samples: int
    truth: dict
    max_degree: int = 3
    include_constant: bool = False
    exp_vars: tuple = ()
    inner_truth: tuple = ()
    standardize: bool = False
    t0: float = 0.0
    state_names: tuple = ()

    @property
    def sample_times(self) -> np.ndarray:
        return self.t0 + self.dt_hat * np.arange(self.n_samples)

    def library(self, max_degree: int | None = None) -> CandidateLibrary:
        return build_polynomial_library(self.dim, max_degree or self.max_degree, self.include_constant,
                                        self.exp_vars)

    def true_coefficients(self, lib: CandidateLibrary) -> CoefficientState:
        """Ground truth against ``lib`` in original units.

        Raises ``KeyError`` if a true term is missing from the library.
        """
        theta = np.zeros((self.dim, lib.n_terms))
        index = {}
        for k, t in enumerate(lib.terms):
            index[t.exponents if t.kind == "monomial" else "exp"] = k
        for (eq, term), val in self.truth.items():
            if term not in index:
                raise KeyError(f"term {term} of {self.name} not in library")
            theta[eq, index[term]] = val
        inner = np.zeros(lib.n_inner)
        inner[:len(self.inner_truth)] = self.inner_truth[:lib.n_inner]
        return CoefficientState(theta, theta != 0, inner, scaled=False)

    def with_sampling(self, dt_hat: float, n_samples: int) -> BenchmarkSystem:
        from dataclasses import replace
        return replace(self, dt_hat=dt_hat, n_samples=n_samples)


def _e(d, **powers):
    e = [0] * d
    for key, v in powers.items():
        e[int(key[1:]) - 1] = v
    return tuple(e)


def van_der_pol(mu: float = 2.0) -> BenchmarkSystem:
    def rhs(t, s):
        x, y = s
        return [y, mu * (1 - x * x) * y - x]
    e = lambda **k: _e(2, **k)
    truth = {(0, e(x2=1)): 1.0, (1, e(x1=1)): -1.0, (1, e(x2=1)): mu, (1, e(x1=2, x2=1)): -mu}
    return BenchmarkSystem("vdp", 2, rhs, (0.0, 2.0), 0.02, 501, truth, 3, state_names=("x", "y"))


def lorenz(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> BenchmarkSystem:
    # standard signs: dy = x(rho - z) - y, dz = xy - beta z
    def rhs(t, s):
        x, y, z = s
        return [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
    e = lambda **k: _e(3, **k)
    truth = {(0, e(x1=1)): -sigma, (0, e(x2=1)): sigma,
             (1, e(x1=1)): rho, (1, e(x1=1, x3=1)): -1.0, (1, e(x2=1)): -1.0,
             (2, e(x1=1, x2=1)): 1.0, (2, e(x3=1)): -beta}
    return BenchmarkSystem("lorenz", 3, rhs, (-8.0, 8.0, 27.0), 0.02, 501, truth, 3, state_names=("x", "y", "z"))


def lorenz96(N: int = 5, F: float = 8.0) -> BenchmarkSystem:
    def rhs(t, x):
        x = np.asarray(x)
        return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + F
    truth = {}
    for i in range(N):
        def ex(*idx):
            e = [0] * N
            for j in idx:
                e[j % N] += 1
            return tuple(e)
        truth[(i, (0,) * N)] = F
        truth[(i, ex(i))] = -1.0
        truth[(i, ex(i + 1, i - 1))] = truth.get((i, ex(i + 1, i - 1)), 0.0) + 1.0
        truth[(i, ex(i - 2, i - 1))] = truth.get((i, ex(i - 2, i - 1)), 0.0) - 1.0
    x0 = (F + 0.01,) + (F,) * (N - 1)
    return BenchmarkSystem("lorenz96", N, rhs, x0, 0.04, 251, truth, 2, include_constant=True)


def colpitts(alpha: float = 5.0, eta: float = 6.2723, gamma: float = 0.0797, q: float = 0.6898,
             a: float = -1.0) -> BenchmarkSystem:
    def rhs(t, s):
        x, y, z = s
        return [alpha * z, eta * (1.0 - np.exp(a * x) + z), -gamma * (x + y) - q * z]
    e = lambda **k: _e(3, **k)
    truth = {(0, e(x3=1)): alpha,
             (1, e()): eta, (1, "exp"): -eta, (1, e(x3=1)): eta,
             (2, e(x1=1)): -gamma, (2, e(x2=1)): -gamma, (2, e(x3=1)): -q}
    return BenchmarkSystem("colpitts", 3, rhs, (0.01, 0.0, 0.0), 0.1, 500, truth, 2, include_constant=True,
                           exp_vars=(0,), inner_truth=(a,), standardize=True, state_names=("x", "y", "z"))


SYSTEMS = {"vdp": van_der_pol, "lorenz": lorenz, "lorenz96": lorenz96, "colpitts": colpitts}


def get_system(name: str) -> BenchmarkSystem:
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def integrate_reference(system: BenchmarkSystem, times=None, t_span=None, sample_interval=None,
                        rtol: float = 1e-12, atol: float = 1e-12) -> np.ndarray:
    """Dormand-Prince 4(5) solution sampled at ``times``.

    Without ``times`` the samples are ``t_span[0], t_span[0] + sample_interval, ...``
    up to ``t_span[1]`` when both are given, else the system's own sample times.
    """
    if times is None and t_span is not None:
        h = sample_interval or system.dt_hat
        m = int(round((t_span[1] - t_span[0]) / h))
        if m < 1:
            raise ValueError("horizon shorter than one sample interval")
        times = t_span[0] + h * np.arange(m + 1)
    times = system.sample_times if times is None else np.asarray(times, float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    return _integrate(system.name, system.rhs, tuple(system.x0), tuple(np.round(times, 12)), rtol, atol)


@lru_cache(maxsize=32)
def _integrate(name, rhs, x0, times, rtol, atol):
    times = np.array(times)
    if times.size == 1:
        return np.array([x0], float)
    sol = solve_ivp(rhs, (times[0], times[-1]), x0, method="RK45", t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"reference integration of {name} failed: {sol.message}")
    out = sol.y.T.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level (fraction of each component's std) and data removal.

    ``drop`` is ``None``, ``("gap", t_start, t_end)`` removing every sample
    with ``t_start < t < t_end``, or ``("random", q)`` removing each entry
    independently with probability ``q``.
    """

    percent: float = 0.0
    seed: int = 0
    drop: tuple | None = None

    def __post_init__(self):
        if self.percent < 0:
            raise ValueError("noise level must be nonnegative")
        if self.drop is not None:
            kind = self.drop[0]
            if kind == "random" and not 0 <= self.drop[1] < 1:
                raise ValueError("random drop fraction must lie in [0, 1)")
            if kind == "gap" and not self.drop[1] < self.drop[2]:
                raise ValueError("gap start must precede gap end")
            if kind not in ("gap", "random"):
                raise ValueError(f"unknown drop kind {kind!r}")


def add_noise_and_drop(times, trajectory, spec: NoiseSpec) -> Observations:
    times = np.asarray(times, float)
    u = np.asarray(trajectory, float)
    rng = np.random.default_rng(spec.seed)
    sigma = spec.percent * u.std(axis=0)
    noisy = u + rng.standard_normal(u.shape) * sigma
    mask = np.ones(u.shape, bool)
    if spec.drop is not None:
        if spec.drop[0] == "gap":
            inside = (times > spec.drop[1]) & (times < spec.drop[2])
            mask[inside] = False
        else:
            mask &= rng.random(u.shape) >= spec.drop[1]
    return Observations(times, noisy, mask)


def initial_state(obs: Observations, times=None) -> np.ndarray:
    """Per-component linear interpolation of the available data onto ``times``."""
    times = obs.times if times is None else np.asarray(times, float)
    out = np.empty((times.size, obs.state_dim))
    for j in range(obs.state_dim):
        ok = obs.mask[:, j]
        if ok.sum() < 2:
            raise ValueError(f"component {j} has fewer than two observed values")
        out[:, j] = np.interp(times, obs.times[ok], obs.values[ok, j])
    return out


def standardize_states(obs: Observations):
    """Divide each component by the standard deviation of its available data."""
    sig = np.array([np.std(obs.values[obs.mask[:, j], j]) for j in range(obs.state_dim)])
    if np.any(~(sig > 0)):
        raise ValueError("cannot standardise a component with zero variance")
    return Observations(obs.times, obs.values / sig, obs.mask), sig


# starting rate of every exp(a*x) term (in the coordinates the fit runs in)
DEFAULT_INNER_INIT = -1.0


def default_inner_init(n_inner: int) -> tuple:
    return (DEFAULT_INNER_INIT,) * n_inner


@dataclass
class DiscoveryConfig:
    hyper: HyperGrid = field(default_factory=HyperGrid)
    k0: int = 5
    epsilon: float = 0.01
    refine: int = 1
    criterion: str = "bic"
    standardize: bool = False
    inner_init: tuple = ()
    lm: LMConfig = field(default_factory=LMConfig)
    workers: int = 1


@dataclass
class Discovery:
    """Winning model in original units plus everything needed to inspect it."""

    lib: CandidateLibrary
    coeffs: CoefficientState
    scaled: CoefficientState
    states: np.ndarray
    grid: StateGrid
    cells: list
    state_scales: np.ndarray | None
    lam: float
    R: float

    @property
    def winner(self) -> CellResult:
        return self.cells[0]

    def equations(self, names=None, digits: int = 4) -> list[str]:
        return format_equations(self.coeffs, self.lib, names, digits)


def prepare(obs: Observations, lib: CandidateLibrary, cfg: DiscoveryConfig):
    """Grid, gap-filled initial states and library normalisation for a run."""
    train_mask, _ = cfg.hyper.split(obs)
    train = obs.with_mask(train_mask)
    grid = build_grid(obs.times, cfg.refine, obs.state_dim)
    grid.values = initial_state(train, grid.times)
    inner0 = np.asarray(cfg.inner_init if cfg.inner_init else default_inner_init(lib.n_inner), float)
    lib_n = normalize_library(lib, initial_state(train), inner0)
    coeffs0 = CoefficientState.full(lib_n, 1.0, inner0)
    return grid, lib_n, coeffs0


def discover(obs: Observations, lib: CandidateLibrary, cfg: DiscoveryConfig | None = None) -> Discovery:
    """Grid search over (lambda, R) with adaptive pruning in every cell."""
    cfg = cfg or DiscoveryConfig()
    scales = None
    if cfg.standardize:
        obs, scales = standardize_states(obs)
    grid, lib_n, coeffs0 = prepare(obs, lib, cfg)
    cells = hyperparameter_search(obs, lib_n, grid, cfg.hyper, cfg.k0, cfg.epsilon, cfg.lm, cfg.criterion,
                                  coeffs0, cfg.workers)
    best = cells[0]
    res = best.result
    coeffs = rescale_coefficients(res.coeffs, lib_n, scales)
    states = res.u * (scales if scales is not None else 1.0)
    grid_out = StateGrid(grid.times, states, grid.data_index)
    return Discovery(lib_n, coeffs, res.coeffs, states, grid_out, cells, scales, best.lam, best.R)


@dataclass
class RunRecord:
    system: str
    noise_pct: float
    seed: int
    lam: float
    R: float
    re_theta: float
    re_u: float
    tpr: float
    score: float
    iters: int
    wall_time: float
    equations: list = field(default_factory=list)
    error: str = ""

    def row(self):
        return (self.system, self.noise_pct, self.seed, self.lam, self.R, repr(self.re_theta), repr(self.re_u),
                repr(self.tpr), repr(self.score), self.iters, f"{self.wall_time:.3f}")


RESULT_HEADER = ["system", "noise_pct", "seed", "lambda", "R", "RE_theta", "RE_u", "TPR", "bic", "iters", "wall_time"]


def realization_seeds(master_seed: int, noise_levels, n_seeds: int) -> dict:
    """Independent integer seeds per (noise level index, realization)."""
    ss = np.random.SeedSequence(master_seed)
    children = ss.spawn(len(noise_levels) * n_seeds)
    out = {}
    for i, _ in enumerate(noise_levels):
        for r in range(n_seeds):
            out[(i, r)] = int(children[i * n_seeds + r].generate_state(1)[0])
    return out


def run_single(system: BenchmarkSystem, spec: NoiseSpec, cfg: DiscoveryConfig, max_degree: int | None = None,
               seed_label: int | None = None) -> tuple[RunRecord, Discovery | None]:
    """Simulate, discover and score one noise realisation."""
    t0 = time.perf_counter()
    times = system.sample_times
    truth_u = integrate_reference(system, times)
    obs = add_noise_and_drop(times, truth_u, spec)
    lib = system.library(max_degree)
    try:
        theta_true = system.true_coefficients(lib)
    except KeyError:
        # library cannot express the truth: only the state error is defined
        theta_true = None
    if cfg.standardize != system.standardize:
        from dataclasses import replace
        cfg = replace(cfg, standardize=system.standardize)
    label = spec.seed if seed_label is None else seed_label
    try:
        disc = discover(obs, lib, cfg)
    except Exception as exc:
        logger.warning("%s noise=%g seed=%s failed: %s", system.name, spec.percent, label, exc)
        rec = RunRecord(system.name, spec.percent, label, math.nan, math.nan, math.nan, math.nan, math.nan,
                        math.nan, 0, time.perf_counter() - t0, error=str(exc))
        return rec, None
    grid_truth = integrate_reference(system, disc.grid.times)
    if theta_true is None:
        re_t = tpr = math.nan
        re_u = float(np.linalg.norm(disc.states - grid_truth) / np.linalg.norm(grid_truth))
    else:
        re_t, re_u, tpr = metrics(disc.coeffs, theta_true, disc.states, grid_truth)
    res = disc.winner.result
    rec = RunRecord(system.name, spec.percent, label, disc.lam, disc.R, re_t, re_u, tpr, res.score,
                    res.trace.iterations, time.perf_counter() - t0, disc.equations(list(system.state_names) or None))
    return rec, disc


def run_benchmark(system: BenchmarkSystem, noise_levels, n_seeds: int, cfg: DiscoveryConfig | None = None,
                  master_seed: int = 0, drop=None, max_degree: int | None = None, workers: int = 1,
                  on_record=None) -> list[RunRecord]:
    """All (noise level, realisation) runs; failures are recorded, not raised."""
    cfg = cfg or DiscoveryConfig()
    seeds = realization_seeds(master_seed, noise_levels, n_seeds)
    jobs = [(pct, seeds[(i, r)]) for i, pct in enumerate(noise_levels) for r in range(n_seeds)]

    def job(args):
        pct, s = args
        rec, _ = run_single(system, NoiseSpec(pct, s, drop), cfg, max_degree)
        if on_record is not None:
            on_record(rec)
        return rec

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_job_entry, [(system.name, pct, s, drop, cfg, max_degree) for pct, s in jobs]))
    else:
        records = [job(j) for j in jobs]
    return records


def _job_entry(args):
    name, pct, s, drop, cfg, max_degree = args
    return run_single(get_system(name), NoiseSpec(pct, s, drop), cfg, max_degree)[0]


def summarize(records, metric_names=("re_theta", "re_u", "tpr")) -> list[dict]:
    """Median, quartiles and Tukey whiskers per noise level and metric."""
    out = []
    levels = sorted({r.noise_pct for r in records})
    for pct in levels:
        rows = [r for r in records if r.noise_pct == pct and not r.error]
        entry = {"noise_pct": pct, "n": len(rows), "failed": sum(1 for r in records if r.noise_pct == pct and r.error)}
        for m in metric_names:
            vals = np.array([getattr(r, m) for r in rows], float)
            if vals.size == 0:
                stats = [math.nan] * 5
            else:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                iqr = q3 - q1
                lo = vals[vals >= q1 - 1.5 * iqr].min()
                hi = vals[vals <= q3 + 1.5 * iqr].max()
                stats = [med, q1, q3, lo, hi]
            for key, v in zip(("median", "q1", "q3", "whisker_lo", "whisker_hi"), stats):
                entry[f"{m}_{key}"] = float(v)
        out.append(entry)
    return out


def write_results(path, records) -> None:
    write_csv(path, RESULT_HEADER, [r.row() for r in records])


def write_summary(path, summary) -> None:
    if not summary:
        raise ValueError("nothing to summarise")
    header = list(summary[0].keys())
    write_csv(path, header, [[s[h] for h in header] for s in summary])


REFINE_SAMPLE_INTERVALS = (0.05, 0.1, 0.2, 0.4)
REFINE_GRID_SPACINGS = (0.025, 0.05, 0.1, 0.2, 0.4)


def refinement_sweep(system: BenchmarkSystem, noise: float, n_seeds: int, cfg: DiscoveryConfig | None = None,
                     sample_intervals=REFINE_SAMPLE_INTERVALS, grid_spacings=REFINE_GRID_SPACINGS,
                     horizon: float = 10.0, master_seed: int = 0, on_record=None) -> list[tuple]:
    """Cross sampling interval with model-grid spacing.

    Only spacings that divide the sampling interval into an integer number
    of steps are run.  Returns ``(dt_hat, dt, record)`` tuples; the same
    noise realisations are reused across grid spacings.
    """
    from dataclasses import replace
    cfg = cfg or DiscoveryConfig()
    out = []
    for dt_hat in sample_intervals:
        sysd = system.with_sampling(dt_hat, int(round(horizon / dt_hat)) + 1)
        seeds = realization_seeds(master_seed, [noise], n_seeds)
        for dt in grid_spacings:
            factor = dt_hat / dt
            if dt > dt_hat or abs(factor - round(factor)) > 1e-9:
                continue
            c = replace(cfg, refine=int(round(factor)))
            for r in range(n_seeds):
                rec, _ = run_single(sysd, NoiseSpec(noise, seeds[(0, r)]), c)
                out.append((dt_hat, dt, rec))
                if on_record is not None:
                    on_record(out[-1])
    return out
