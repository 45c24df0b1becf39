"""Command-line entry point: ``hybrid-discovery {simulate,discover,benchmark,report}``.

Every command writes a ``manifest.json`` with its fully resolved arguments
next to its outputs; ``--manifest`` replays such a file.

Environment overrides: ``HYBRID_DISCOVERY_WORKERS`` (worker count) and
``HYBRID_DISCOVERY_OUT`` (default output directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .discrete import Observations
from .io import read_csv_dicts, write_csv, write_json
from .library import build_polynomial_library
from .lm import LMConfig
from .selection import HYPER_HEADER, HyperGrid, hyper_table_rows, metrics, read_coefficients, write_coefficients

logger = logging.getLogger("hybrid_discovery")

ENV_WORKERS = "HYBRID_DISCOVERY_WORKERS"
ENV_OUT = "HYBRID_DISCOVERY_OUT"


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _gap(text):
    try:
        a, b = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:END, got {text!r}") from None
    if not a < b:
        raise argparse.ArgumentTypeError("gap start must precede gap end")
    return [a, b]


def _nonlinear(text):
    kind, _, var = str(text).partition(":")
    if kind != "exp" or not var:
        raise argparse.ArgumentTypeError(f"expected exp:VAR, got {text!r}")
    var = var.lstrip("x")
    try:
        j = int(var) - 1
    except ValueError:
        raise argparse.ArgumentTypeError(f"exp variable must be a 1-based index, got {text!r}") from None
    if j < 0:
        raise argparse.ArgumentTypeError("exp variable index starts at 1")
    return j


def _add_common(p, system_required=False):
    p.add_argument("--manifest", help="replay the arguments stored in a manifest.json")
    p.add_argument("--system", choices=sorted(harness.SYSTEMS), required=False,
                   help="benchmark system" + (" (required)" if system_required else ""))
    p.add_argument("--out", default=None, help="output directory (default: $%s or ./out)" % ENV_OUT)
    p.add_argument("--noise", type=_floats, default=None, help="noise fraction(s), e.g. 0.1 or 0.05,0.1")
    p.add_argument("--gap", type=_gap, default=None, help="remove samples with START < t < END")
    p.add_argument("--drop", type=float, default=None, help="remove each entry with this probability")
    p.add_argument("--seed", type=int, default=0, help="noise seed (master seed for benchmarks)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_fit(p):
    p.add_argument("--library-degree", type=int, default=None)
    p.add_argument("--include-constant", action="store_true", default=None)
    p.add_argument("--nonlinear", type=_nonlinear, action="append", default=None,
                   help="add exp(a*xVAR) with a fitted rate; repeatable")
    p.add_argument("--lambda-grid", type=_floats, default=None)
    p.add_argument("--r-grid", type=_floats, default=None)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--k0", type=int, default=5)
    p.add_argument("--refine", type=int, default=1)
    p.add_argument("--criterion", choices=("bic", "aic"), default="bic")
    p.add_argument("--standardize", action="store_true", default=None,
                   help="divide states by their standard deviation before fitting")
    p.add_argument("--inner-init", type=_floats, default=None, help="starting value(s) of exp rates")
    p.add_argument("--max-iters", type=int, default=LMConfig.max_iters, help="LM iteration limit")
    p.add_argument("--workers", type=int, default=None, help="parallel workers (default: $%s or 1)" % ENV_WORKERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-discovery",
                                     description="Sparse ODE discovery from noisy, incomplete time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate noisy observations and ground truth")
    _add_common(p, system_required=True)

    p = sub.add_parser("discover", help="discover a model from data")
    _add_common(p)
    p.add_argument("--data", help="observation CSV (t, x1..xd; empty = missing)")
    p.add_argument("--truth", help="noise-free states CSV on the observation times, for metrics")
    p.add_argument("--truth-coefficients", help="coefficient CSV in original units, for metrics")
    _add_fit(p)

    p = sub.add_parser("benchmark", help="seed x noise batch on a benchmark system")
    _add_common(p, system_required=True)
    p.add_argument("--seeds", type=int, default=20, help="noise realisations per level")
    p.add_argument("--refinement-sweep", action="store_true",
                   help="cross sampling intervals with model-grid spacings instead of noise levels")
    p.add_argument("--sample-intervals", type=_floats, default=list(harness.REFINE_SAMPLE_INTERVALS))
    p.add_argument("--grid-spacings", type=_floats, default=list(harness.REFINE_GRID_SPACINGS))
    _add_fit(p)

    p = sub.add_parser("report", help="aggregate results.csv files into quartile summaries")
    p.add_argument("results", nargs="+", help="results.csv files or directories containing them")
    p.add_argument("--out", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(ENV_OUT) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    w = args.workers if getattr(args, "workers", None) is not None else os.environ.get(ENV_WORKERS, 1)
    try:
        w = int(w)
    except ValueError:
        raise UsageError(f"{ENV_WORKERS} must be an integer") from None
    if w < 1:
        raise UsageError("worker count must be positive")
    return w


def _drop(args):
    if args.gap is not None and args.drop is not None:
        raise UsageError("--gap and --drop are mutually exclusive")
    if args.gap is not None:
        return ("gap", args.gap[0], args.gap[1])
    if args.drop is not None:
        if not 0 <= args.drop < 1:
            raise UsageError("--drop must lie in [0, 1)")
        return ("random", args.drop)
    return None


def _manifest(args, extra=None) -> dict:
    resolved = {k: v for k, v in vars(args).items() if k not in ("manifest", "verbose")}
    m = {"command": args.command, "args": resolved}
    if extra:
        m.update(extra)
    return m


def _library(args, dim, system=None):
    degree = args.library_degree or (system.max_degree if system else 3)
    const = args.include_constant if args.include_constant is not None else (
        system.include_constant if system else False)
    exp_vars = args.nonlinear if args.nonlinear is not None else (list(system.exp_vars) if system else [])
    if any(j >= dim for j in exp_vars):
        raise UsageError("--nonlinear variable index exceeds the state dimension")
    return build_polynomial_library(dim, degree, const, exp_vars)


def _config(args, system=None, n_inner=0) -> harness.DiscoveryConfig:
    hyper = HyperGrid()
    if args.lambda_grid is not None:
        hyper = replace(hyper, lambdas=tuple(args.lambda_grid))
    if args.r_grid is not None:
        hyper = replace(hyper, Rs=tuple(args.r_grid))
    if not hyper.lambdas or not hyper.Rs:
        raise UsageError("hyperparameter grids must be non-empty")
    if any(v <= 0 for v in hyper.lambdas) or any(v < 0 for v in hyper.Rs):
        raise UsageError("lambda values must be positive and R values nonnegative")
    if args.k0 < 1 or args.refine < 1 or args.epsilon <= 0:
        raise UsageError("--k0 and --refine must be >= 1 and --epsilon positive")
    standardize = args.standardize if args.standardize is not None else bool(system and system.standardize)
    inner = tuple(args.inner_init) if args.inner_init is not None else harness.default_inner_init(n_inner)
    if len(inner) != n_inner:
        raise UsageError(f"--inner-init needs {n_inner} value(s)")
    return harness.DiscoveryConfig(hyper=hyper, k0=args.k0, epsilon=args.epsilon, refine=args.refine,
                                   criterion=args.criterion, standardize=standardize, inner_init=inner,
                                   lm=LMConfig(max_iters=args.max_iters), workers=_workers(args))


def _states_csv(path, times, values, names):
    rows = ([repr(float(t))] + [repr(float(v)) for v in row] for t, row in zip(times, values))
    write_csv(path, ["t"] + list(names), rows)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    if args.system is None:
        raise UsageError("--system is required")
    system = harness.get_system(args.system)
    noise = args.noise or [0.0]
    if len(noise) != 1:
        raise UsageError("simulate takes a single --noise value")
    spec = harness.NoiseSpec(noise[0], args.seed, _drop(args))
    truth = harness.integrate_reference(system)
    obs = harness.add_noise_and_drop(system.sample_times, truth, spec)
    out = _out_dir(args)
    names = [f"x{j + 1}" for j in range(system.dim)]
    obs.to_csv(out / "observations.csv", names)
    _states_csv(out / "truth.csv", system.sample_times, truth, names)
    lib = system.library()
    write_coefficients(out / "truth_coefficients.csv", system.true_coefficients(lib), lib, names)
    sigma = (spec.percent * truth.std(axis=0)).tolist()
    write_json(out / "manifest.json", _manifest(args, {"noise_sigma": sigma, "n_hat": obs.n_hat,
                                                       "n_samples": int(obs.times.size)}))
    print(f"wrote {obs.times.size} samples ({obs.n_hat} available entries) to {out}")
    return 0


def cmd_discover(args) -> int:
    system = harness.get_system(args.system) if args.system else None
    truth_u = None
    if args.data:
        try:
            obs = Observations.from_csv(args.data)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot read {args.data}: {exc}", file=sys.stderr)
            return 1
        if system is not None and system.dim != obs.state_dim:
            print("error: data dimension does not match --system", file=sys.stderr)
            return 1
    elif system is not None:
        noise = args.noise or [0.0]
        spec = harness.NoiseSpec(noise[0], args.seed, _drop(args))
        truth_u = harness.integrate_reference(system)
        obs = harness.add_noise_and_drop(system.sample_times, truth_u, spec)
    else:
        raise UsageError("give --data or --system")
    lib = _library(args, obs.state_dim, system)
    cfg = _config(args, system, lib.n_inner)
    disc = harness.discover(obs, lib, cfg)

    out = _out_dir(args)
    names = [f"x{j + 1}" for j in range(obs.state_dim)]
    eqs = disc.equations(names)
    (out / "model.txt").write_text("\n".join(eqs) + "\n")
    write_coefficients(out / "coefficients.csv", disc.coeffs, lib, names)
    disc.winner.result.trace.to_csv(out / "selection_trace.csv")
    write_csv(out / "hyper_table.csv", HYPER_HEADER, hyper_table_rows(disc.cells))
    _states_csv(out / "states.csv", disc.grid.times, disc.states, names)
    extra = {"lambda": disc.lam, "R": disc.R, "score": disc.winner.result.score}

    theta_true = None
    if args.truth_coefficients:
        theta_true = read_coefficients(args.truth_coefficients, lib, names)
    elif system is not None:
        try:
            theta_true = system.true_coefficients(lib)
        except KeyError:
            logger.warning("the library cannot express the true model; skipping metrics")
    if args.truth:
        t = Observations.from_csv(args.truth)
        truth_u = t.values
    if theta_true is not None and truth_u is not None:
        if cfg.refine != 1:
            truth_u = harness.integrate_reference(system, disc.grid.times) if system else None
        if truth_u is not None:
            re_t, re_u, tpr = metrics(disc.coeffs, theta_true, disc.states, truth_u)
            m = {"RE_theta": re_t, "RE_u": re_u, "TPR": tpr}
            write_json(out / "metrics.json", m)
            extra["metrics"] = m
    write_json(out / "manifest.json", _manifest(args, extra))
    print("\n".join(eqs))
    return 0


def cmd_benchmark(args) -> int:
    if args.system is None:
        raise UsageError("--system is required")
    system = harness.get_system(args.system)
    lib = _library(args, system.dim, system)
    cfg = _config(args, system, lib.n_inner)
    out = _out_dir(args)
    noise = args.noise or [0.1]
    degree = args.library_degree
    if args.refinement_sweep:
        if len(noise) != 1:
            raise UsageError("a refinement sweep takes a single --noise value")
        rows = harness.refinement_sweep(system, noise[0], args.seeds, cfg, args.sample_intervals,
                                        args.grid_spacings, master_seed=args.seed)
        write_csv(out / "refinement.csv", ["dt_hat", "dt"] + harness.RESULT_HEADER,
                  ((a, b) + r.row() for a, b, r in rows))
        records = [r for _, _, r in rows]
        groups = {}
        for a, b, r in rows:
            groups.setdefault((a, b), []).append(r)
        summary = []
        for (a, b), recs in sorted(groups.items()):
            for s in harness.summarize(recs):
                summary.append({"dt_hat": a, "dt": b, **s})
    else:
        workers = cfg.workers
        cfg = replace(cfg, workers=1)
        records = harness.run_benchmark(system, noise, args.seeds, cfg, args.seed, _drop(args), degree, workers)
        harness.write_results(out / "results.csv", records)
        summary = harness.summarize(records)
    harness.write_summary(out / "summary.csv", summary)
    failed = sum(1 for r in records if r.error)
    write_json(out / "manifest.json", _manifest(args, {"failed_runs": failed}))
    if records and failed == len(records):
        print("error: every run failed", file=sys.stderr)
        return 1
    if failed:
        logger.warning("%d of %d runs failed", failed, len(records))
    print(f"{len(records)} runs ({failed} failed); results in {out}")
    return 0


def _read_records(path):
    recs = []
    for row in read_csv_dicts(path):
        recs.append(harness.RunRecord(row["system"], float(row["noise_pct"]), int(row["seed"]),
                                      float(row["lambda"]), float(row["R"]), float(row["RE_theta"]),
                                      float(row["RE_u"]), float(row["TPR"]), float(row["bic"]),
                                      int(row["iters"]), float(row["wall_time"]),
                                      error="failed" if row["RE_theta"] == "nan" else ""))
    return recs


def cmd_report(args) -> int:
    files = []
    for item in args.results:
        p = Path(item)
        files += sorted(p.rglob("results.csv")) if p.is_dir() else ([p] if p.exists() else [])
    records = []
    for f in files:
        records += _read_records(f)
    if not records:
        print("error: no results found", file=sys.stderr)
        return 1
    out = _out_dir(args)
    summary = []
    for name in sorted({r.system for r in records}):
        for s in harness.summarize([r for r in records if r.system == name]):
            summary.append({"system": name, **s})
    harness.write_summary(out / "report.csv", summary)
    write_json(out / "manifest.json", _manifest(args, {"inputs": [str(f) for f in files]}))
    for s in summary:
        print(f"{s['system']} noise={s['noise_pct']:g} n={s['n']} "
              f"median RE_theta={s['re_theta_median']:.3g} TPR={s['tpr_median']:.3g} RE_u={s['re_u_median']:.3g}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "discover": cmd_discover, "benchmark": cmd_benchmark, "report": cmd_report}


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "manifest", None):
        try:
            stored = json.loads(Path(args.manifest).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read manifest: {exc}")
        if stored.get("command") != args.command:
            parser.error(f"manifest is for {stored.get('command')!r}, not {args.command!r}")
        base = dict(stored.get("args", {}))
        base.pop("command", None)
        # flags given on this command line win over the manifest
        given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
        for k, v in base.items():
            if k not in given:
                setattr(args, k, v)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = _parse(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
