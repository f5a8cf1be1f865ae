"""Command-line interface: ``tallmixed {simulate,fit,compare,collapse,designs}``.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numerical
failure.  Output files are written to temporary names and moved into place
only when every requested artifact is complete.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from scipy import linalg

from . import meta as _meta
from . import simulate as _sim
from . import subsample as _sub
from .data import (DataError, SchemaError, assign_designs, bin_continuous, collapse,
                   enumerate_designs, format_schema, load_csv, load_schema, observed_grid,
                   partition_by_practice)
from .families import Family, parse_family
from .glm import RankDeficientError
from .glmm import DEFAULT_QUAD_POINTS, QuadratureError, fitted_values, glmm_fit
from .model import GlmmSpec, GlmSpec, coefficient_names, parse_formula

log = logging.getLogger("tallmixed")

METHODS = ("full", "weighted", "meta_uni", "meta_mv", "meta_fixed", "subsample", "subsample_modified")
STOCHASTIC = ("subsample", "subsample_modified")

PRESET_LEVELS = {
    "itsa": ({"time": list(range(1, 20)), "case": [0, 1], "int1": [0, 1], "int2": [0, 1]}, []),
    "consults": ({"age": [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5], "gender": [0, 1],
                  "morb_moderate": [0, 1], "morb_high": [0, 1], "morb_veryhigh": [0, 1]},
                 [["morb_moderate", "morb_high", "morb_veryhigh"]]),
}

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Outputs:
    """Collect output files under temporary names; publish all or none."""

    def __init__(self):
        self._pending: list[tuple[str, Path]] = []

    def path(self, target: str | os.PathLike) -> str:
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".part", dir=target.parent)
        os.close(fd)
        self._pending.append((tmp, target))
        return tmp

    def write_text(self, target, text: str) -> None:
        with open(self.path(target), "w", encoding="utf-8") as fh:
            fh.write(text)

    def commit(self) -> list[Path]:
        umask = os.umask(0)
        os.umask(umask)
        for tmp, target in self._pending:
            os.chmod(tmp, 0o666 & ~umask)
            os.replace(tmp, target)
        done = [t for _, t in self._pending]
        self._pending = []
        return done

    def discard(self) -> None:
        for tmp, _ in self._pending:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        self._pending = []


# ---------------------------------------------------------------------- #
# argument parsing helpers
# ---------------------------------------------------------------------- #

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def parse_levels(text: str) -> dict[str, list[float]]:
    """``time=1:19;case=0,1`` -> levels per column (``a:b`` is an integer range)."""
    out = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        name, eq, vals = part.partition("=")
        if not eq:
            raise UsageError(f"level spec {part!r} needs 'column=values'")
        vals = vals.strip()
        if ":" in vals and "," not in vals:
            a, b = vals.split(":")
            out[name.strip()] = [float(v) for v in range(int(a), int(b) + 1)]
        else:
            out[name.strip()] = _floats(vals)
    if not out:
        raise UsageError("empty level specification")
    return out


def parse_groups(items: Sequence[str] | None) -> list[list[str]]:
    return [[c.strip() for c in g.split(",") if c.strip()] for g in items or []]


def _bins(text: str | None):
    if text is None or text == "quartiles":
        return "quartiles"
    return _floats(text)


# ---------------------------------------------------------------------- #
# simulate
# ---------------------------------------------------------------------- #

def cmd_simulate(args, out: Outputs) -> dict:
    if args.shape == "itsa":
        kw = dict(N=args.n, J=args.j)
        if args.tau2 is not None:
            kw["tau2"] = args.tau2
        if args.beta:
            kw["beta"] = _floats(args.beta)
        params = _sim.ItsaParams(**kw)
        ds = _sim.simulate_itsa_logistic(params, args.seed)
    else:
        kw = dict(N=args.n, J=args.j)
        if args.tau2 is not None:
            kw["tau2"] = args.tau2
        if args.theta is not None:
            kw["theta"] = args.theta
        if args.beta:
            kw["beta"] = _floats(args.beta)
        params = _sim.ConsultParams(**kw)
        ds = _sim.simulate_negbin_consults(params, args.seed)
    prefix = args.out or args.shape
    ds.to_csv(out.path(f"{prefix}.csv"))
    out.write_text(f"{prefix}.schema", format_schema(ds.schema))
    out.write_text(f"{prefix}.truth.json", _sim.truth_record(params, args.seed) + "\n")
    return {"rows": ds.n_rows, "clusters": ds.n_clusters}


# ---------------------------------------------------------------------- #
# fit
# ---------------------------------------------------------------------- #

def load_inputs(args):
    schema = load_schema(args.schema)
    ds = load_csv(args.data, schema)
    outcome, terms, intercept = parse_formula(args.formula)
    if outcome != ds.outcome_name:
        raise SchemaError(f"formula outcome {outcome!r} is not the schema outcome {ds.outcome_name!r}")
    if args.family:
        family = parse_family(args.family)
    else:
        kind = ds.spec_of(outcome).kind
        family = {"binary": Family.bernoulli(), "count": Family.negative_binomial(),
                  "continuous": Family.gaussian()}.get(kind)
        if family is None:
            raise SchemaError(f"cannot infer a family for outcome kind {kind!r}; pass --family")
    offset = None if args.no_offset else ds.exposure_name
    spec = GlmmSpec(GlmSpec(family, terms, intercept, offset), ds.cluster_name)
    for c in spec.glm.base_columns:
        ds.spec_of(c)
    return ds, spec


def _continuous_terms(ds, spec) -> list[str]:
    return [c for c in spec.glm.base_columns if ds.spec_of(c).kind == "continuous"]


def weighted_table(ds, spec, bins):
    cont = _continuous_terms(ds, spec)
    for c in cont:
        ds = bin_continuous(ds, c, bins)
    return collapse(ds, continuous_columns=cont)


def _grid(args, ds, spec):
    if args.levels:
        return enumerate_designs(parse_levels(args.levels), parse_groups(args.exclusive))
    if args.grid == "observed":
        return observed_grid(ds, spec.glm.base_columns)
    return _sub.default_grid(ds, spec.glm, parse_groups(args.exclusive))


def run_method(method: str, args, ds, spec, out: Outputs | None, tag: str = "") -> dict:
    """Fit one method; returns the JSON-ready record."""
    t0 = time.perf_counter()
    extra: dict = {}
    q = args.quad_points
    est_theta = not args.fixed_theta
    if method == "full":
        fit = glmm_fit(spec, ds, quad_points=q, estimate_theta=est_theta)
        result, n_obs, fitted_fit = fit.to_dict(), ds.n_rows, fit
    elif method == "weighted":
        table = weighted_table(ds, spec, _bins(args.bins))
        fit = glmm_fit(spec, table, quad_points=q, estimate_theta=est_theta)
        result, n_obs, fitted_fit = fit.to_dict(), table.n_rows, fit
        extra["collapsed_rows"] = table.n_rows
        extra["source_rows"] = table.source_n
    elif method in ("meta_uni", "meta_mv", "meta_fixed"):
        if args.from_estimates:
            estimates, names = _meta.read_estimates(args.from_estimates)
        else:
            parts = partition_by_practice(ds)
            estimates = _meta.fit_per_practice(parts, spec.glm, centre=args.centre,
                                               estimate_theta=est_theta)
            names = coefficient_names(spec.glm, ds)
            if args.estimates and out is not None:
                _meta.write_estimates(estimates, names, out.path(args.estimates))
        if method == "meta_uni":
            res = _meta.uni_meta_all(estimates, names, mode=args.pool)
        elif method == "meta_fixed":
            res = _meta.uni_meta_all(estimates, names, mode="fixed")
        else:
            res = _meta.mv_meta(estimates, args.tau2, args.pool, names)
        result, n_obs, fitted_fit = res.to_dict(), res.n_obs, None
    elif method in STOCHASTIC:
        if args.seed is None:
            raise UsageError(f"method {method} needs --seed")
        N = ds.n_rows
        target = min(N, max(2, math.ceil(args.target_fraction * N)))
        n0 = args.n0 if args.n0 is not None else min(10_000, target // 2)
        if not 1 <= n0 < target:
            raise UsageError(f"need 1 <= n0 < target size ({n0}, {target})")
        mode = (_sub.SubsampleMode.full_design() if method == "subsample"
                else _sub.SubsampleMode.fraction(args.step_fraction))
        grid = _grid(args, ds, spec)
        state, fit = _sub.run(ds, spec, n0, target, mode, args.seed, grid=grid, quad_points=q)
        result, n_obs, fitted_fit = fit.to_dict(), state.size, fit
        extra.update(iterations=len(state.history), distinct_designs=state.distinct_designs(),
                     grid_size=len(grid), n0=n0, target_n=target)
        if out is not None:
            hist = args.history or str(Path(args.out).with_suffix("")) + f"{tag}.history.csv"
            _sub.write_history(state, out.path(hist))
    else:
        raise UsageError(f"unknown method {method!r}")
    if args.fitted and out is not None and fitted_fit is not None:
        fv = fitted_values(fitted_fit, spec, ds, allow_unconverged=True)
        with open(out.path(args.fitted), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "cluster", "linear_predictor", "fitted"])
            for r, c, e, f in zip(fv["row"], fv["cluster"], fv["linear_predictor"], fv["fitted"]):
                w.writerow([int(r), c, repr(float(e)), repr(float(f))])
    return {
        "method": method,
        "formula": args.formula,
        "family": spec.family.name,
        "n_obs": float(n_obs),
        "seed": args.seed,
        "result": result,
        "details": extra,
        "runtime_seconds": time.perf_counter() - t0,
    }


def cmd_fit(args, out: Outputs) -> dict:
    ds, spec = load_inputs(args)
    record = run_method(args.method, args, ds, spec, out)
    out.write_text(args.out, json.dumps(record, indent=2, default=_json_default) + "\n")
    return {"method": args.method, "runtime_seconds": record["runtime_seconds"]}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------- #
# compare
# ---------------------------------------------------------------------- #

def response_label(family: Family) -> str:
    return {"logit": "OR", "log": "RR"}.get(family.link, "coef")


def report_row(record: dict, family: Family, names: Sequence[str]) -> dict:
    res = record["result"]
    row = {"method": record["method"], "status": "ok", "error": "",
           "n_obs": record["n_obs"], "runtime_seconds": record["runtime_seconds"],
           "tau2": res.get("tau2"), "theta": res.get("theta") if "theta" in res else res.get("theta_hat"),
           "converged": res.get("converged", "")}
    lab = response_label(family)
    beta = dict(zip(res["names"], res["beta"]))
    se = dict(zip(res["names"], res["se"]))
    expo = family.link in ("logit", "log")
    for nm in names:
        b, s = beta.get(nm), se.get(nm)
        if b is None:
            continue
        row[f"{lab}[{nm}]"] = math.exp(b) if expo else b
        row[f"se[{nm}]"] = math.exp(b) * s if expo else s
    return row


def cmd_compare(args, out: Outputs) -> dict:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if len(methods) < 2:
        raise UsageError("compare needs at least two methods")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    ds, spec = load_inputs(args)
    # per-method side files would collide; compare writes only the report and histories
    args.fitted = args.estimates = None
    names = coefficient_names(spec.glm, ds)
    rows = []
    for m in methods:
        try:
            times = []
            for r in range(args.repeats):
                rec = run_method(m, args, ds, spec, out if r == args.repeats - 1 else None, tag=f".{m}")
                times.append(rec["runtime_seconds"])
            rec["runtime_seconds"] = float(np.mean(times))
            rows.append(report_row(rec, spec.family, names))
        except UsageError:
            raise
        except Exception as exc:  # recorded in-row; other methods proceed
            log.warning("method %s failed: %s", m, exc)
            rows.append({"method": m, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    lab = response_label(spec.family)
    cols = ["method", "status", "error", "converged", "n_obs", "runtime_seconds", "tau2", "theta"]
    for nm in names:
        cols += [f"{lab}[{nm}]", f"se[{nm}]"]
    with open(out.path(args.out), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return {"methods": methods}


# ---------------------------------------------------------------------- #
# collapse and designs
# ---------------------------------------------------------------------- #

def cmd_collapse(args, out: Outputs) -> dict:
    ds = load_csv(args.data, load_schema(args.schema))
    cont = [c.name for c in ds.schema if c.role == "covariate" and c.kind == "continuous"]
    for c in cont:
        ds = bin_continuous(ds, c, _bins(args.bins))
    table = collapse(ds, continuous_columns=cont)
    table.to_csv(out.path(args.out))
    return {"rows": table.n_rows, "source_rows": table.source_n}


def cmd_designs(args, out: Outputs) -> dict:
    if args.preset:
        levels, groups = PRESET_LEVELS[args.preset]
    elif args.levels:
        levels, groups = parse_levels(args.levels), parse_groups(args.exclusive)
    else:
        raise UsageError("designs needs --preset or --levels")
    grid = enumerate_designs(levels, groups)
    counts = None
    if args.data:
        if not args.schema:
            raise UsageError("--data needs --schema")
        ds = load_csv(args.data, load_schema(args.schema))
        idx = assign_designs(grid, ds)
        counts = np.bincount(idx[idx >= 0], minlength=len(grid))
    present = None if counts is None else int(np.sum(counts > 0))
    if args.out:
        with open(out.path(args.out), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["design"] + list(grid.columns) + ([] if counts is None else ["rows"]))
            for d in range(len(grid)):
                vals = [repr(float(v)) for v in grid.values[d]]
                w.writerow([d] + vals + ([] if counts is None else [int(counts[d])]))
    print(f"{len(grid)} designs" + ("" if present is None else f", {present} present in data"))
    return {"designs": len(grid), "present": present}


# ---------------------------------------------------------------------- #
# parser and entry point
# ---------------------------------------------------------------------- #

def _add_model_args(p):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--schema", required=True, help="schema file (column = role:kind[:levels])")
    p.add_argument("--formula", required=True, help="e.g. 'y ~ time*case'")
    p.add_argument("--family", help="bernoulli, poisson, negative_binomial[:theta], gaussian[:sigma2]")
    p.add_argument("--no-offset", action="store_true", help="ignore the exposure column")
    p.add_argument("--fixed-theta", action="store_true", help="hold the negative-binomial theta fixed")
    p.add_argument("--quad-points", type=int, default=DEFAULT_QUAD_POINTS)
    p.add_argument("--bins", help="'quartiles' or comma-separated cut points for continuous covariates")
    p.add_argument("--tau2", choices=("intercept_only", "zero"), default="intercept_only",
                   help="between-cluster covariance for meta_mv")
    p.add_argument("--pool", choices=("reml", "mom"), default="reml", help="variance estimator for pooling")
    p.add_argument("--centre", action="store_true", help="centre covariates before per-cluster fits")
    p.add_argument("--estimates", help="write per-cluster estimates CSV (meta methods)")
    p.add_argument("--from-estimates", help="pool an existing per-cluster estimates CSV")
    p.add_argument("--target-fraction", type=float, default=0.1)
    p.add_argument("--step-fraction", type=float, default=0.25)
    p.add_argument("--n0", type=int, help="initial random sample size")
    p.add_argument("--levels", help="design levels, e.g. 'time=1:19;case=0,1'")
    p.add_argument("--exclusive", action="append", help="comma-separated mutually exclusive indicators")
    p.add_argument("--grid", choices=("product", "observed"), default="product",
                   help="design grid when --levels is not given")
    p.add_argument("--history", help="subsample history CSV path")
    p.add_argument("--fitted", help="write per-row fitted values CSV")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tallmixed", description="Mixed-effects regression for tall clustered data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("shape", choices=("itsa", "consults"))
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--j", type=int, default=50)
    p.add_argument("--tau2", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--beta", help="comma-separated coefficients (intercept first)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="output prefix (default: the shape name)")

    p = sub.add_parser("fit", help="fit by one method and write a JSON result")
    _add_model_args(p)
    p.add_argument("--method", choices=METHODS, default="full")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="fit several methods and write a CSV report")
    _add_model_args(p)
    p.add_argument("--methods", required=True, help="comma-separated method names")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("collapse", help="collapse replicated rows into a weighted CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--bins")
    p.add_argument("--out", required=True)

    p = sub.add_parser("designs", help="enumerate a design grid")
    p.add_argument("--preset", choices=sorted(PRESET_LEVELS))
    p.add_argument("--levels")
    p.add_argument("--exclusive", action="append")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--out")
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "compare": cmd_compare,
            "collapse": cmd_collapse, "designs": cmd_designs}


def main(argv: Sequence[str] | None = None) -> int:
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, out)
        out.commit()
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (SchemaError, DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except (QuadratureError, RankDeficientError, _meta.MetaError, _sub.SubsampleError,
            _sub.PoolExhausted, linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    out.discard()
    return code


if __name__ == "__main__":
    sys.exit(main())
