"""Command-line entry point: ``epreliab <command> ...``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical
non-convergence (reports are still written), 4 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import EventLog, EventLogError, ModelParams, ModuleRef, SystemTopology, TopologyError, validate_topology
from .estimation import FitConfig, fit
from .evaluation import BENCHMARKS, fit_benchmark, mae, predict_benchmark, predict_count
from .experiments import (INJECTION_R, NUMERICAL_K, NUMERICAL_PARAMS, NUMERICAL_R, NUMERICAL_T,
                          NUMERICAL_TOPOLOGY, PREDICTION_METHODS, SCENARIOS, INJECTION_PARAMS,
                          INJECTION_TAU, INJECTION_DTAU, SelectionSpec, fit_replications, injection_study,
                          scaled_replications, select_k, simulate_replications, study_fit_config, summarize)
from .intensity import IntervalError
from .io import (InputError, atomic_write_text, dump_json, field, format_event_csv, load_json,
                 params_from_doc, read_event_csv, topology_from_doc, topology_to_doc)
from .selection import stepwise_select_k
from .simulate import InjectionSchedule, SimConfig

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "EPRELIAB_SEED"

log = logging.getLogger("epreliab")


def build_id() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def resolve_seed(cli_seed: int | None, config_seed: int | None) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(config_seed or 0)


def _envelope(command: str, seed: int | None, config: dict) -> dict:
    return {"command": command, "build": build_id(), "seed": seed, "config": config}


def _params_doc(p: ModelParams) -> dict:
    return p.to_dict()


def _fmt(x: float) -> str:
    return repr(float(x))


def _plot_csv(rows) -> str:
    """Plot-ready long format: x,series,y."""
    return "x,series,y\n" + "".join(f"{x},{s},{_fmt(y)}\n" for x, s, y in rows)


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- simulate

def _schedules(doc: dict, topology: SystemTopology) -> list[InjectionSchedule] | str:
    raw = doc.get("injections")
    if not raw:
        return "hpp"
    out = []
    for i, item in enumerate(raw):
        where = f"config.injections[{i}]"
        try:
            out.append(InjectionSchedule(ModuleRef.parse(str(field(item, "module", where=where))),
                                         tuple(tuple(x) for x in field(item, "intervals", where=where)),
                                         float(field(item, "probability", where=where)),
                                         float(item.get("tick_rate", 20.0))))
        except (TypeError, ValueError) as exc:
            raise InputError(f"{where}: {exc}") from None
    return out


def cmd_simulate(args) -> int:
    doc = load_json(args.config)
    topo = topology_from_doc(doc)
    params = params_from_doc(doc, topo)
    T = field(doc, "window_length", float)
    R = int(args.replications if args.replications is not None else field(doc, "replications", int, 1))
    if R < 1:
        raise InputError("config: field 'replications' must be >= 1")
    seed = resolve_seed(args.seed, doc.get("seed"))
    try:
        cfg = SimConfig(topo, params, T, seed, _schedules(doc, topo))
    except ValueError as exc:
        raise InputError(f"config: {exc}") from None
    logs = simulate_replications(cfg, R, args.jobs)
    out = Path(args.output)
    if args.combined:
        atomic_write_text(out, format_event_csv(dict(enumerate(logs))))
        files = [str(out)]
    else:
        _mkdir(out)
        files = []
        for r, lg in enumerate(logs):
            p = out / f"events_r{r:04d}.csv"
            atomic_write_text(p, format_event_csv({r: lg}))
            files.append(str(p))
        dump_json(out / "manifest.json", {**_envelope("simulate", seed, {
            "topology": topology_to_doc(topo), "params": _params_doc(params), "window_length": T,
            "replications": R, "injections": doc.get("injections", [])}), "files": files})
    log.info("wrote %d replication(s) to %s", R, out)
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _load_events(path, window) -> dict[int, EventLog]:
    return read_event_csv(path, window)


def _init_arg(value: str, topo: SystemTopology):
    if value == "default":
        return "default"
    doc = load_json(value)
    p = params_from_doc(doc, topo, where=str(value)) if "params" in doc else ModelParams.from_dict(doc)
    bad = validate_topology(topo, p)
    if not bad.ok:
        raise InputError(f"{value}: " + "; ".join(bad.violations))
    return p


def cmd_fit(args) -> int:
    topo = topology_from_doc(load_json(args.topology), where=str(args.topology))
    logs = _load_events(args.events, args.window)
    if args.replication is not None:
        if args.replication not in logs:
            raise InputError(f"{args.events}: no replication {args.replication}")
        logs = {args.replication: logs[args.replication]}
    try:
        cfg = FitConfig(K=args.k, max_iterations=args.max_iter, tolerance=args.tol,
                        init=_init_arg(args.init, topo), keep_posterior=False)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    fits = {}
    for r, lg in logs.items():
        rep = fit(lg, topo, cfg)
        fits[str(r)] = {**rep.to_dict(), "events": {str(m): lg.count(m) for m in topo.modules()}}
    config = {"events": str(args.events), "topology": topology_to_doc(topo), "K": args.k,
              "tolerance": args.tol, "max_iterations": args.max_iter, "init": args.init}
    dump_json(args.output, {**_envelope("fit", None, config), "fits": fits})
    bad = [r for r, f in fits.items() if not f["converged"]]
    if bad:
        log.warning("no convergence for replication(s) %s within %d iterations", ", ".join(bad), args.max_iter)
        return EXIT_NONCONVERGED
    return EXIT_OK


# ---------------------------------------------------------------- select-k

def selection_spec_from_doc(doc: dict, seed: int) -> SelectionSpec:
    topo = topology_from_doc(doc)
    params = params_from_doc(doc, topo)
    bad = validate_topology(topo, params)
    if not bad.ok:
        raise InputError("config: " + "; ".join(bad.violations))
    cands = tuple(int(k) for k in field(doc, "candidates", list, [1, 2, 5, 10, 20, 50]))
    R = field(doc, "replications", int)
    if R < 2:
        raise InputError(f"config: field 'replications' must be at least 2, got {R}")
    return SelectionSpec(topo, params, field(doc, "window_length", float), R, seed, cands,
                         field(doc, "alpha", float, 0.05), field(doc, "tolerance", float, 1e-9),
                         field(doc, "max_iterations", int, 5000))


def cmd_select_k(args) -> int:
    doc = load_json(args.spec)
    seed = resolve_seed(args.seed, doc.get("seed"))
    spec = selection_spec_from_doc(doc, seed)
    try:
        K_star, report, scores = select_k(spec, args.jobs)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    config = {"topology": topology_to_doc(spec.topology), "params": _params_doc(spec.params),
              "window_length": spec.window_length, "replications": spec.R, "candidates": list(spec.candidates),
              "alpha": spec.alpha, "tolerance": spec.tolerance, "max_iterations": spec.max_iterations}
    dump_json(args.output, {**_envelope("select-k", seed, config), **report.to_dict(),
                            "d_star": spec.window_length / K_star,
                            "rrmse": {str(k): v.tolist() for k, v in scores.items()}})
    print(f"K* = {K_star}")
    return EXIT_OK


# ---------------------------------------------------------------- predict / evaluate

def _check_horizon(tau: float, dtau: float, T: float) -> None:
    if dtau < 0:
        raise InputError(f"--dtau must be nonnegative, got {dtau}")
    if tau < 0 or tau + dtau > T:
        raise InputError(f"horizon [{tau}, {tau + dtau}) is outside the observation window [0, {T})")


def cmd_predict(args) -> int:
    logs = _load_events(args.events, args.window)
    rows = []
    if args.fit_report:
        report = load_json(args.fit_report)
        fits = field(report, "fits", dict, where=str(args.fit_report))
    for r, lg in logs.items():
        _check_horizon(args.tau, args.dtau, lg.window_length)
        past = lg.truncate(args.tau)
        horizon = (args.tau, args.tau + args.dtau)
        if args.fit_report:
            if str(r) not in fits:
                raise InputError(f"{args.fit_report}: no fit for replication {r}")
            est = ModelParams.from_dict(fits[str(r)]["estimates"])
            modules = sorted(est.lambda0)
        else:
            modules = lg.modules()
        for m in modules:
            if args.fit_report:
                src = lg if args.upstream == "observed" else past
                pred = predict_count(est, m, src, horizon, upstream=args.upstream)
            else:
                pred = predict_benchmark(fit_benchmark(args.benchmark, past[m], args.tau).params, horizon)
            actual = lg.between(m, *horizon).size
            rows.append({"replication": r, "module": str(m), "predicted": pred, "actual": actual,
                         "abs_error": abs(actual - pred)})
    per_module = {}
    for m in sorted({row["module"] for row in rows}):
        sel = [row for row in rows if row["module"] == m]
        per_module[m] = mae([x["actual"] for x in sel], [x["predicted"] for x in sel])
    config = {"events": str(args.events), "tau": args.tau, "dtau": args.dtau,
              "method": args.benchmark or "ep", "upstream": args.upstream, "fit_report": args.fit_report}
    dump_json(args.output, {**_envelope("predict", None, config), "predictions": rows, "mae": per_module})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiments import prediction_cell
    topo = topology_from_doc(load_json(args.topology), where=str(args.topology))
    logs = _load_events(args.events, args.window)
    cells = {}
    for r, lg in logs.items():
        _check_horizon(args.tau, args.dtau, lg.window_length)
        cells[r] = prediction_cell(lg.conform(topo), topo, args.tau, args.dtau, args.k, args.tol)
    table = {}
    for m in topo.modules():
        if m.stage < 2:
            continue
        actual = [cells[r][m]["actual"] for r in cells]
        table[str(m)] = {meth: mae(actual, [cells[r][m][meth] for r in cells]) for meth in PREDICTION_METHODS}
    config = {"events": str(args.events), "topology": topology_to_doc(topo), "tau": args.tau,
              "dtau": args.dtau, "K": args.k, "tolerance": args.tol}
    cells_doc = {str(r): {str(m): v for m, v in c.items()} for r, c in cells.items()}
    dump_json(args.output, {**_envelope("evaluate", None, config), "mae": table, "cells": cells_doc})
    for m, row in table.items():
        print(m, " ".join(f"{k}={v:.3f}" for k, v in row.items()))
    return EXIT_OK


# ---------------------------------------------------------------- reproduce

def _reproduce_numerical(args, out: Path, seed: int) -> dict:
    R = scaled_replications(NUMERICAL_R, args.scale)
    Ts = tuple(args.T) if args.T else NUMERICAL_T
    Ks = tuple(args.K) if args.K else NUMERICAL_K
    if Ks[0] != 1:
        Ks = (1,) + tuple(k for k in Ks if k != 1)
    topo, truth = NUMERICAL_TOPOLOGY, NUMERICAL_PARAMS
    mrrmse_rows, time_rows, failures, selections = [], [], [], {}
    table_lines = ["T,method,K,parameter,mean,sd"]
    for T in Ts:
        logs = simulate_replications(SimConfig(topo, truth, T, seed), R, args.jobs)
        scores = {}
        for K in Ks:
            if K > 1 and T / K <= 0:
                continue
            try:
                reports = fit_replications(logs, topo, study_fit_config(K), args.jobs)
            except Exception as exc:  # recorded per cell; the bundle is still written
                failures.append({"T": T, "K": K, "error": str(exc)})
                continue
            s = summarize(reports, truth, topo)
            scores[K] = s.rrmse
            method = "EM" if K == 1 else "CLEM"
            for lab, mu, sd in zip(s.labels, s.mean, s.sd):
                table_lines.append(f"{T!r},{method},{K},{lab},{_fmt(mu)},{_fmt(sd)}")
            mrrmse_rows.append((K, f"T={T:g}", s.mrrmse))
            time_rows.append((K, f"T={T:g}", float(np.mean(s.elapsed))))
            log.info("T=%g K=%d MRRMSE=%.4f mean time %.3fs", T, K, s.mrrmse, np.mean(s.elapsed))
        ks = [k for k in Ks if k in scores]
        if len(ks) >= 2:
            K_star, rep = stepwise_select_k(ks, lambda K, R_: scores[K], R)
            selections[f"{T:g}"] = {**rep.to_dict(), "d_star": T / K_star}
    atomic_write_text(out / "estimates.csv", "\n".join(table_lines) + "\n")
    atomic_write_text(out / "mrrmse.csv", _plot_csv(mrrmse_rows))
    atomic_write_text(out / "runtime.csv", _plot_csv(time_rows))
    dump_json(out / "selection.json", {"selections": selections})
    return {"R": R, "T": list(Ts), "K": list(Ks), "failures": failures, "selections": selections}


def _reproduce_injection(args, out: Path, seed: int) -> dict:
    R = scaled_replications(INJECTION_R, args.scale)
    rows, results, failures = [], {}, []
    for label in SCENARIOS:
        try:
            res = injection_study(label, R, seed, K=args.k, jobs=args.jobs)
        except Exception as exc:
            failures.append({"scenario": label, "error": str(exc)})
            continue
        results[label] = {"actual_mean": res["actual_mean"], "mae": res["mae"]}
        rows.extend((label, meth, v) for meth, v in res["mae"].items())
        log.info("%s %s", label, " ".join(f"{k}={v:.2f}" for k, v in res["mae"].items()))
    atomic_write_text(out / "mae.csv", _plot_csv(rows))
    scen = {k: {"condition": c, "p_2d": p2, "p_3d": p3, "intervals": [list(s) for s in sp]}
            for k, (c, p2, p3, sp) in SCENARIOS.items()}
    return {"R": R, "tau": INJECTION_TAU, "dtau": INJECTION_DTAU, "K": args.k,
            "downstream_params": _params_doc(INJECTION_PARAMS), "scenarios": scen,
            "results": results, "failures": failures}


def cmd_reproduce(args) -> int:
    try:
        scaled_replications(NUMERICAL_R if args.study == "numerical" else INJECTION_R, args.scale)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    seed = resolve_seed(args.seed, 0)
    out = _mkdir(Path(args.out))
    body = _reproduce_numerical(args, out, seed) if args.study == "numerical" else _reproduce_injection(args, out, seed)
    dump_json(out / "report.json", {**_envelope("reproduce", seed, {"study": args.study, "scale": args.scale}),
                                    **body})
    print(f"wrote {args.study} bundle to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epreliab", description="Error-propagation reliability modelling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate event logs from a JSON config")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True, help="output directory (or file with --combined)")
    s.add_argument("--seed", type=int)
    s.add_argument("--replications", type=int)
    s.add_argument("--combined", action="store_true", help="write all replications to one CSV")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the propagation model by EM (--k 1) or composite-likelihood EM")
    f.add_argument("events")
    f.add_argument("topology", help="JSON document with a 'topology' field")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--k", type=int, default=1, help="number of sub-windows; 1 is full-likelihood EM")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--init", default="default", help="'default' or a JSON parameter file")
    f.add_argument("--window", type=float, help="window length when the CSV does not carry it")
    f.add_argument("--replication", type=int)
    f.set_defaults(func=cmd_fit)

    k = sub.add_parser("select-k", help="stepwise Friedman selection of the sub-window count")
    k.add_argument("spec")
    k.add_argument("-o", "--output", required=True)
    k.add_argument("--seed", type=int)
    k.add_argument("--jobs", type=int, default=1)
    k.set_defaults(func=cmd_select_k)

    pr = sub.add_parser("predict", help="predict event counts over [tau, tau + dtau)")
    pr.add_argument("events")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--fit-report")
    src.add_argument("--benchmark", choices=BENCHMARKS)
    pr.add_argument("--tau", type=float, required=True)
    pr.add_argument("--dtau", type=float, required=True)
    pr.add_argument("--upstream", choices=("frozen", "observed"), default="frozen")
    pr.add_argument("--window", type=float)
    pr.add_argument("-o", "--output", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="fit all methods on [0, tau) and report prediction MAE")
    e.add_argument("events")
    e.add_argument("topology")
    e.add_argument("--tau", type=float, required=True)
    e.add_argument("--dtau", type=float, required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--tol", type=float, default=1e-6)
    e.add_argument("--window", type=float)
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reproduce", help="rerun the numerical or injection study")
    r.add_argument("study", choices=("numerical", "injection"))
    r.add_argument("--scale", type=float, default=0.3, help="fraction of the reference replication count")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--T", type=float, nargs="+", help="override the window lengths (numerical)")
    r.add_argument("--K", type=int, nargs="+", help="override the sub-window counts (numerical)")
    r.add_argument("--k", type=int, default=1, help="sub-windows for the propagation fit (injection)")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, EventLogError, TopologyError, IntervalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
