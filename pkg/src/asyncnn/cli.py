"""Command-line entry point: ``asyncnn run|sweep|verify|parse-data``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime or solve
error, 3 verification failure. Output directory precedence: ``--out``, then
the ``ASYNCNN_OUT_DIR`` environment variable, then ``[outputs] directory``
(relative to the config file).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
from pathlib import Path
import sys

import numpy as np

from .analysis import (ReferenceSolveError, aggregate_rates, mean_steps_to_epsilon,
                       solve_constrained_reference, solve_reference)
from .config import ConfigError, ExperimentConfig, build_problem, load_config, resolve_probabilities
from .engine import (ActivationSchedule, RunConfig, run_async_newton, run_gossip,
                     run_sync_newton, slow_agent_costs)
from .newton_core import theory_constants
from .objectives import (LibsvmParseError, curvature_constants, load_libsvm, partition_uniform,
                         penalized_value)
from .topology import validate_consensus

log = logging.getLogger("asyncnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
OUT_ENV = "ASYNCNN_OUT_DIR"


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return cfg.resolve(cfg.outputs.directory)


def _fmt(v) -> str:
    return repr(float(v))


def resolve_eps(cfg: ExperimentConfig, tc, p) -> float:
    """Stepsize parameter in the schedule's own convention."""
    if not cfg.eps_auto:
        return float(cfg.run.eps)
    if cfg.schedule.mode == "scaled":
        return tc.eps
    if np.ptp(p) > 1e-15:
        raise ConfigError("run.eps: 'auto' is undefined for uniform_unscaled mode with "
                          "nonuniform probabilities; give a number")
    return tc.eps / p[0]


def _prepare(cfg: ExperimentConfig):
    g, cm, spec = build_problem(cfg)
    rep = validate_consensus(cm, graph=g)
    if not rep.passed:
        raise RuntimeError(f"consensus matrix invalid:\n{rep}")
    p = resolve_probabilities(cfg, spec.n)
    ref = solve_reference(spec)
    gap0 = penalized_value(spec, np.zeros(spec.n * spec.dim)) - ref.F_star
    sched = ActivationSchedule(p, cfg.schedule.mode)
    tc0 = theory_constants(spec.m, spec.M, spec.L, cm.delta, cm.Delta, spec.alpha, p, gap0=gap0)
    eps = resolve_eps(cfg, tc0, p)
    eq = sched.scaled_equivalent_eps(eps)
    tc = theory_constants(spec.m, spec.M, spec.L, cm.delta, cm.Delta, spec.alpha, p,
                          eps=eq if eq is not None else eps, gap0=gap0)
    return spec, cm, p, ref, tc, eps, eq


def _write_aggregate(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "t", "mean_gap", "min_gap", "max_gap", "mean_rel_err", "seeds"])
        for algo, traces in results.items():
            k = min(len(tr) for tr in traces)
            gaps = np.stack([tr.gap[:k] for tr in traces])
            rel = np.stack([tr.rel_err[:k] for tr in traces]).mean(axis=0)
            mean, lo, hi = gaps.mean(axis=0), gaps.min(axis=0), gaps.max(axis=0)
            for j in range(k):
                w.writerow([algo, int(traces[0].t[j]), _fmt(mean[j]), _fmt(lo[j]), _fmt(hi[j]),
                            _fmt(rel[j]), len(traces)])


def _write_plot(out: Path, results):
    algos = list(results)
    series = {}
    for algo, traces in results.items():
        k = min(len(tr) for tr in traces)
        series[algo] = np.stack([tr.rel_err[:k] for tr in traces]).mean(axis=0)
    T = max(s.size for s in series.values())
    with open(out / "plot.dat", "w") as fh:
        fh.write("# t " + " ".join(algos) + "\n")
        for t in range(T):
            vals = [_fmt(series[a][t]) if t < series[a].size else "nan" for a in algos]
            fh.write(f"{t} " + " ".join(vals) + "\n")
    lines = ["set logscale y", "set xlabel 'activations'", "set ylabel 'mean relative error'",
             "plot " + ", ".join(f"'plot.dat' using 1:{k + 2} with lines title '{a}'"
                                 for k, a in enumerate(algos))]
    (out / "plot.gp").write_text("\n".join(lines) + "\n")


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    spec, cm, p, ref, tc, eps, eps_eq = _prepare(cfg)
    r = cfg.run
    costs = slow_agent_costs(spec.n, r.slow_agent, r.slow_factor) if r.slow_agent is not None \
        else None
    sync_eps = {"same": eps, "auto": 1.0}.get(r.sync_eps) or float(r.sync_eps)
    cref = solve_constrained_reference(spec) if "gossip" in r.algorithms else None
    out.mkdir(parents=True, exist_ok=True)
    seeds = [r.seed + k for k in range(r.seeds)]
    write_csv = "csv" in cfg.outputs.formats

    results = {}
    for algo in r.algorithms:
        traces = []
        sync_trace = None
        for s in seeds:
            sched = ActivationSchedule(p, cfg.schedule.mode, s)
            base = dict(spec=spec, schedule=sched, T=r.T, record_every=r.record_every,
                        costs=costs, stop_rel_err=r.stop_rel_err)
            if algo == "async_newton":
                tr = run_async_newton(RunConfig(eps=eps, reference=ref, **base))
            elif algo == "sync_newton":
                # deterministic: one run serves every seed
                if sync_trace is None:
                    sync_trace = run_sync_newton(RunConfig(eps=sync_eps, reference=ref, **base),
                                                 K=r.sync_K)
                tr = sync_trace
            else:
                tr = run_gossip(RunConfig(eps=1.0, reference=cref, **base))
            if write_csv:
                tr.write_csv(out / f"{algo}_seed{s}.csv")
            traces.append(tr)
        results[algo] = traces
        log.info("%s: %d seeds, mean final rel_err %.3e", algo, len(traces),
                 float(np.mean([tr.rel_err[-1] for tr in traces])))

    _write_aggregate(out / "aggregate.csv", results)
    lines = [tc.report().rstrip("\n"),
             f"eps_run = {eps!r}",
             f"eps_mode = {cfg.schedule.mode}",
             f"eps_scaled_equivalent = {eps_eq!r}",
             f"F_star = {ref.F_star!r}",
             f"reference_residual = {ref.solver_residual!r}",
             f"m = {spec.m!r}", f"M = {spec.M!r}", f"L = {spec.L!r}",
             f"delta = {cm.delta!r}", f"Delta = {cm.Delta!r}", f"alpha = {spec.alpha!r}"]
    if cref is not None:
        lines.append(f"F_star_constrained = {cref.F_star!r}")
    if "async_newton" in results and r.seeds >= 30:
        rr = aggregate_rates(results["async_newton"], tc)
        lines += [f"rate.{line}" for line in rr.text().splitlines()]
    (out / "constants.txt").write_text("\n".join(lines) + "\n")
    if "gnuplot" in cfg.outputs.formats:
        _write_plot(out, results)
    log.info("artifacts written to %s", out)
    return EXIT_OK


SWEEP_COLUMNS = ["topology", "n", "status", "mean_steps", "unreached", "seeds", "eps",
                 "eps_as_max", "beta", "rho"]


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    sw = cfg.sweep
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in sw.topologies:
        for n in sw.sizes:
            row = {"topology": kind, "n": n, "seeds": sw.seeds}
            try:
                _, cm, spec = build_problem(cfg, kind=kind, n=n)
                p = resolve_probabilities(cfg, n)
                ref = solve_reference(spec)
                tc = theory_constants(spec.m, spec.M, spec.L, cm.delta, cm.Delta, spec.alpha, p)
                eps = resolve_eps(cfg, tc, p)
                traces = [run_async_newton(RunConfig(
                    spec, ActivationSchedule(p, cfg.schedule.mode, cfg.run.seed + s), eps,
                    sw.T_max, record_every=sw.T_max, reference=ref, stop_rel_err=sw.eps_rel))
                    for s in range(sw.seeds)]
                mean, miss = mean_steps_to_epsilon(traces, sw.eps_rel)
                row.update(status="ok", mean_steps=_fmt(mean), unreached=miss, eps=_fmt(eps),
                           eps_as_max=_fmt(tc.eps_as_max), beta=_fmt(tc.beta), rho=_fmt(tc.rho))
            except Exception as exc:  # recorded per cell; the sweep continues
                row.update(status=f"error: {exc}".replace("\n", " "))
            log.info("%s n=%d: %s", kind, n, row.get("mean_steps", row["status"]))
            rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, restval="", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path | None = None) -> int:
    from .verify import FAIL, run_checks

    results = run_checks(cfg)
    text = "\n".join(r.line() for r in results)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text(text + "\n")
    return EXIT_VERIFY if any(r.status == FAIL for r in results) else EXIT_OK


def cmd_parse_data(path: str, agents: int) -> int:
    ds = load_libsvm(path)
    pos = int(np.sum(ds.labels > 0))
    print(f"samples = {len(ds)}")
    print(f"features = {ds.dim}")
    print(f"positive = {pos}")
    print(f"negative = {len(ds) - pos}")
    if agents <= len(ds):
        m, M, L = curvature_constants(partition_uniform(ds, agents, upsilon=1.0))
        print(f"curvature(n={agents}, upsilon=1) = m {m!r} M {M!r} L {L!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed-override", type=int, default=None,
                        help="replace [run] seed (first seed of the run)")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    common.add_argument("--out", default=None, help="output directory")

    ap = argparse.ArgumentParser(prog="asyncnn",
                                 description="Asynchronous network Newton experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment"), ("sweep", "topology/size sweep"),
                        ("verify", "run the invariant checks")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("config")
    sp = sub.add_parser("parse-data", parents=[common], help="summarize a LIBSVM file")
    sp.add_argument("path")
    sp.add_argument("--agents", type=int, default=5)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "parse-data":
            return cmd_parse_data(args.path, args.agents)
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.with_seed_base(args.seed_override)
        if args.command == "run":
            return cmd_run(cfg, _out_dir(cfg, args.out))
        if args.command == "sweep":
            return cmd_sweep(cfg, _out_dir(cfg, args.out))
        return cmd_verify(cfg, Path(args.out) if args.out else None)
    except (ConfigError, LibsvmParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReferenceSolveError, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
