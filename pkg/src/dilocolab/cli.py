"""Command-line entry point: ``dilocolab {train,sweep,fit,cost,report}``.

Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys

from dilocolab import config as cfg
from dilocolab import cost, report
from dilocolab.datasets import eval_loss_rows
from dilocolab.engine import DATA_PARALLEL, DILOCO, DivergenceError, train
from dilocolab.fitting import (
    FitError,
    ObservationSet,
    fit_joint_power_law,
    fit_parametric,
    fit_power_law,
    loo_validate,
)
from dilocolab.store import RunStore
from dilocolab.sweep import config_key, fit_store, observations, run_sweep, summarize

log = logging.getLogger("dilocolab")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


@contextlib.contextmanager
def _out(args):
    if getattr(args, "output", None):
        with open(args.output, "w") as fh:
            yield fh
    else:
        yield sys.stdout


def cmd_train(args) -> int:
    cp = cfg.read_config(args.config, args.set)
    run = cfg.run_config(cp)
    store = RunStore(args.store or cfg.store_path(cp))
    key = config_key(run)
    if key in store and not args.force:
        log.info("run %s already stored; skipping (use --force to rerun)", key)
        return EXIT_OK
    try:
        rec = train(run)
    except DivergenceError as exc:
        store.add(exc.record, force=args.force)
        log.error("training diverged: %s", exc)
        return EXIT_NUMERIC
    store.add(rec, force=args.force)
    print(json.dumps({"key": list(key), "steps": rec.steps, "tokens": rec.tokens, "final_loss": rec.final_loss}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cp = cfg.read_config(args.config, args.set)
    spec = cfg.sweep_spec(cp)
    store = RunStore(args.store or cfg.store_path(cp))
    records = run_sweep(spec, store, workers=args.workers, force=args.force)
    rows = []
    for e in summarize(records):
        r = e.record
        rows.append((e.algorithm, e.n, e.m, r.h, r.b, r.inner_lr, r.outer_lr, e.loss, ";".join(e.boundary)))
    with _out(args) as fh:
        report.write_table(
            ["algorithm", "n", "m", "h", "batch", "inner_lr", "outer_lr", "loss", "boundary_warning"], rows, fh
        )
    return EXIT_OK


def _bundled_obs(algorithm):
    rows = [r for r in eval_loss_rows() if r["algorithm"] == algorithm]
    return ObservationSet.from_rows([(r["n"], r["m"], r["loss"]) for r in rows])


def _obs(args, algorithm, quantity="loss"):
    if args.dataset == "bundled":
        if quantity != "loss":
            raise ValueError("the bundled table only holds losses")
        return _bundled_obs(algorithm)
    if args.dataset.startswith("store:"):
        return observations(RunStore(args.dataset[6:]).records(), algorithm, quantity)
    raise ValueError(f"dataset must be 'bundled' or 'store:PATH', got {args.dataset!r}")


def cmd_fit(args) -> int:
    kind = args.kind
    if kind == "store":
        if not args.dataset.startswith("store:"):
            raise ValueError("--kind store needs --dataset store:PATH")
        result = fit_store(RunStore(args.dataset[6:]).records())
        with _out(args) as fh:
            json.dump(result, fh, indent=2)
            fh.write("\n")
        return EXIT_OK

    obs = _obs(args, args.algorithm, args.quantity)
    if args.m is not None:
        obs = obs.with_m(args.m)
    if kind == "power-law":
        fit = fit_power_law(obs)
        result = {"kind": kind, "a": fit.a, "alpha": fit.alpha, "rms_log_residual": fit.rms_log_residual}
    elif kind == "joint":
        fit = fit_joint_power_law(obs)
        result = {"kind": kind, "a": fit.a, "alpha": fit.alpha, "beta": fit.beta,
                  "rms_log_residual": fit.rms_log_residual}
    elif kind == "loo":
        rows = []
        for fk in ("independent", "joint") if obs.has_m else ("independent",):
            res = loo_validate(obs, args.held_n, fk)
            rows += [(m, fk, v, p, r) for m, v, p, r in res.rows]
            rows.append(("avg", fk, None, None, res.average))
        with _out(args) as fh:
            report.write_table(["m", "fit", "observed", "predicted", "residual"], rows, fh)
        return EXIT_OK
    elif kind == "parametric":
        held = obs.n == obs.n.max() if args.held_n is None else abs(obs.n - args.held_n) <= 1e-9 * args.held_n
        train_set, hold = obs.select(~held), obs.select(held)
        rows = []
        forms = [args.form] if args.form else [1, 2, 3, 4]
        for form in forms:
            fit = fit_parametric(form, train_set, hold, restarts=args.restarts, delta=args.delta,
                                 seed=args.seed, workers=args.workers)
            rows.append((form, fit.expression, fit.heldout_avg_residual, json.dumps(fit.params, sort_keys=True)))
        with _out(args) as fh:
            report.write_table(["form", "expression", "avg_residual", "params"], rows, fh)
        return EXIT_OK
    else:
        raise ValueError(f"unknown fit kind {kind!r}")
    with _out(args) as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def cost_rows(sc: dict) -> list[tuple]:
    """Bandwidth (Gbit/s) needed per method and utilization target."""
    within = cost.ARCHETYPES[sc["within"]] if sc["include_within"] else None
    if sc["mode"] == "step_time":
        step = sc["step_time_s"]
    else:
        hw = cost.HardwareProfile(sc["chips"], sc["flops_per_chip"], int(sc["bits"]))
        step = cost.compute_time(sc["n"], sc["batch_tokens"], hw)
    methods = [cost.Algo(DATA_PARALLEL)] + [
        cost.Algo(DILOCO, sc["replicas"], h) for h in sc["cadences"]
    ]
    rows = []
    for algo in methods:
        row = [algo.label, step]
        for target in sc["targets"]:
            try:
                w = cost.required_bandwidth(
                    target, step, algo, sc["n"], sc["bits"], sc["chips"], sc["cross_latency"], within, sc["snap"]
                )
                row.append(w / cost.GBIT)
            except cost.InfeasibleTarget:
                row.append("infeasible")
        rows.append(tuple(row))
    return rows


def cmd_cost(args) -> int:
    sc = cfg.scenario(cfg.read_config(args.scenario, args.set))
    rows = cost_rows(sc)
    cols = ["method", "step_time_s"] + [f"cu_{round(100 * t)}" for t in sc["targets"]]
    with _out(args) as fh:
        report.write_table(cols, rows, fh)
        if sc["mode"] == "flops":
            hw = cost.HardwareProfile(sc["chips"], sc["flops_per_chip"], int(sc["bits"]))
            steps = sc["tokens"] / sc["batch_tokens"]
            wall = []
            for net_name, net in cost.ARCHETYPES.items():
                for algo in [cost.Algo(DATA_PARALLEL)] + [cost.Algo(DILOCO, sc["replicas"], h) for h in sc["cadences"]]:
                    b = cost.wallclock(algo, sc["n"], sc["tokens"], steps, hw, cost.ARCHETYPES[sc["within"]], net)
                    wall.append((net_name, algo.label, b.compute_s, b.comm_inner_s, b.comm_outer_s, b.total_s,
                                 b.utilization))
            report.write_table(
                ["cross_network", "method", "compute_s", "comm_inner_s", "comm_outer_s", "total_s", "utilization"],
                wall, fh,
            )
    return EXIT_OK


def cmd_report(args) -> int:
    if args.source == "bundled":
        rows = eval_loss_rows()
        records = None
    elif args.source.startswith("store:"):
        records = RunStore(args.source[6:]).records()
        rows = report.store_loss_rows(records)
    else:
        raise ValueError("source must be 'bundled' or 'store:PATH'")
    if args.figure == "pct-diff":
        series = report.pct_difference_series(rows, args.m)
    elif args.figure == "outer-lr":
        if records is None:
            raise ValueError("outer-lr report needs a run store")
        series = report.outer_lr_series(records, args.m)
    else:
        raise ValueError(f"unknown figure {args.figure!r}")
    if not series:
        log.warning("report is empty")
    with _out(args) as fh:
        report.write_table(["x", "y", "series"], series, fh)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dilocolab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("config")
    t.add_argument("--store")
    t.add_argument("--force", action="store_true")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a hyperparameter grid")
    s.add_argument("config")
    s.add_argument("--store")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--force", action="store_true")
    s.add_argument("--output")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fit", help="fit scaling laws")
    f.add_argument("--dataset", default="bundled", help="'bundled' or 'store:PATH'")
    f.add_argument("--kind", default="power-law", choices=["power-law", "joint", "loo", "parametric", "store"])
    f.add_argument("--algorithm", default=DATA_PARALLEL, choices=[DATA_PARALLEL, DILOCO])
    f.add_argument("--quantity", default="loss", choices=["loss", "lr", "batch"])
    f.add_argument("--m", type=int)
    f.add_argument("--held-n", type=float)
    f.add_argument("--form", type=int, choices=[1, 2, 3, 4])
    f.add_argument("--restarts", type=int, default=256)
    f.add_argument("--delta", type=float, default=1e-3)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--output")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cost", help="bandwidth needed per utilization target")
    c.add_argument("scenario")
    c.add_argument("--output")
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    c.set_defaults(func=cmd_cost)

    r = sub.add_parser("report", help="emit plot-data series")
    r.add_argument("--source", default="bundled", help="'bundled' or 'store:PATH'")
    r.add_argument("--figure", default="pct-diff", choices=["pct-diff", "outer-lr"])
    r.add_argument("--m", type=int, nargs="*")
    r.add_argument("--output")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "fit" and args.kind == "loo" and args.held_n is None:
        parser.error("--kind loo needs --held-n")
    try:
        return args.func(args)
    except (DivergenceError, FitError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
