"""INI-style configuration files for runs, sweeps and cost scenarios.

Sections ``[run]``, ``[objective]`` and ``[engine]`` describe a training
run; ``[sweep]`` adds grids; ``[scenario]`` describes a cost report. Any
key can be overridden from the command line with ``section.key=value``.
"""

from __future__ import annotations

import configparser
from typing import Iterable

from dilocolab.engine import Hyperparams, RunConfig
from dilocolab.objectives import make_objective
from dilocolab.sweep import SweepSpec

ENGINE_INT = {"global_batch", "replicas", "cadence", "warmup_steps"}
ENGINE_FLOAT = {
    "inner_lr", "outer_lr", "beta1", "beta2", "eps", "final_lr_frac", "clip_norm", "weight_decay", "outer_momentum",
}

EXAMPLE_RUN = """\
[run]
# data-parallel | diloco
algorithm = diloco
seed = 0
# token (sample) budget is 20 * N * overtrain_lambda, N = objective dimension
overtrain_lambda = 16
eval_count = 1024
# re-partition one global batch per step instead of fixed per-replica streams
repartition = false
workers = 1

[objective]
# quadratic | mlp
kind = quadratic
dim = 16
sigma = 1.0
condition = 100

[engine]
inner_lr = 0.05
outer_lr = 0.8
global_batch = 8
replicas = 2
cadence = 30
beta1 = 0.9
beta2 = 0.99
warmup_steps = 20
final_lr_frac = 0.05
clip_norm = 1.0
# blank means 1/T
weight_decay =
outer_momentum = 0.9

[store]
path = runs.jsonl
"""


def read_config(path, overrides: Iterable[str] = ()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    with open(path) as fh:
        cp.read_file(fh)
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ValueError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, value)
    return cp


def _section(cp, name):
    return {k: v for k, v in cp.items(name)} if cp.has_section(name) else {}


def _numbers(text, cast=float):
    return tuple(cast(x) for x in text.replace(",", " ").split())


def _objective(cp):
    params = _section(cp, "objective")
    kind = params.pop("kind", "quadratic")
    return kind, params


def hyperparams(section: dict, **extra) -> dict:
    out = {}
    for key, raw in section.items():
        if key in ENGINE_INT:
            out[key] = int(float(raw))
        elif key in ENGINE_FLOAT:
            out[key] = None if raw.strip() == "" else float(raw)
        else:
            raise ValueError(f"unknown [engine] key {key!r}")
    out.update(extra)
    return out


def run_config(cp) -> RunConfig:
    run = _section(cp, "run")
    kind, params = _objective(cp)
    engine = hyperparams(_section(cp, "engine"))
    if "inner_lr" not in engine or "global_batch" not in engine:
        raise ValueError("[engine] needs inner_lr and global_batch")
    algorithm = run.get("algorithm", "diloco")
    if algorithm == "data-parallel":
        engine["replicas"] = 1
    return RunConfig(
        objective=make_objective(kind, **params),
        hp=Hyperparams(**engine),
        algorithm=algorithm,
        seed=int(run.get("seed", 0)),
        overtrain_lambda=float(run.get("overtrain_lambda", 1.0)),
        tokens=int(float(run["tokens"])) if run.get("tokens") else None,
        eval_every=int(run["eval_every"]) if run.get("eval_every") else None,
        eval_count=int(run.get("eval_count", 1024)),
        repartition=run.get("repartition", "false").lower() in ("1", "true", "yes"),
        workers=int(run.get("workers", 1)),
        objective_spec={"kind": kind, **params},
    )


def sweep_spec(cp) -> SweepSpec:
    sw = _section(cp, "sweep")
    kind, params = _objective(cp)
    params.pop("dim", None)
    base = hyperparams(_section(cp, "engine"))
    for key in ("inner_lr", "outer_lr", "global_batch", "replicas"):
        base.pop(key, None)
    kwargs = dict(objective=kind, objective_params=params, base=base)
    ints = {"dims", "replicas", "cadences", "lr_exponents", "batch_exponents", "seeds"}
    for key, raw in sw.items():
        if key == "algorithms":
            kwargs[key] = tuple(x.strip() for x in raw.split(",") if x.strip())
        elif key in ints:
            kwargs[key] = _numbers(raw, int)
        elif key == "outer_lrs":
            kwargs[key] = _numbers(raw)
        elif key in ("overtrain_lambda",):
            kwargs[key] = float(raw)
        elif key == "eval_count":
            kwargs[key] = int(raw)
        else:
            raise ValueError(f"unknown [sweep] key {key!r}")
    return SweepSpec(**kwargs)


def store_path(cp, default="runs.jsonl") -> str:
    return _section(cp, "store").get("path", default)


def scenario(cp) -> dict:
    sc = _section(cp, "scenario")
    if not sc:
        raise ValueError("scenario file needs a [scenario] section")
    out = {
        "name": sc.get("name", "scenario"),
        "mode": sc.get("mode", "step_time"),
        "n": float(sc["n"]),
        "bits": float(sc.get("bits", 16)),
        "chips": int(float(sc.get("chips", 1024))),
        "flops_per_chip": float(sc.get("flops_per_chip", 3e14)),
        "replicas": int(sc.get("replicas", 2)),
        "cadences": _numbers(sc.get("cadences", "1 10 50 100 300"), int),
        "targets": _numbers(sc.get("targets", "0.5 0.8 0.9 0.95 0.99")),
        "cross_latency": float(sc.get("cross_latency", 0.0)),
        "include_within": sc.get("include_within", "false").lower() in ("1", "true", "yes"),
        "within": sc.get("within", "high"),
        "cross": sc.get("cross", "low"),
        "snap": sc.get("snap", "false").lower() in ("1", "true", "yes"),
    }
    if out["mode"] == "step_time":
        out["step_time_s"] = float(sc["step_time_s"])
    elif out["mode"] == "flops":
        out["batch_tokens"] = float(sc["batch_tokens"])
        out["tokens"] = float(sc.get("tokens", 20 * out["n"]))
    else:
        raise ValueError(f"unknown scenario mode {out['mode']!r}")
    return out
