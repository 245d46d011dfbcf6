"""Grid sweeps over training hyperparameters and best-run summaries."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

from dilocolab.engine import DATA_PARALLEL, DILOCO, DivergenceError, Hyperparams, RunConfig, RunRecord, train
from dilocolab.fitting import FitError, ObservationSet, fit_joint_power_law, fit_power_law, optimal_batch
from dilocolab.objectives import make_objective
from dilocolab.store import RunStore

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


@dataclass
class SweepSpec:
    algorithms: tuple = (DATA_PARALLEL, DILOCO)
    dims: tuple = (16,)
    replicas: tuple = (1, 2, 4, 8)
    cadences: tuple = (30,)
    lr_exponents: tuple = (-6, -4, -2)  # inner lr = sqrt(2) ** k
    batch_exponents: tuple = (3, 4, 5)  # batch = 2 ** k
    outer_lrs: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    seeds: tuple = (0,)
    objective: str = "quadratic"
    objective_params: dict = field(default_factory=dict)
    overtrain_lambda: float = 1.0
    base: dict = field(default_factory=dict)  # extra Hyperparams fields
    eval_count: int = 1024

    def __post_init__(self):
        for name in ("algorithms", "dims", "lr_exponents", "batch_exponents", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid {name!r} is empty")
        if DILOCO in self.algorithms and not (self.replicas and self.cadences and self.outer_lrs):
            raise ValueError("DiLoCo sweeps need replicas, cadences and outer learning rates")
        for k, m in product(self.batch_exponents, self.replicas if DILOCO in self.algorithms else (1,)):
            if (2**k) % m:
                raise ValueError(f"batch 2**{k} not divisible by M={m}")

    @property
    def inner_lrs(self) -> list[float]:
        return [SQRT2**k for k in self.lr_exponents]

    @property
    def batches(self) -> list[int]:
        return [2**k for k in self.batch_exponents]

    def configs(self) -> list[RunConfig]:
        out = []
        for algo, dim, seed in product(self.algorithms, self.dims, self.seeds):
            obj = make_objective(self.objective, dim=dim, **self.objective_params)
            if algo == DATA_PARALLEL:
                grid = product([1], [self.base.get("cadence", 30)], [1.0])
            else:
                grid = product(self.replicas, self.cadences, self.outer_lrs)
            for (m, h, eta), b, lr in product(list(grid), self.batches, self.inner_lrs):
                hp = Hyperparams(inner_lr=lr, global_batch=b, outer_lr=eta, replicas=m, cadence=h, **{
                    k: v for k, v in self.base.items() if k != "cadence"
                })
                out.append(
                    RunConfig(
                        objective=obj,
                        hp=hp,
                        algorithm=algo,
                        seed=seed,
                        overtrain_lambda=self.overtrain_lambda,
                        eval_count=self.eval_count,
                        objective_spec={"kind": self.objective, "dim": dim, **self.objective_params},
                    )
                )
        return out


def config_key(config: RunConfig) -> tuple:
    hp = config.hp
    diloco = config.algorithm == DILOCO
    return (
        config.algorithm,
        config.n,
        hp.replicas,
        hp.cadence if diloco else None,
        hp.global_batch,
        hp.inner_lr,
        hp.outer_lr if diloco else None,
        config.seed,
    )


def run_one(config: RunConfig) -> RunRecord:
    """Train, turning a divergence into a stored diagnostic record."""
    try:
        return train(config)
    except DivergenceError as exc:
        log.warning("run %s diverged: %s", config_key(config), exc)
        rec = exc.record
        rec.status = "diverged"
        rec.final_loss = None
        return rec


def run_sweep(spec: SweepSpec, store: RunStore, workers: int = 1, force: bool = False) -> list[RunRecord]:
    """Run every grid point missing from ``store`` (all of them when forced)."""
    todo = [c for c in spec.configs() if force or config_key(c) not in store]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            for rec in pool.map(run_one, todo):
                store.add(rec, force=force)
    else:
        for c in todo:
            store.add(run_one(c), force=force)
    return store.records()


@dataclass
class BestEntry:
    algorithm: str
    n: int
    m: int
    record: RunRecord
    boundary: list  # names of hyperparameters whose optimum sits on a grid edge

    @property
    def loss(self) -> float:
        return self.record.final_loss


def _ok(records):
    return [r for r in records if r.status == "ok" and r.final_loss is not None and math.isfinite(r.final_loss)]


def summarize(records: list[RunRecord]) -> list[BestEntry]:
    """Best run per (algorithm, N, M) with grid-edge warnings."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.algorithm, r.n, r.m), []).append(r)
    out = []
    for (algo, n, m), members in sorted(groups.items()):
        good = _ok(members)
        if not good:
            log.warning("no finished runs for %s N=%s M=%s", algo, n, m)
            continue
        best = min(good, key=lambda r: (r.final_loss, r.b, r.inner_lr, r.outer_lr or 0.0, r.h or 0))
        edges = []
        for name, attr in (("inner_lr", "inner_lr"), ("batch", "b"), ("outer_lr", "outer_lr")):
            values = sorted({getattr(r, attr) for r in members if getattr(r, attr) is not None})
            if len(values) > 1 and getattr(best, attr) in (values[0], values[-1]):
                edges.append(name)
        if edges:
            log.warning("%s N=%s M=%s: optimum on grid edge for %s", algo, n, m, ", ".join(edges))
        out.append(BestEntry(algo, n, m, best, edges))
    return out


def best_batch(members: list[RunRecord]) -> float:
    """Quadratic-vertex batch size; falls back to the grid argmin."""
    per_b: dict[int, float] = {}
    for r in _ok(members):
        per_b[r.b] = min(per_b.get(r.b, math.inf), r.final_loss)
    bs = sorted(per_b)
    try:
        return optimal_batch(bs, [per_b[b] for b in bs])
    except FitError as exc:
        fallback = min(bs, key=lambda b: per_b[b])
        log.warning("batch quadratic failed (%s); using grid argmin %d", exc, fallback)
        return float(fallback)


def observations(records: list[RunRecord], algorithm: str, quantity: str = "loss") -> ObservationSet:
    """Per-(N, M) optimum of ``loss``, ``lr`` or ``batch`` for one algorithm."""
    rows = []
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        if r.algorithm == algorithm:
            groups.setdefault((r.n, r.m), []).append(r)
    for (n, m), members in sorted(groups.items()):
        good = _ok(members)
        if not good:
            continue
        best = min(good, key=lambda r: r.final_loss)
        mm = m if algorithm == DILOCO else None
        if quantity == "loss":
            rows.append((n, mm, best.final_loss))
        elif quantity == "lr":
            rows.append((n, mm, best.inner_lr))
        elif quantity == "batch":
            rows.append((n, mm, best_batch(members)))
        else:
            raise ValueError(f"unknown quantity {quantity!r}")
    return ObservationSet.from_rows(rows, kind=quantity)


def outer_lr_summary(records: list[RunRecord]) -> dict[tuple, float]:
    """Best outer learning rate per (N, M) among DiLoCo runs."""
    return {
        (e.n, e.m): e.record.outer_lr for e in summarize([r for r in records if r.algorithm == DILOCO])
    }


def fit_store(records: list[RunRecord]) -> dict:
    """Independent fits per (algorithm, M) and joint DiLoCo fits for each quantity."""
    report = {"independent": [], "joint": [], "warnings": []}
    for quantity in ("loss", "lr", "batch"):
        for algo in (DATA_PARALLEL, DILOCO):
            obs = observations(records, algo, quantity)
            if not len(obs):
                continue
            groups = obs.replicas() if algo == DILOCO else [None]
            for m in groups:
                sub = obs.with_m(m) if m is not None else obs
                try:
                    fit = fit_power_law(sub)
                except FitError as exc:
                    report["warnings"].append(f"{quantity} {algo} M={m}: {exc}")
                    continue
                report["independent"].append(
                    {"quantity": quantity, "algorithm": algo, "m": m, "a": fit.a, "alpha": fit.alpha,
                     "rms_log_residual": fit.rms_log_residual}
                )
            if algo == DILOCO:
                try:
                    fit = fit_joint_power_law(obs)
                except FitError as exc:
                    report["warnings"].append(f"{quantity} joint: {exc}")
                    continue
                report["joint"].append(
                    {"quantity": quantity, "a": fit.a, "alpha": fit.alpha, "beta": fit.beta,
                     "rms_log_residual": fit.rms_log_residual}
                )
    return report
