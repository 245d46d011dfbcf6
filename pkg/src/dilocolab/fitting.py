"""Scaling-law fits: log-linear power laws, batch-size quadratics,
leave-one-out validation and Huber/L-BFGS parametric forms."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize


class FitError(ValueError):
    pass


@dataclass
class ObservationSet:
    """Rows of ``(n, m, value)``; ``m`` is NaN for rows without replicas."""

    n: np.ndarray
    m: np.ndarray
    value: np.ndarray
    kind: str = "loss"

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.m is None:
            self.m = np.full(self.n.shape, np.nan)
        self.m = np.asarray([np.nan if x is None else x for x in np.atleast_1d(self.m)], dtype=np.float64)
        if not (self.n.shape == self.m.shape == self.value.shape):
            raise ValueError("n, m and value must have equal length")
        if np.any(self.n <= 0):
            raise FitError("model sizes must be positive")
        if np.any(~(self.value > 0)):
            raise FitError("values must be positive for log-domain fitting")

    @classmethod
    def from_rows(cls, rows: Sequence[tuple], kind: str = "loss") -> "ObservationSet":
        rows = list(rows)
        if not rows:
            return cls(np.empty(0), np.empty(0), np.empty(0), kind)
        n, m, v = zip(*rows)
        return cls(np.array(n), list(m), np.array(v), kind)

    def __len__(self):
        return self.n.size

    @property
    def has_m(self) -> bool:
        return bool(len(self)) and not np.all(np.isnan(self.m))

    def select(self, mask) -> "ObservationSet":
        return ObservationSet(self.n[mask], self.m[mask], self.value[mask], self.kind)

    def with_m(self, m) -> "ObservationSet":
        return self.select(self.m == m)

    def replicas(self) -> list[int]:
        return sorted({int(x) for x in self.m if not np.isnan(x)})

    def scaled(self, c: float) -> "ObservationSet":
        return ObservationSet(self.n, self.m, self.value * c, self.kind)


@dataclass
class PowerLawFit:
    """``value ~ a * N**alpha`` (times ``M**beta`` when ``beta`` is set)."""

    a: float
    alpha: float
    beta: Optional[float] = None
    rms_log_residual: float = 0.0

    def predict(self, n, m=None):
        out = self.a * np.power(n, self.alpha)
        if self.beta is not None:
            if m is None:
                raise ValueError("joint power law needs m")
            out = out * np.power(m, self.beta)
        return out


def residual(y, yhat):
    """``|log y - log yhat|``."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    if np.any(~(y > 0)) or np.any(~(yhat > 0)):
        raise ValueError("residual needs positive inputs")
    out = np.abs(np.log(y) - np.log(yhat))
    return float(out) if out.ndim == 0 else out


def fit_power_law(obs: ObservationSet) -> PowerLawFit:
    if len(np.unique(obs.n)) < 2:
        raise FitError("need at least two distinct model sizes")
    x, y = np.log(obs.n), np.log(obs.value)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return PowerLawFit(math.exp(coef[0]), float(coef[1]), None, float(np.sqrt(np.mean(resid**2))))


def fit_joint_power_law(obs: ObservationSet) -> PowerLawFit:
    if len(obs) < 3 or np.any(np.isnan(obs.m)):
        raise FitError("joint fit needs at least three rows, all with m")
    if len(np.unique(obs.n)) < 2 or len(np.unique(obs.m)) < 2:
        raise FitError("joint fit needs at least two distinct n and two distinct m")
    design = np.column_stack([np.ones(len(obs)), np.log(obs.n), np.log(obs.m)])
    if np.linalg.matrix_rank(design) < 3:
        raise FitError("rank-deficient design")
    y = np.log(obs.value)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return PowerLawFit(math.exp(coef[0]), float(coef[1]), float(coef[2]), float(np.sqrt(np.mean(resid**2))))


def optimal_batch(batch_sizes, losses) -> float:
    """Vertex of the quadratic fit of loss against log2(batch size)."""
    x = np.log2(np.asarray(batch_sizes, dtype=np.float64))
    y = np.asarray(losses, dtype=np.float64)
    if len(np.unique(x)) < 3:
        raise FitError("need at least three distinct batch sizes")
    c2, c1, _ = np.polyfit(x, y, 2)
    curvature_floor = 1e-9 * max(1.0, np.ptp(y)) / max(1.0, np.ptp(x)) ** 2
    if c2 <= curvature_floor:
        raise FitError(f"quadratic does not open upward (leading coefficient {c2:.3g})")
    return float(2.0 ** (-c1 / (2.0 * c2)))


class OuterLRTable:
    """Constant outer learning rate per replica count, independent of N."""

    def __init__(self, by_m: dict):
        self.by_m = {int(k): float(v) for k, v in by_m.items()}

    def __call__(self, n: float, m: int) -> float:
        try:
            return self.by_m[int(m)]
        except KeyError:
            raise KeyError(f"no outer learning rate configured for M={m}") from None


# ---------------------------------------------------------------------------
# leave-one-out


@dataclass
class LooResult:
    held_n: float
    kind: str
    rows: list  # (m, observed, predicted, residual)

    @property
    def average(self) -> float:
        return float(np.mean([r[3] for r in self.rows]))


def loo_validate(obs: ObservationSet, held_n: float, fit_kind: str = "joint") -> LooResult:
    held = np.isclose(obs.n, held_n, rtol=1e-9)
    if not held.any():
        raise FitError(f"no observations at N={held_n:g}")
    train, test = obs.select(~held), obs.select(held)
    rows = []
    if fit_kind == "joint":
        fit = fit_joint_power_law(train)
        for n, m, v in zip(test.n, test.m, test.value):
            p = float(fit.predict(n, m))
            rows.append((int(m), float(v), p, residual(v, p)))
    elif fit_kind == "independent":
        groups = train.replicas() if train.has_m else [None]
        for m in groups:
            sub = train.with_m(m) if m is not None else train
            fit = fit_power_law(sub)
            tmask = test.m == m if m is not None else np.ones(len(test), bool)
            for n, v in zip(test.n[tmask], test.value[tmask]):
                p = float(fit.predict(n))
                rows.append((m, float(v), p, residual(v, p)))
    else:
        raise ValueError(f"unknown fit kind {fit_kind!r}")
    return LooResult(float(held_n), fit_kind, rows)


# ---------------------------------------------------------------------------
# parametric forms fitted with a Huber loss in log space

FORMS = {
    1: ("A*N^alpha*M^beta", ("log_a", "alpha", "beta")),
    2: ("A*N^alpha*M^beta+C", ("log_a", "alpha", "beta", "c")),
    3: ("A*N^(alpha+beta*M)+C", ("log_a", "alpha", "beta", "c")),
    4: ("A*N^alpha+B*M^beta+C", ("log_a", "alpha", "log_b", "beta", "c")),
}


def form_value(form: int, q, n, m):
    n = np.asarray(n, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        if form == 1:
            la, a, b = q
            return np.exp(la + a * np.log(n) + b * np.log(m))
        if form == 2:
            la, a, b, c = q
            return np.exp(la + a * np.log(n) + b * np.log(m)) + c
        if form == 3:
            la, a, b, c = q
            return np.exp(la + (a + b * m) * np.log(n)) + c
        if form == 4:
            la, a, lb, b, c = q
            return np.exp(la + a * np.log(n)) + np.exp(lb + b * np.log(m)) + c
    raise ValueError(f"unknown form {form}")


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _initial_point(form: int, rng: np.random.Generator) -> np.ndarray:
    log_a = rng.uniform(0.0, 4.0)
    alpha = rng.uniform(-1.5, 0.5)
    if form == 4:
        return np.array([log_a, alpha, rng.uniform(-4.0, 0.0), rng.uniform(-1.5, 0.5), rng.uniform(0.0, 2.0)])
    beta = rng.uniform(-1.5, 0.5)
    if form == 1:
        return np.array([log_a, alpha, beta])
    return np.array([log_a, alpha, beta, rng.uniform(0.0, 2.0)])


_PENALTY = 1e10


def _huber_objective(form, q, n, m, log_y, delta):
    pred = form_value(form, q, n, m)
    if not np.all(np.isfinite(pred)) or np.any(pred <= 0):
        return _PENALTY
    return float(np.sum(huber(np.log(pred) - log_y, delta)))


@dataclass
class ParametricFit:
    form: int
    params: dict
    heldout_avg_residual: float
    train_objective: float
    restart_index: int
    restart_count: int
    huber_delta: float
    failures: int = 0

    @property
    def expression(self) -> str:
        return FORMS[self.form][0]

    @property
    def q(self) -> np.ndarray:
        return np.array([self.params[k] for k in FORMS[self.form][1]])

    def predict(self, n, m=None):
        if m is None:
            raise ValueError("parametric forms need m")
        return form_value(self.form, self.q, n, m)


@dataclass
class _Restart:
    index: int
    q: Optional[np.ndarray]
    train_objective: float
    holdout: float
    message: str = ""


def _run_restart(form, index, seed, train, test, delta, gtol, maxiter):
    rng = np.random.default_rng([seed, form, index])
    q0 = _initial_point(form, rng)
    log_y = np.log(train.value)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = minimize(
            lambda q: _huber_objective(form, q, train.n, train.m, log_y, delta),
            q0,
            method="L-BFGS-B",
            options={"gtol": gtol, "maxiter": maxiter},
        )
    if not np.isfinite(res.fun) or res.fun >= _PENALTY:
        return _Restart(index, None, math.inf, math.inf, f"diverged: {res.message}")
    pred = form_value(form, res.x, test.n, test.m)
    if not np.all(np.isfinite(pred)) or np.any(pred <= 0):
        return _Restart(index, None, float(res.fun), math.inf, "non-positive holdout prediction")
    return _Restart(index, res.x, float(res.fun), float(np.mean(residual(test.value, pred))))


def fit_parametric(
    form: int,
    train: ObservationSet,
    holdout: ObservationSet,
    restarts: int = 256,
    delta: float = 1e-3,
    seed: int = 0,
    gtol: float = 1e-10,
    maxiter: int = 500,
    workers: int = 1,
) -> ParametricFit:
    """Huber-in-log-space fit with random restarts, picked by holdout residual.

    Restart ``i`` draws its start from ``default_rng([seed, form, i])`` so
    the result does not depend on ``workers``. Ties on the holdout residual
    go to the lower training objective, then the lower restart index.
    """
    if form not in FORMS:
        raise ValueError(f"form must be one of {sorted(FORMS)}")
    if not len(train) or not len(holdout):
        raise FitError("training and holdout sets must be nonempty")
    if np.any(np.isnan(train.m)) or np.any(np.isnan(holdout.m)):
        raise FitError("parametric forms need m on every row")
    args = (train, holdout, delta, gtol, maxiter)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda i: _run_restart(form, i, seed, *args), range(restarts)))
    else:
        results = [_run_restart(form, i, seed, *args) for i in range(restarts)]
    ok = [r for r in results if r.q is not None]
    if not ok:
        messages = sorted({r.message for r in results})
        raise FitError(f"all {restarts} restarts failed: {'; '.join(messages)}")
    best = min(ok, key=lambda r: (r.holdout, r.train_objective, r.index))
    names = FORMS[form][1]
    return ParametricFit(
        form=form,
        params={k: float(v) for k, v in zip(names, best.q)},
        heldout_avg_residual=best.holdout,
        train_objective=best.train_objective,
        restart_index=best.index,
        restart_count=restarts,
        huber_delta=delta,
        failures=len(results) - len(ok),
    )


def predict(fit, n, m=None):
    return fit.predict(n, m)
