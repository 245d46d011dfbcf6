"""Data-Parallel and DiLoCo training loops on flat parameter vectors.

The inner optimizer is AdamW with bias correction and decoupled weight
decay; the outer optimizer is SGD with Nesterov momentum applied to the
averaged outer gradient every ``cadence`` steps.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from dilocolab.objectives import Objective
from dilocolab.zoo import steps_for, token_budget

DATA_PARALLEL = "data-parallel"
DILOCO = "diloco"
ALGORITHMS = (DATA_PARALLEL, DILOCO)

RECORD_SCHEMA = 1


class DivergenceError(FloatingPointError):
    """Raised when training produces a non-finite gradient or loss.

    ``record`` holds the partial run with ``status == "diverged"``.
    """

    def __init__(self, message: str, record: "RunRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class Hyperparams:
    inner_lr: float
    global_batch: int
    outer_lr: float = 1.0
    replicas: int = 1
    cadence: int = 30
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    warmup_steps: int = 1000
    final_lr_frac: float = 0.05
    clip_norm: float = 1.0
    weight_decay: Optional[float] = None  # None means 1/T
    outer_momentum: float = 0.9

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.global_batch <= 0 or self.replicas < 1 or self.cadence < 1:
            raise ValueError("batch, replicas and cadence must be positive")
        if self.global_batch % self.replicas:
            raise ValueError(f"global batch {self.global_batch} not divisible by {self.replicas} replicas")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0 <= self.outer_momentum < 1:
            raise ValueError("outer momentum must lie in [0, 1)")


@dataclass
class ReplicaState:
    theta: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0
    stream: Optional[np.random.Generator] = None

    @classmethod
    def fresh(cls, theta, stream=None):
        theta = np.array(theta, dtype=np.float64)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta), 0, stream)


@dataclass
class OuterState:
    theta_global: np.ndarray
    momentum_buf: np.ndarray
    last_sync_step: int = 0

    @classmethod
    def fresh(cls, theta):
        theta = np.array(theta, dtype=np.float64)
        return cls(theta, np.zeros_like(theta), 0)


def lr_at(t: int, t_total: int, peak: float, warmup: int = 1000, final_frac: float = 0.05) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to ``final_frac * peak`` at ``t_total``."""
    if t < 0 or t > t_total:
        raise ValueError(f"step {t} outside [0, {t_total}]")
    if warmup >= t_total:
        raise ValueError(f"warmup ({warmup}) must be shorter than training ({t_total} steps)")
    if t <= warmup:
        return peak * t / warmup if warmup > 0 else peak
    progress = (t - warmup) / (t_total - warmup)
    floor = final_frac * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global(g: np.ndarray, c: float) -> np.ndarray:
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= c:
        return g
    return g * (c / norm)


def adamw_step(state: ReplicaState, g: np.ndarray, lr: float, hp: Hyperparams, weight_decay: float = 0.0) -> ReplicaState:
    if g.shape != state.theta.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {state.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    t = state.step_count + 1
    m = hp.beta1 * state.adam_m + (1 - hp.beta1) * g
    v = hp.beta2 * state.adam_v + (1 - hp.beta2) * g * g
    m_hat = m / (1 - hp.beta1**t)
    v_hat = v / (1 - hp.beta2**t)
    theta = state.theta - lr * (m_hat / (np.sqrt(v_hat) + hp.eps) + weight_decay * state.theta)
    return replace(state, theta=theta, adam_m=m, adam_v=v, step_count=t)


def outer_gradient(theta_prev_global: np.ndarray, replicas: list[np.ndarray]) -> np.ndarray:
    """Mean over replicas of ``theta_prev - theta_m``, summed in index order."""
    if not replicas:
        raise ValueError("need at least one replica")
    total = np.zeros_like(theta_prev_global)
    for theta_m in replicas:
        if theta_m.shape != theta_prev_global.shape:
            raise ValueError("replica shape does not match the global model")
        total += theta_prev_global - theta_m
    return total / len(replicas)


def nesterov_outer_step(outer: OuterState, delta: np.ndarray, lr: float, momentum: float) -> OuterState:
    # buf <- mu*buf + delta; theta <- theta - lr*(delta + mu*buf)
    buf = momentum * outer.momentum_buf + delta
    theta = outer.theta_global - lr * (delta + momentum * buf)
    return OuterState(theta, buf, outer.last_sync_step)


def shard_batch(batch: np.ndarray, m: int) -> list[np.ndarray]:
    if m < 1:
        raise ValueError("need at least one replica")
    if len(batch) % m:
        raise ValueError(f"batch of {len(batch)} not divisible into {m} shards")
    size = len(batch) // m
    return [batch[i * size : (i + 1) * size] for i in range(m)]


@dataclass
class RunConfig:
    objective: Objective
    hp: Hyperparams
    algorithm: str = DILOCO
    seed: int = 0
    overtrain_lambda: float = 1.0
    tokens: Optional[int] = None  # overrides 20 * N * lambda
    eval_every: Optional[int] = None
    eval_count: int = 1024
    repartition: bool = False
    workers: int = 1
    objective_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == DATA_PARALLEL and self.hp.replicas != 1:
            raise ValueError("data-parallel runs use a single replica")

    @property
    def n(self) -> int:
        return self.objective.dim

    @property
    def budget(self) -> int:
        if self.tokens is not None:
            return int(self.tokens)
        return token_budget(self.n, self.overtrain_lambda)


@dataclass
class RunRecord:
    algorithm: str
    n: int
    m: int
    h: Optional[int]
    b: int
    inner_lr: float
    outer_lr: Optional[float]
    seed: int
    steps: int
    tokens: int
    weight_decay: float
    loss_curve: list
    final_loss: Optional[float]
    status: str = "ok"
    objective: str = ""
    overtrain_lambda: float = 1.0
    max_inner_norm: float = 0.0
    schema: int = RECORD_SCHEMA

    @property
    def key(self) -> tuple:
        return (self.algorithm, self.n, self.m, self.h, self.b, self.inner_lr, self.outer_lr, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_curve"] = [[int(s), float(v)] for s, v in self.loss_curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["loss_curve"] = [(int(s), float(v)) for s, v in d.get("loss_curve", [])]
        return cls(**d)


StepCallback = Callable[[int, OuterState, list], None]


def _inner_step(obj, rep, batch, lr, hp, weight_decay):
    g = obj.grad(rep.theta, batch)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    g = clip_global(g, hp.clip_norm)
    return adamw_step(rep, g, lr, hp, weight_decay), float(np.linalg.norm(g))


def train(config: RunConfig, callback: Optional[StepCallback] = None) -> RunRecord:
    """Run Data-Parallel or DiLoCo for ``T = ceil(D / B)`` steps.

    ``callback(t, outer, replicas)`` runs after every step (after any
    synchronization) and must not mutate its arguments.
    """
    obj, hp = config.objective, config.hp
    diloco = config.algorithm == DILOCO
    m_count = hp.replicas
    d = config.budget
    T = steps_for(d, hp.global_batch)
    wd = hp.weight_decay if hp.weight_decay is not None else 1.0 / T
    local_b = hp.global_batch // m_count
    eval_every = config.eval_every or max(1, T // 50)

    theta0 = obj.init(np.random.default_rng([config.seed, 0]))
    replicas = [ReplicaState.fresh(theta0, np.random.default_rng([config.seed, 1, i])) for i in range(m_count)]
    outer = OuterState.fresh(theta0)
    global_stream = np.random.default_rng([config.seed, 1, 0])
    heldout = obj.heldout(np.random.default_rng([config.seed, 2]), config.eval_count)

    record = RunRecord(
        algorithm=config.algorithm,
        n=config.n,
        m=m_count,
        h=hp.cadence if diloco else None,
        b=hp.global_batch,
        inner_lr=hp.inner_lr,
        outer_lr=hp.outer_lr if diloco else None,
        seed=config.seed,
        steps=T,
        tokens=d,
        weight_decay=wd,
        loss_curve=[],
        final_loss=None,
        objective=obj.name,
        overtrain_lambda=config.overtrain_lambda,
    )

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and m_count > 1 else None
    try:
        for t in range(1, T + 1):
            lr = lr_at(t, T, hp.inner_lr, hp.warmup_steps, hp.final_lr_frac)
            if config.repartition:
                shards = shard_batch(obj.sample(global_stream, hp.global_batch), m_count)
            else:
                shards = [obj.sample(rep.stream, local_b) for rep in replicas]
            try:
                if pool is None:
                    results = [_inner_step(obj, r, s, lr, hp, wd) for r, s in zip(replicas, shards)]
                else:
                    futures = [pool.submit(_inner_step, obj, r, s, lr, hp, wd) for r, s in zip(replicas, shards)]
                    results = [f.result() for f in futures]
            except FloatingPointError as exc:
                record.status = "diverged"
                raise DivergenceError(f"step {t}: {exc}", record) from exc
            replicas = [r for r, _ in results]
            record.max_inner_norm = max(record.max_inner_norm, max(norm for _, norm in results))

            if diloco and t % hp.cadence == 0:
                delta = outer_gradient(outer.theta_global, [r.theta for r in replicas])
                outer = nesterov_outer_step(outer, delta, hp.outer_lr, hp.outer_momentum)
                outer.last_sync_step = t
                for r in replicas:
                    r.theta = outer.theta_global.copy()
            elif not diloco:
                outer = OuterState(replicas[0].theta, outer.momentum_buf, t)

            if t % eval_every == 0 or t == T:
                model = outer.theta_global if diloco else replicas[0].theta
                value = obj.loss(model, heldout)
                if not math.isfinite(value):
                    record.status = "diverged"
                    raise DivergenceError(f"step {t}: non-finite evaluation loss", record)
                record.loss_curve.append((t, value))
            if callback is not None:
                callback(t, outer, replicas)
    finally:
        if pool is not None:
            pool.shutdown()

    record.final_loss = record.loss_curve[-1][1]
    return record
