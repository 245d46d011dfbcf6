"""Idealized wall-clock model for Data-Parallel and DiLoCo training.

Compute time is ``6*N*D / (R*Q)``. Each all-reduce of ``N`` parameters over
``R`` nodes costs ``2*N*bits/W * (1 - 1/R) + eps``. Data-Parallel reduces
over the cross-datacenter link every step; DiLoCo with ``M >= 2`` reduces
within each datacenter every step and across datacenters every ``H`` steps.
The outer-step count is amortized as ``T/H``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from dilocolab.engine import DATA_PARALLEL, DILOCO

GBIT = 1e9


@dataclass(frozen=True)
class NetworkProfile:
    bandwidth: float  # bits / second
    latency: float  # seconds

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")


HIGH = NetworkProfile(400 * GBIT, 1e-4)
MEDIUM = NetworkProfile(100 * GBIT, 1e-3)
LOW = NetworkProfile(10 * GBIT, 1e-2)
ARCHETYPES = {"high": HIGH, "medium": MEDIUM, "low": LOW}


@dataclass(frozen=True)
class HardwareProfile:
    chips: int
    flops_per_chip: float = 3e14
    bits_per_param: int = 16

    def __post_init__(self):
        if self.chips < 1 or self.flops_per_chip <= 0 or self.bits_per_param <= 0:
            raise ValueError("hardware profile values must be positive")


@dataclass(frozen=True)
class Algo:
    """``Algo("data-parallel")`` or ``Algo("diloco", replicas=M, cadence=H)``."""

    name: str
    replicas: int = 1
    cadence: int = 1

    def __post_init__(self):
        if self.name not in (DATA_PARALLEL, DILOCO):
            raise ValueError(f"unknown algorithm {self.name!r}")
        if self.replicas < 1 or self.cadence < 1:
            raise ValueError("replicas and cadence must be >= 1")

    @property
    def label(self) -> str:
        if self.name == DATA_PARALLEL:
            return "Data-Parallel"
        return f"DiLoCo M={self.replicas} H={self.cadence}"


@dataclass(frozen=True)
class CostBreakdown:
    compute_s: float
    comm_inner_s: float
    comm_outer_s: float

    @property
    def comm_s(self) -> float:
        return self.comm_inner_s + self.comm_outer_s

    @property
    def total_s(self) -> float:
        return self.compute_s + self.comm_inner_s + self.comm_outer_s

    @property
    def utilization(self) -> float:
        return self.compute_s / self.total_s


class InfeasibleTarget(ValueError):
    """The latency floor alone keeps utilization below the requested target."""


def allreduce_time(n: float, bits: float, r: int, net: NetworkProfile) -> float:
    if r < 1:
        raise ValueError("need at least one node")
    return 2.0 * n * bits / net.bandwidth * (1.0 - 1.0 / r) + net.latency


def _allreduce_within(n, bits, r, m, net):
    # Each replica's R/M nodes reduce inside one datacenter.
    return 2.0 * n * bits / net.bandwidth * (1.0 - m / r) + net.latency


def compute_time(n: float, d: float, hw: HardwareProfile) -> float:
    return 6.0 * n * d / (hw.chips * hw.flops_per_chip)


def comm_time(
    algo: Algo,
    n: float,
    bits: float,
    t_steps: float,
    r: int,
    within: NetworkProfile,
    cross: NetworkProfile,
) -> tuple[float, float]:
    """Return ``(inner_s, outer_s)`` communication seconds for a whole run."""
    if algo.name == DATA_PARALLEL:
        return allreduce_time(n, bits, r, cross) * t_steps, 0.0
    h = algo.cadence
    if algo.replicas == 1:
        per = allreduce_time(n, bits, r, cross)
        return per * t_steps, per * t_steps / h
    if r < algo.replicas:
        raise ValueError(f"{r} chips cannot host {algo.replicas} replicas")
    inner = _allreduce_within(n, bits, r, algo.replicas, within) * t_steps
    outer = allreduce_time(n, bits, r, cross) * t_steps / h
    return inner, outer


def wallclock(
    algo: Algo,
    n: float,
    d: float,
    t_steps: float,
    hw: HardwareProfile,
    within: NetworkProfile = HIGH,
    cross: NetworkProfile = HIGH,
) -> CostBreakdown:
    inner, outer = comm_time(algo, n, hw.bits_per_param, t_steps, hw.chips, within, cross)
    return CostBreakdown(compute_time(n, d, hw), inner, outer)


def step_comm_time(
    algo: Algo,
    n: float,
    bits: float,
    r: int,
    cross: NetworkProfile,
    within: Optional[NetworkProfile] = None,
) -> float:
    """Per-step communication in the step-time mode used for bandwidth solving.

    Only cross-datacenter traffic is charged unless ``within`` is given, in
    which case the per-step within-datacenter reduction of DiLoCo (M >= 2)
    is added.
    """
    if algo.name == DATA_PARALLEL:
        return allreduce_time(n, bits, r, cross)
    cross_s = allreduce_time(n, bits, r, cross)
    if algo.replicas == 1:
        return cross_s * (1.0 + 1.0 / algo.cadence)
    if r < algo.replicas:
        raise ValueError(f"{r} chips cannot host {algo.replicas} replicas")
    within_s = _allreduce_within(n, bits, r, algo.replicas, within) if within is not None else 0.0
    return within_s + cross_s / algo.cadence


def utilization_at(bandwidth, step_time_s, algo, n, bits, r, cross_latency, within=None) -> float:
    comm = step_comm_time(algo, n, bits, r, NetworkProfile(bandwidth, cross_latency), within)
    return step_time_s / (step_time_s + comm)


def snap_up(bandwidth: float, ratio: float = 10 ** (1 / 12)) -> float:
    """Round up onto the geometric grid ``ratio**k`` (bits/s expressed in Gbit/s)."""
    k = math.ceil(math.log(bandwidth / GBIT, ratio) - 1e-9)
    return GBIT * ratio**k


def required_bandwidth(
    target_cu: float,
    step_time_s: float,
    algo: Algo,
    n: float,
    bits: float = 16,
    r: int = 1024,
    cross_latency: float = 0.0,
    within: Optional[NetworkProfile] = None,
    snap: bool = False,
    rel_tol: float = 1e-9,
) -> float:
    """Smallest cross-datacenter bandwidth (bits/s) reaching ``target_cu``.

    Bisection on log-bandwidth; utilization is monotone increasing in W.
    The result W satisfies ``utilization(W) >= target_cu`` and
    ``utilization(W * (1 - 1e-6)) < target_cu``.
    """
    if not 0 < target_cu < 1:
        raise ValueError("target utilization must lie in (0, 1)")
    if step_time_s <= 0:
        raise ValueError("step time must be positive")

    def cu(w):
        return utilization_at(w, step_time_s, algo, n, bits, r, cross_latency, within)

    # Utilization ceiling as W -> infinity: only latency terms remain.
    floor = step_comm_time(algo, n, bits, r, NetworkProfile(math.inf, cross_latency), within)
    if step_time_s / (step_time_s + floor) < target_cu:
        raise InfeasibleTarget(
            f"latency floor {floor:.3g}s/step caps utilization at "
            f"{step_time_s / (step_time_s + floor):.4f} < {target_cu}"
        )

    if step_comm_time(algo, n, bits, r, NetworkProfile(1.0, cross_latency), within) == floor:
        return 0.0  # no bandwidth-dependent traffic, e.g. a single chip

    lo, hi = 1.0, 1.0
    while cu(hi) < target_cu:
        hi *= 2.0
    while cu(lo) >= target_cu and lo > 1e-300:
        lo /= 2.0
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if cu(mid) >= target_cu:
            hi = mid
        else:
            lo = mid
    return snap_up(hi) if snap else hi
