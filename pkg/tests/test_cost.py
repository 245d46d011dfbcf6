import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dilocolab.cost import (
    GBIT,
    HIGH,
    LOW,
    MEDIUM,
    Algo,
    HardwareProfile,
    InfeasibleTarget,
    NetworkProfile,
    allreduce_time,
    comm_time,
    compute_time,
    required_bandwidth,
    snap_up,
    utilization_at,
    wallclock,
)

DP = Algo("data-parallel")


def diloco(m, h):
    return Algo("diloco", m, h)


def closed_form_bandwidth(target, step, factor, n, bits, r, latency):
    """Invert step / (step + factor * (2 n bits (1 - 1/r) / W + latency)) = target for W."""
    budget = step * (1 / target - 1) / factor - latency
    return 2 * n * bits * (1 - 1 / r) / budget


def test_archetypes():
    assert (HIGH.bandwidth, HIGH.latency) == (400e9, 1e-4)
    assert (MEDIUM.bandwidth, MEDIUM.latency) == (100e9, 1e-3)
    assert (LOW.bandwidth, LOW.latency) == (10e9, 1e-2)


def test_allreduce_single_node_is_latency():
    assert allreduce_time(1e9, 16, 1, HIGH) == HIGH.latency


def test_allreduce_large_r_limit():
    net = NetworkProfile(400e9, 0.0)
    assert allreduce_time(1e9, 16, 10**12, net) == pytest.approx(0.08, rel=1e-9)


def test_allreduce_halving_bandwidth_doubles_traffic():
    a = allreduce_time(3e8, 16, 64, NetworkProfile(100e9, 0.0))
    b = allreduce_time(3e8, 16, 64, NetworkProfile(50e9, 0.0))
    assert b == 2 * a


def test_compute_time_examples():
    hw = HardwareProfile(64)
    assert compute_time(1e9, 2e10, hw) == pytest.approx(6.25e3)
    assert compute_time(1e9, 2e10, HardwareProfile(128)) == pytest.approx(6.25e3 / 2)
    assert compute_time(2e9, 4e10, hw) == pytest.approx(4 * 6.25e3)


def test_single_replica_diloco_costs_one_plus_inverse_h():
    for h in (1, 7, 30):
        dp = sum(comm_time(DP, 1e9, 16, 1000, 256, HIGH, LOW))
        dl = sum(comm_time(diloco(1, h), 1e9, 16, 1000, 256, HIGH, LOW))
        assert dl == pytest.approx(dp * (1 + 1 / h), rel=1e-15)


def test_multi_replica_infinite_cadence_limit():
    inner, outer = comm_time(diloco(4, 10**12), 1e9, 16, 1000, 256, HIGH, LOW)
    assert outer < 1e-6
    assert inner == pytest.approx((2e9 * 16 / 400e9 * (1 - 4 / 256) + 1e-4) * 1000)


def test_outer_at_most_half_when_cadence_covers_bandwidth_ratio():
    w0, w1 = NetworkProfile(400e9, 0.0), NetworkProfile(10e9, 0.0)
    m, r = 2, 512
    # the cross term carries (1 - 1/R), the within term (1 - M/R)
    h = math.ceil(w0.bandwidth / w1.bandwidth * (1 - 1 / r) / (1 - m / r))
    inner, outer = comm_time(diloco(m, h), 1e9, 16, 500, r, w0, w1)
    assert outer <= (inner + outer) / 2


def test_replicas_need_enough_chips():
    with pytest.raises(ValueError):
        comm_time(diloco(8, 30), 1e9, 16, 10, 4, HIGH, LOW)


def test_wallclock_breakdown_sums():
    b = wallclock(diloco(2, 30), 1e9, 2e10, 5000, HardwareProfile(64), HIGH, MEDIUM)
    assert b.total_s == pytest.approx(b.compute_s + b.comm_inner_s + b.comm_outer_s)
    assert 0 < b.utilization <= 1


def test_wallclock_ideal_network():
    ideal = NetworkProfile(math.inf, 0.0)
    b = wallclock(DP, 1e9, 2e10, 5000, HardwareProfile(64), ideal, ideal)
    assert b.utilization == 1.0


def test_dp_and_h1_utilization_close_when_cross_dominates():
    hw = HardwareProfile(256)
    slow = NetworkProfile(1e9, 1e-2)
    dp = wallclock(DP, 1e9, 2e10, 20_000, hw, HIGH, slow)
    dl = wallclock(diloco(2, 1), 1e9, 2e10, 20_000, hw, HIGH, slow)
    assert dl.utilization == pytest.approx(dp.utilization, rel=0.01)


def test_utilization_increases_with_cross_bandwidth():
    hw = HardwareProfile(128)
    values = [
        wallclock(algo, 1e9, 2e10, 20_000, hw, HIGH, NetworkProfile(w, 1e-3)).utilization
        for algo in (DP, diloco(1, 30), diloco(4, 30))
        for w in np.geomspace(1e8, 1e12, 20)
    ]
    for series in (values[:20], values[20:40], values[40:]):
        assert all(a < b for a, b in zip(series, series[1:]))


@pytest.mark.parametrize("algo,factor", [(DP, 1.0), (diloco(1, 10), 1.1), (diloco(4, 50), 1 / 50)])
@pytest.mark.parametrize("target", [0.5, 0.8, 0.99])
def test_bisection_matches_closed_form(algo, factor, target):
    w = required_bandwidth(target, 0.8, algo, 1e10, 16, 1024, 1e-3)
    expected = closed_form_bandwidth(target, 0.8, factor, 1e10, 16, 1024, 1e-3)
    assert w == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("target", [0.5, 0.9, 0.95])
def test_bisection_bracket_property(target):
    w = required_bandwidth(target, 26.0, diloco(2, 100), 405e9, 16, 4096, 1e-2)
    cu = lambda x: utilization_at(x, 26.0, diloco(2, 100), 405e9, 16, 4096, 1e-2)
    assert cu(w) >= target
    assert cu(w * (1 - 1e-6)) < target


def test_required_bandwidth_identities():
    for target in (0.5, 0.8, 0.95):
        dp = required_bandwidth(target, 0.8, DP, 1e10)
        assert required_bandwidth(target, 0.8, diloco(2, 1), 1e10) == pytest.approx(dp, rel=1e-9)
        for h in (10, 50, 100, 300):
            assert required_bandwidth(target, 0.8, diloco(2, h), 1e10) == pytest.approx(dp / h, rel=1e-6)


def test_within_traffic_only_adds_requirement():
    base = required_bandwidth(0.5, 20.0, diloco(4, 30), 1e9, r=64)
    more = required_bandwidth(0.5, 20.0, diloco(4, 30), 1e9, r=64, within=HIGH)
    assert more > base


def test_infeasible_latency_floor():
    with pytest.raises(InfeasibleTarget):
        required_bandwidth(0.99, 0.001, DP, 1e9, cross_latency=0.01)


def test_bad_target():
    with pytest.raises(ValueError):
        required_bandwidth(1.0, 1.0, DP, 1e9)


def test_single_chip_needs_no_bandwidth():
    assert required_bandwidth(0.5, 1.0, DP, 1e9, r=1) == 0.0


def test_snap_up_grid():
    step = 10 ** (1 / 12)
    snapped = snap_up(104.0 * GBIT)
    k = math.log(snapped / GBIT, step)
    assert abs(k - round(k)) < 1e-9
    assert snapped >= 104.0 * GBIT and snapped / step < 104.0 * GBIT
    assert snap_up(100 * GBIT) == pytest.approx(100 * GBIT)


@given(st.floats(1e6, 1e12), st.floats(1e8, 1e12), st.integers(1, 4096))
def test_comm_scales_linearly(n, w, r):
    net = NetworkProfile(w, 0.0)
    one = allreduce_time(n, 16, r, net)
    assert allreduce_time(2 * n, 16, r, net) == pytest.approx(2 * one, rel=1e-12)
    assert allreduce_time(n, 16, r, NetworkProfile(2 * w, 0.0)) == pytest.approx(one / 2, rel=1e-12)
    assert one >= 0
