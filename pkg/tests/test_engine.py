"""Hand-computed schedules on tiny workloads.

Machine used throughout: FAST access 1 ns, SLOW access 10 ns, 1000 ns of
compute per layer, no prefetch start latency unless a test sets one.
"""
import pytest

from hmtier.allocator import Tier
from hmtier.policy.sentinel import Case, Strategy, resolve_trials
from hmtier.simengine.engine import SentinelStepper
from hmtier.simengine.machine import MachineConfig, TierConfig, reference_hw
from hmtier.simengine.workload import compile_workload

from helpers import one_step, persistent


def machine(capacity, migration_bw, latency_ns=0.0):
    return MachineConfig(
        fast=TierConfig("FAST", capacity, 64e9, 0.0),
        slow=TierConfig("SLOW", 1 << 40, 64e9, 9.0),
        migration_bandwidth_bytes_per_s=migration_bw,
        access_granularity_bytes=64,
        migration_latency_ns=latency_ns,
    )


PAGE_IN_250NS = 8192 / 500e-9  # an 8 KiB unit moves in 500 ns


def single_unit(count=10):
    return compile_workload(one_step(4, [persistent(0, 8192, {2: count}, 4)]), 0)


def test_access_costs():
    m = machine(1 << 20, PAGE_IN_250NS)
    assert m.fast_access_ns == pytest.approx(1.0)
    assert m.slow_access_ns == pytest.approx(10.0)


def test_prefetch_lands_before_use():
    wl = single_unit()
    s = SentinelStepper(wl, machine(1 << 20, PAGE_IN_250NS), 2)
    st = s.initial_state(fill=False)
    assert st.tier[0] is Tier.SLOW
    stats = s.step(st)
    # layer 0 moves the unit (500 ns), it flips at layer 1, layer 2 reads it from FAST
    assert stats.layer_ns == pytest.approx([1000, 1000, 1010, 1000])
    assert stats.cases == [(0, Case.CASE1)]
    assert stats.migrations == 2 and stats.prefetched_bytes == 8192
    assert st.tier[0] is Tier.FAST
    again = s.step(st)
    assert again.time_ns == pytest.approx(4010)
    assert again.migrations == 0


def test_start_latency_delays_prefetch_into_case3():
    wl = single_unit()
    ok = SentinelStepper(wl, machine(1 << 20, PAGE_IN_250NS, latency_ns=600), 2)
    assert ok.step(ok.initial_state(fill=False)).cases == [(0, Case.CASE1)]
    late = SentinelStepper(wl, machine(1 << 20, PAGE_IN_250NS, latency_ns=1600), 2)
    stats = late.step(late.initial_state(fill=False))
    assert stats.cases == [(0, Case.CASE3)]


def test_space_blocked_is_case2():
    wl = single_unit()
    s = SentinelStepper(wl, machine(4096, PAGE_IN_250NS), 2)
    stats = s.step(s.initial_state(fill=False))
    assert stats.cases == [(0, Case.CASE2)]
    assert stats.layer_ns[2] == pytest.approx(1100)
    assert stats.migrations == 0


SLOW_BW = 8192 / 3000e-9  # the unit needs 3000 ns; 2000 ns of interval 0 leave a third undone


def _trial_pair(count):
    wl = single_unit(count)
    s = SentinelStepper(wl, machine(1 << 20, SLOW_BW), 2)
    base = s.initial_state(fill=False)
    cont_state, leave_state = base.snapshot(), base.snapshot()
    assert cont_state.key() == leave_state.key()
    cont = s.step(cont_state, {0: Strategy.CONTINUE_MIGRATION})
    leave = s.step(leave_state, {0: Strategy.LEAVE_IN_SLOW})
    return cont, leave


def test_continue_stalls_for_the_remainder():
    cont, leave = _trial_pair(10)
    assert cont.cases == leave.cases == [(0, Case.CASE3)]
    assert cont.stall_ns == pytest.approx(1000)
    assert cont.time_ns == pytest.approx(2000 + 1000 + 1010 + 1000)
    assert leave.stall_ns == 0
    assert leave.time_ns == pytest.approx(4100)


def test_trial_picks_leave_when_stall_costs_more():
    cont, leave = _trial_pair(10)  # stall 1000 ns vs 90 ns of slow accesses
    r = resolve_trials([0], {0: cont.interval_ns[1]}, {0: leave.interval_ns[1]}, 1.0, 1.0)
    assert r.strategies[0] is Strategy.LEAVE_IN_SLOW


def test_trial_picks_continue_when_slow_accesses_cost_more():
    cont, leave = _trial_pair(1000)  # stall 1000 ns vs 9000 ns of slow accesses
    assert cont.interval_ns[1] == pytest.approx(1000 + 2000 + 1000)
    assert leave.interval_ns[1] == pytest.approx(11000 + 1000)
    r = resolve_trials([0], {0: cont.interval_ns[1]}, {0: leave.interval_ns[1]}, 1.0, 1.0)
    assert r.strategies[0] is Strategy.CONTINUE_MIGRATION


def test_pressure_eviction_swaps_units_each_interval():
    wl = compile_workload(one_step(4, [persistent(0, 8192, {0: 10}, 4), persistent(1, 8192, {2: 10}, 4)]), 0)
    s = SentinelStepper(wl, machine(8192, PAGE_IN_250NS), 2)
    st = s.initial_state()
    assert (st.tier[0], st.tier[1]) == (Tier.FAST, Tier.SLOW)
    first = s.step(st)
    # layer 1 evicts unit 0 then brings unit 1 (500 + 500 ns); layer 3 does the reverse
    assert first.layer_ns == pytest.approx([1010, 1000, 1010, 1000])
    assert first.migrations == 8
    assert first.peak_fast == 8192
    second = s.step(st)
    assert second.time_ns == pytest.approx(4020)
    assert [c for _, c in second.cases] == [Case.CASE1, Case.CASE1]


def test_occupancy_never_exceeds_capacity(default_wl, machine20):
    s = SentinelStepper(default_wl, machine20, 8)
    st = s.initial_state()
    for _ in range(3):
        stats = s.step(st)
        assert max(b for _, b in stats.occupancy) <= machine20.capacity
        assert st.used <= machine20.capacity


def test_moving_a_unit_to_slow_never_speeds_up(default_wl):
    # placement frozen: nothing can migrate and FAST never runs out, so only the demoted unit changes
    m = reference_hw(1 << 40).with_migration_bandwidth(1e-6)
    s = SentinelStepper(default_wl, m, 8)
    st = s.initial_state()
    base = s.step(st.snapshot()).time_ns
    fast = [u for u, t in st.tier.items() if t is Tier.FAST]
    for uid in fast[:: max(1, len(fast) // 10)]:
        demoted = st.snapshot()
        demoted.tier[uid] = Tier.SLOW
        demoted.used -= default_wl.units[uid].nbytes
        assert s.step(demoted).time_ns >= base


def test_invalid_machine():
    with pytest.raises(ValueError):
        machine(1 << 20, 1e9, latency_ns=-1)
    with pytest.raises(ValueError):
        MachineConfig(TierConfig("F", 1, 1e9, 200.0), TierConfig("S", 1, 1e9, 100.0))
