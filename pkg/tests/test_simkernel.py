import pytest
from hypothesis import given, strategies as st

from simpleics.simkernel import Kernel, SchedulingError, SeededRng


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60))
def test_events_fire_in_time_then_schedule_order(times):
    k = Kernel()
    fired = []
    for i, t in enumerate(times):
        k.schedule(t, "x", fired.append, (t, i))
    k.run_until(1000)
    assert fired == sorted(fired)
    assert len(fired) == len(times)


def test_same_instant_events_keep_insertion_order():
    k = Kernel()
    out = []
    for name in "abc":
        k.schedule(5, name, out.append, name)
    k.run_until(5)
    assert out == ["a", "b", "c"]


def test_event_scheduled_during_dispatch_at_same_time_runs_after():
    k = Kernel()
    out = []

    def first():
        out.append(1)
        k.schedule(k.now, "late", out.append, 3)

    k.schedule(10, "first", first)
    k.schedule(10, "second", out.append, 2)
    k.run_until(10)
    assert out == [1, 2, 3]


def test_past_scheduling_is_rejected():
    k = Kernel()
    k.run_until(100)
    with pytest.raises(SchedulingError):
        k.schedule(99, "x")
    with pytest.raises(SchedulingError):
        k.run_until(50)


def test_cancelled_events_do_not_fire():
    k = Kernel()
    out = []
    ev = k.schedule(3, "x", out.append, 1)
    k.schedule(4, "y", out.append, 2)
    Kernel.cancel(ev)
    assert k.pending() == 1
    assert k.run_until(10) == 1
    assert out == [2]


def test_clock_lands_on_horizon():
    k = Kernel()
    k.schedule(5, "x")
    k.run_until(20)
    assert k.now == 20


def test_rng_streams_are_reproducible_and_independent():
    a1 = SeededRng(7, "net").random()
    a2 = SeededRng(7, "net").random()
    b = SeededRng(7, "npc").random()
    c = SeededRng(8, "net").random()
    assert a1 == a2
    assert len({a1, b, c}) == 3


def test_fork_rng_rejects_duplicates_and_empty_labels():
    k = Kernel(seed=3)
    k.fork_rng("a")
    with pytest.raises(ValueError):
        k.fork_rng("a")
    with pytest.raises(ValueError):
        k.fork_rng("")


def test_trace_digest_is_deterministic():
    def run():
        k = Kernel(seed=1, trace=True)
        rng = k.fork_rng("s")
        for _ in range(50):
            k.schedule(rng.randrange(1000), "e")
        k.run_until(1000)
        return k.trace_digest()

    assert run() == run()
