import itertools
import threading
import time

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from livekv.functions import RENDER_VERSION, default_functions
from livekv.generations import create_store
from livekv.patches import Method, PatchCategory, make_patch
from livekv.quiescence import (CategoryViolation, Coordinator, OutcomeKind, PatchInFlight, Priority,
                               QuiescenceError, QuiescenceViolation, ThreadState, TicketStatus,
                               blocking_order_violations, gate_soundness_violations)

LOW, MEDIUM, CRITICAL = Priority.LOW, Priority.MEDIUM, Priority.CRITICAL
_idents = itertools.count(10_000)


def coordinator(**kw):
    s = create_store(default_functions(), 16)
    s.pin([range(0, 16)])
    kw.setdefault("watchdog_timeout", 10.0)
    return Coordinator(s, **kw)


def patch(tag="t1", category=PatchCategory.THREAD_LOCAL, size=64):
    return make_patch(f"p-{tag}", category, size, [("render_version", tag)])


def reg(c, prio, **kw):
    return c.register_thread(prio, ident=next(_idents), **kw)


def run_until_released(c, h, outcomes, pause=0.0005):
    """Loop over quiescence points like a worker between requests."""
    while True:
        o = c.quiescence_point(h)
        outcomes.append(o.kind)
        if o.kind in (OutcomeKind.RELEASED_AFTER_GLOBAL, OutcomeKind.ABORTED,
                      OutcomeKind.MIGRATED):
            return
        time.sleep(pause)


def spawn(c, h, outcomes):
    t = threading.Thread(target=run_until_released, args=(c, h, outcomes), daemon=True)
    t.start()
    return t


def wait_for(pred, timeout=5.0):
    end = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > end:
            raise AssertionError("condition not reached")
        time.sleep(0.001)


def test_priority_order():
    assert LOW < MEDIUM < CRITICAL


def test_idle_fast_path():
    c = coordinator()
    h = reg(c, LOW)
    assert c.quiescence_point(h).kind is OutcomeKind.PASSED
    assert h.state is ThreadState.RUNNING


def test_register_ten_and_deregister():
    c = coordinator()
    hs = [reg(c, LOW) for _ in range(10)]
    assert len(c.registered) == 10
    c.deregister_thread(hs[0])
    assert len(c.registered) == 9
    with pytest.raises(QuiescenceError):
        c.deregister_thread(hs[0])
    with pytest.raises(QuiescenceError):
        c.quiescence_point(hs[0])


def test_duplicate_registration():
    c = coordinator()
    c.register_thread(LOW)
    with pytest.raises(QuiescenceError, match="already registered"):
        c.register_thread(LOW)


def test_set_priority_same_is_noop():
    c = coordinator()
    h = reg(c, LOW)
    assert c.set_priority(h, LOW)
    assert c.set_priority(h, CRITICAL) and h.priority is CRITICAL
    assert c.set_priority(h, MEDIUM) and h.priority is MEDIUM


def test_holding_locks_at_quiescence_point():
    c = coordinator()
    h = reg(c, LOW, holds_locks=lambda: True)
    with pytest.raises(QuiescenceViolation):
        c.quiescence_point(h)


def test_single_thread_global():
    c = coordinator()
    h = reg(c, LOW)
    out = []
    ticket = c.request_patch(patch(), Method.GLOBAL)
    run_until_released(c, h, out)
    rep = c.await_sync(ticket, 5)
    assert out[-1] is OutcomeKind.RELEASED_AFTER_GLOBAL
    assert rep.status is TicketStatus.SYNCHRONIZED and not rep.deadlock
    assert list(rep.thread_waits) == [h.thread_id]
    assert rep.sync_time >= rep.apply_duration > 0
    assert c.store.resolve(h.gen, RENDER_VERSION).tag == "t1"
    assert h.gen == 0  # in place


def test_gate_skips_higher_priority_until_lower_blocks():
    c = coordinator()
    low = reg(c, LOW)
    crit = reg(c, CRITICAL)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    assert c.quiescence_point(crit).kind is OutcomeKind.SKIPPED
    assert crit.state is ThreadState.RUNNING
    lo_out, cr_out = [], []
    t1 = spawn(c, low, lo_out)
    wait_for(lambda: low.state is ThreadState.BLOCKED_AT_BARRIER)
    t2 = spawn(c, crit, cr_out)
    rep = c.await_sync(ticket, 5)
    t1.join(5)
    t2.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED
    assert lo_out[-1] is cr_out[-1] is OutcomeKind.RELEASED_AFTER_GLOBAL
    assert ticket.reached_barrier_at[low.thread_id] < ticket.reached_barrier_at[crit.thread_id]
    assert blocking_order_violations(ticket) == []
    assert gate_soundness_violations(ticket) == []


def test_naive_mode_blocks_unconditionally():
    c = coordinator(naive=True)
    low = reg(c, LOW)
    crit = reg(c, CRITICAL)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    cr_out = []
    t = spawn(c, crit, cr_out)
    wait_for(lambda: crit.state is ThreadState.BLOCKED_AT_BARRIER)
    assert OutcomeKind.SKIPPED not in cr_out
    assert gate_soundness_violations(ticket)  # the log shows the ordering breach
    assert c.quiescence_point(low).kind is OutcomeKind.RELEASED_AFTER_GLOBAL
    t.join(5)
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED


def test_lowering_priority_refused_behind_higher_barrier():
    c = coordinator()
    low, med, x = reg(c, LOW), reg(c, MEDIUM), reg(c, CRITICAL)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    outs = [[], []]
    ts = [spawn(c, low, outs[0])]
    wait_for(lambda: low.state is ThreadState.BLOCKED_AT_BARRIER)
    ts.append(spawn(c, med, outs[1]))
    wait_for(lambda: med.state is ThreadState.BLOCKED_AT_BARRIER)
    assert c.set_priority(x, LOW) is False
    assert x.priority is CRITICAL
    assert c.set_priority(x, MEDIUM) is True
    assert c.quiescence_point(x).kind is OutcomeKind.RELEASED_AFTER_GLOBAL
    for t in ts:
        t.join(5)
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED
    assert blocking_order_violations(ticket) == []


def test_watchdog_aborts_and_server_resumes():
    c = coordinator(watchdog_timeout=0.2)
    stuck = reg(c, LOW)  # never reaches a quiescence point
    other = reg(c, LOW)
    out = []
    ticket = c.request_patch(patch(), Method.GLOBAL)
    t = spawn(c, other, out)
    rep = c.await_sync(ticket, 5)
    t.join(5)
    assert rep.status is TicketStatus.FAILED and rep.deadlock
    assert rep.reason == "quiescence deadlock"
    assert out[-1] is OutcomeKind.ABORTED
    assert c.store.resolve(0, RENDER_VERSION).tag == "v0"  # not applied
    assert c.quiescence_point(stuck).kind is OutcomeKind.PASSED
    c.deregister_thread(stuck)
    c.deregister_thread(other)
    assert c.apply(patch("t2"), Method.GLOBAL).status is TicketStatus.SYNCHRONIZED


def test_wakeup_loop_calls_sleeping_threads():
    c = coordinator()
    ev = threading.Event()
    calls = []

    def wake():
        calls.append(time.monotonic())
        ev.set()

    h = reg(c, MEDIUM, wake_callback=wake)
    out = []

    def sleeper():
        with c.sleeping(h):
            ev.wait()
        run_until_released(c, h, out)

    t = threading.Thread(target=sleeper, daemon=True)
    t.start()
    wait_for(lambda: h.state is ThreadState.SLEEPING)
    rep = c.apply(patch(), Method.GLOBAL)
    t.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED
    assert calls and out[-1] is OutcomeKind.RELEASED_AFTER_GLOBAL


def test_interruptible_wait_is_woken():
    c = coordinator()
    ev = threading.Event()
    h = reg(c, CRITICAL, wake_callback=ev.set)
    out = []

    def listener():
        while True:
            with c.interruptible(h):
                ev.wait()
            ev.clear()
            o = c.quiescence_point(h)
            out.append(o.kind)
            if o.kind is OutcomeKind.RELEASED_AFTER_GLOBAL:
                return

    t = threading.Thread(target=listener, daemon=True)
    t.start()
    wait_for(lambda: h.waiting)
    rep = c.apply(patch(), Method.GLOBAL)
    t.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED


def test_local_three_threads_migrate_independently():
    c = coordinator()
    hs = [reg(c, LOW) for _ in range(3)]
    ticket = c.request_patch(patch(), Method.LOCAL)
    wait_for(lambda: ticket.target_gen is not None)
    outs = [[] for _ in hs]
    ts = [spawn(c, h, o) for h, o in zip(reversed(hs), outs)]
    rep = c.await_sync(ticket, 5)
    for t in ts:
        t.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED
    assert all(h.gen == ticket.target_gen for h in hs)
    assert len(ticket.migrated_at) == 3
    assert all(at >= ticket.ready_at for at in ticket.migrated_at.values())
    assert rep.sync_time >= rep.clone_duration > 0
    assert ticket.qp_blocked_calls == 0
    assert set(ticket.qp_outcomes) <= {OutcomeKind.PASSED, OutcomeKind.MIGRATED}
    assert c.store.resolve(ticket.target_gen, RENDER_VERSION).tag == "t1"
    assert c.store.live_generations() == [ticket.target_gen]


def test_local_new_registration_binds_to_target():
    c = coordinator()
    old = reg(c, LOW)
    ticket = c.request_patch(patch(), Method.LOCAL)
    wait_for(lambda: ticket.target_gen is not None)
    new = reg(c, LOW)
    assert new.gen == ticket.target_gen
    assert new.thread_id in ticket.migrated_at
    assert c.quiescence_point(old).kind is OutcomeKind.MIGRATED
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED


def test_local_deregister_shrinks_quorum():
    c = coordinator()
    a, b = reg(c, LOW), reg(c, LOW)
    ticket = c.request_patch(patch(), Method.LOCAL)
    wait_for(lambda: ticket.target_gen is not None)
    assert c.quiescence_point(a).kind is OutcomeKind.MIGRATED
    assert not ticket.done.is_set()
    c.deregister_thread(b)
    rep = c.await_sync(ticket, 5)
    assert rep.status is TicketStatus.SYNCHRONIZED


def test_global_last_thread_leaves_vacuous_sync():
    c = coordinator()
    h = reg(c, LOW)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    time.sleep(0.01)
    assert not ticket.done.is_set()
    c.deregister_thread(h)
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED


def test_no_threads_syncs_immediately():
    c = coordinator()
    assert c.apply(patch(), Method.GLOBAL).status is TicketStatus.SYNCHRONIZED
    rep = c.apply(patch("t2"), Method.LOCAL)
    assert rep.status is TicketStatus.SYNCHRONIZED and rep.thread_waits == {}


def test_concurrent_ticket_and_category_errors():
    c = coordinator()
    reg(c, LOW)
    c.request_patch(patch(), Method.GLOBAL)
    with pytest.raises(PatchInFlight):
        c.request_patch(patch("t2"), Method.GLOBAL)
    with pytest.raises(CategoryViolation):
        c.request_patch(patch("t3", PatchCategory.PROCESS), Method.LOCAL)


def test_thread_group_patch_accepted_for_global():
    c = coordinator()
    rep = c.apply(patch("g", PatchCategory.THREAD_GROUP), Method.GLOBAL)
    assert rep.status is TicketStatus.SYNCHRONIZED


def test_park_during_global_registration_waits():
    c = coordinator()
    h = reg(c, LOW)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    got = []
    t = threading.Thread(target=lambda: got.append(
        c.register_thread(LOW, park_during_global=True)), daemon=True)
    t.start()
    time.sleep(0.05)
    assert got == []
    assert c.quiescence_point(h).kind is OutcomeKind.RELEASED_AFTER_GLOBAL
    t.join(5)
    assert len(got) == 1
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED


def test_parked_thread_excluded_from_quorum():
    c = coordinator()
    h = reg(c, LOW)
    with c.parked(h):
        rep = c.apply(patch(), Method.GLOBAL)
    assert rep.status is TicketStatus.SYNCHRONIZED


def test_blocked_thread_cannot_deregister():
    c = coordinator()
    h = reg(c, LOW)
    other = reg(c, LOW)
    ticket = c.request_patch(patch(), Method.GLOBAL)
    out = []
    t = spawn(c, h, out)
    wait_for(lambda: h.state is ThreadState.BLOCKED_AT_BARRIER)
    with pytest.raises(QuiescenceError):
        c.deregister_thread(h)
    with pytest.raises(QuiescenceError):
        c.set_priority(h, CRITICAL)
    c.quiescence_point(other)
    t.join(5)
    assert c.await_sync(ticket, 5).status is TicketStatus.SYNCHRONIZED


def test_global_cutover_is_atomic():
    c = coordinator()
    hs = [reg(c, LOW) for _ in range(4)]
    seen = {h.thread_id: [] for h in hs}
    stop = threading.Event()

    def worker(h):
        while not stop.is_set():
            seen[h.thread_id].append(c.store.resolve(h.gen, RENDER_VERSION).tag)
            c.quiescence_point(h)
            time.sleep(0.0002)

    ts = [threading.Thread(target=worker, args=(h,), daemon=True) for h in hs]
    for t in ts:
        t.start()
    time.sleep(0.02)
    rep = c.apply(patch(), Method.GLOBAL)
    time.sleep(0.02)
    stop.set()
    for t in ts:
        t.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED
    for tags in seen.values():
        # each thread sees v0 up to the barrier and t1 from then on
        k = tags.index("t1")
        assert set(tags[:k]) == {"v0"} and set(tags[k:]) == {"t1"}


# -- property suites ----------------------------------------------------------

@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.sampled_from(list(Priority)), min_size=1, max_size=6),
       st.lists(st.floats(0, 0.003), min_size=6, max_size=6))
def test_gate_soundness_and_blocking_order(prios, pauses):
    c = coordinator()
    hs = [reg(c, p) for p in prios]
    ticket = c.request_patch(patch(), Method.GLOBAL)
    outs = [[] for _ in hs]
    ts = [threading.Thread(target=run_until_released, args=(c, h, o, pauses[i]), daemon=True)
          for i, (h, o) in enumerate(zip(hs, outs))]
    for t in ts:
        t.start()
    rep = c.await_sync(ticket, 10)
    for t in ts:
        t.join(5)
    assert rep.status is TicketStatus.SYNCHRONIZED
    assert blocking_order_violations(ticket) == []
    assert gate_soundness_violations(ticket) == []
    assert all(o[-1] is OutcomeKind.RELEASED_AFTER_GLOBAL for o in outs)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 6), st.integers(1, 3))
def test_local_is_wait_free_and_monotone(nthreads, rounds):
    c = coordinator()
    hs = [reg(c, LOW) for _ in range(nthreads)]
    history = {h.thread_id: [h.gen] for h in hs}
    for r in range(rounds):
        ticket = c.request_patch(patch(f"r{r}"), Method.LOCAL)
        wait_for(lambda: ticket.target_gen is not None or ticket.done.is_set())
        for h in hs:
            c.quiescence_point(h)
            history[h.thread_id].append(h.gen)
        rep = c.await_sync(ticket, 5)
        assert rep.status is TicketStatus.SYNCHRONIZED
        assert ticket.qp_blocked_calls == 0
        assert set(ticket.qp_outcomes) <= {OutcomeKind.PASSED, OutcomeKind.MIGRATED}
        assert rep.sync_time >= rep.clone_duration
    for gens in history.values():
        assert gens == sorted(gens)
    assert c.store.live_generations() == [hs[0].gen]
