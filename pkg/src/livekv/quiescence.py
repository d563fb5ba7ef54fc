"""Thread quiescence coordination for live patching.

Managed threads register with a priority and call :meth:`Coordinator.quiescence_point`
from places where they hold no engine locks.  A patch request produces a
:class:`PatchTicket`; a dedicated patcher thread drives it to completion:

* ``GLOBAL``: every registered thread blocks at a barrier, the patch is written
  into the current generation in place, and everyone is released together.
  Unless ``naive`` is set, a thread only blocks once every registered thread of
  strictly lower priority has blocked; until then its quiescence point is
  skipped.
* ``LOCAL``: the current generation is cloned and patched in the background,
  then each thread migrates on its own at its next quiescence point.  Nothing
  ever blocks.

The patcher keeps waking sleeping threads and threads parked in interruptible
waits until the ticket resolves, and gives up after ``watchdog_timeout``.
"""
from __future__ import annotations

import contextlib
import enum
import logging
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .generations import GenerationError, GenerationStore
from .patches import Method, PatchSpec, validate

log = logging.getLogger(__name__)


class Priority(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    CRITICAL = 2


class ThreadState(enum.Enum):
    RUNNING = "running"
    BLOCKED_AT_BARRIER = "blocked"
    SLEEPING = "sleeping"
    MIGRATED = "migrated"
    PARKED = "parked"


class TicketStatus(enum.Enum):
    PENDING = "pending"
    SYNCHRONIZED = "synchronized"
    FAILED = "failed"


class OutcomeKind(enum.Enum):
    PASSED = "passed"
    MIGRATED = "migrated"
    RELEASED_AFTER_GLOBAL = "released"
    SKIPPED = "skipped"
    ABORTED = "aborted"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    gen: int


class QuiescenceError(Exception):
    pass


class PatchInFlight(QuiescenceError):
    pass


class CategoryViolation(QuiescenceError):
    pass


class QuiescenceViolation(QuiescenceError):
    """A quiescence point was reached while the thread still held engine locks."""


@dataclass(eq=False)
class RegistrationHandle:
    thread_id: int
    name: str
    priority: Priority
    wake_callback: Callable[[], None] | None = None
    holds_locks: Callable[[], bool] | None = None
    ident: int = 0
    state: ThreadState = ThreadState.RUNNING
    gen: int = 0
    waiting: bool = False
    woken: bool = False
    registered: bool = True


@dataclass(frozen=True)
class LogEntry:
    t: int
    thread_id: int
    kind: str
    priority: Priority | None = None
    detail: object = None


@dataclass(frozen=True)
class SyncReport:
    ticket_id: int
    method: Method
    status: TicketStatus
    requested_at: int
    sync_time: float
    apply_duration: float
    clone_duration: float | None
    reach_quiescence: float | None
    thread_waits: dict[int, float]
    migrate_median: float | None
    deadlock: bool
    reason: str | None = None


@dataclass(eq=False)
class PatchTicket:
    ticket_id: int
    patch: PatchSpec
    method: Method
    requested_at: int
    snapshot: dict[int, tuple[Priority, ThreadState]]
    target_gen: int | None = None
    status: TicketStatus = TicketStatus.PENDING
    phase: str = "arming"
    reason: str | None = None
    reached_barrier_at: dict[int, int] = field(default_factory=dict)
    barrier_priority: dict[int, Priority] = field(default_factory=dict)
    migrated_at: dict[int, int] = field(default_factory=dict)
    migrate_durations: list[float] = field(default_factory=list)
    qp_blocked_calls: int = 0
    qp_outcomes: dict[OutcomeKind, int] = field(default_factory=dict)
    events: list[LogEntry] = field(default_factory=list)
    clone_duration: float | None = None
    apply_duration: float = 0.0
    ready_at: int | None = None
    quiesced_at: int | None = None
    finished_at: int | None = None
    report: SyncReport | None = None
    done: threading.Event = field(default_factory=threading.Event)


def _now() -> int:
    return time.perf_counter_ns()


class Coordinator:
    def __init__(self, store: GenerationStore, *, naive: bool = False,
                 watchdog_timeout: float = 10.0, wakeup_interval: float = 0.001,
                 history: int = 5000):
        self.store = store
        self.naive = naive
        self.watchdog_timeout = watchdog_timeout
        self.wakeup_interval = wakeup_interval
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._handles: dict[int, RegistrationHandle] = {}
        self._idents: set[int] = set()
        self._next_thread = 1
        self._next_ticket = 1
        self._active: PatchTicket | None = None
        self._pending: PatchTicket | None = None
        self.tickets: deque[PatchTicket] = deque(maxlen=history)

    # -- registration -----------------------------------------------------

    def register_thread(self, priority: Priority, wake_callback: Callable[[], None] | None = None,
                        *, name: str | None = None, holds_locks: Callable[[], bool] | None = None,
                        park_during_global: bool = False,
                        ident: int | None = None) -> RegistrationHandle:
        """Register the calling thread.

        Registration waits while a global barrier is being applied, or when
        joining now would put a lower-priority thread behind one that already
        blocked.  ``park_during_global`` makes it wait out any global ticket,
        which is what new connections do.
        """
        ident = threading.get_ident() if ident is None else ident
        with self._cv:
            if ident in self._idents:
                raise QuiescenceError(f"thread {ident} already registered")
            while self._must_park(priority, park_during_global):
                self._cv.wait()
            tid = self._next_thread
            self._next_thread += 1
            h = RegistrationHandle(tid, name or f"thread-{tid}", Priority(priority),
                                   wake_callback, holds_locks, ident)
            self.store.bind_thread(h)
            self._handles[tid] = h
            self._idents.add(ident)
            t = self._pending
            if t is not None:
                self._log(t, h, "register")
                if t.method is Method.LOCAL and t.target_gen == h.gen:
                    t.migrated_at[tid] = _now()
            return h

    def deregister_thread(self, handle: RegistrationHandle) -> None:
        with self._cv:
            self._check_registered(handle)
            if handle.state is ThreadState.BLOCKED_AT_BARRIER:
                raise QuiescenceError("cannot deregister a thread blocked at the barrier")
            del self._handles[handle.thread_id]
            self._idents.discard(handle.ident)
            handle.registered = False
            self.store.unbind_thread(handle)
            if self._pending is not None:
                self._log(self._pending, handle, "deregister")
            self._cv.notify_all()

    @property
    def registered(self) -> list[RegistrationHandle]:
        with self._lock:
            return list(self._handles.values())

    def set_priority(self, handle: RegistrationHandle, priority: Priority) -> bool:
        """Change the priority used by future quiescence points.

        Raising a priority always succeeds.  Lowering it is refused (returns
        False) while a global barrier already holds a thread of higher
        priority than the new one: taking on lower-priority work at that point
        would break the blocking order, so the caller must reach its
        quiescence point instead.
        """
        with self._cv:
            self._check_registered(handle)
            if handle.state is ThreadState.BLOCKED_AT_BARRIER:
                raise QuiescenceError("set_priority called while blocked at the barrier")
            priority = Priority(priority)
            if priority == handle.priority:
                return True
            if priority < handle.priority and self._closing_above(priority):
                return False
            handle.priority = priority
            if self._pending is not None:
                self._log(self._pending, handle, "priority")
            return True

    @contextlib.contextmanager
    def sleeping(self, handle: RegistrationHandle) -> Iterator[None]:
        with self._lock:
            handle.state = ThreadState.SLEEPING
            handle.woken = False
            if self._pending is not None:
                self._log(self._pending, handle, "sleep")
        try:
            yield
        finally:
            with self._lock:
                handle.state = ThreadState.RUNNING
                if self._pending is not None:
                    self._log(self._pending, handle, "wake")

    @contextlib.contextmanager
    def interruptible(self, handle: RegistrationHandle) -> Iterator[None]:
        """Mark a blocking wait the patcher may interrupt via the wake callback."""
        handle.woken = False
        handle.waiting = True
        try:
            yield
        finally:
            handle.waiting = False

    @contextlib.contextmanager
    def parked(self, handle: RegistrationHandle) -> Iterator[None]:
        """Leave the quorum while waiting on the control plane (e.g. ``PATCH APPLY``)."""
        with self._cv:
            self._check_registered(handle)
            if handle.state is ThreadState.BLOCKED_AT_BARRIER:
                raise QuiescenceError("cannot park a thread blocked at the barrier")
            handle.state = ThreadState.PARKED
            if self._pending is not None:
                self._log(self._pending, handle, "park")
            self._cv.notify_all()
        try:
            yield
        finally:
            with self._cv:
                while self._must_park(handle.priority, False):
                    self._cv.wait()
                handle.state = ThreadState.RUNNING
                if self._pending is not None:
                    self._log(self._pending, handle, "unpark")
                if handle.gen != self.store.current:
                    self._migrate(handle, self._active)

    def registration_would_park(self, priority: Priority) -> bool:
        """Whether a thread registering now with ``priority`` would have to wait."""
        with self._lock:
            return self._must_park(priority, False)

    def catch_up(self, handle: RegistrationHandle) -> None:
        """Move a thread that holds no locks onto the current generation right away."""
        with self._cv:
            self._check_registered(handle)
            if handle.gen != self.store.current:
                self._migrate(handle, self._active)

    # -- quiescence point -------------------------------------------------

    def quiescence_point(self, handle: RegistrationHandle) -> Outcome:
        if handle.holds_locks is not None and handle.holds_locks():
            raise QuiescenceViolation(f"{handle.name} reached a quiescence point inside a transaction")
        if self._active is None and handle.gen == self.store.current:
            if not handle.registered:
                raise QuiescenceError("unregistered handle")
            return Outcome(OutcomeKind.PASSED, handle.gen)
        with self._cv:
            self._check_registered(handle)
            if handle.state is ThreadState.BLOCKED_AT_BARRIER:
                raise QuiescenceError("re-entrant quiescence point")
            t = self._active
            if t is None or t.method is Method.LOCAL:
                if handle.gen == self.store.current:
                    return self._outcome(t, OutcomeKind.PASSED, handle.gen)
                self._migrate(handle, t)
                return self._outcome(t, OutcomeKind.MIGRATED, handle.gen)
            if t.phase != "waiting":
                return self._outcome(t, OutcomeKind.PASSED, handle.gen)
            if not self.naive:
                for o in self._handles.values():
                    if (o is not handle and o.priority < handle.priority
                            and o.state is not ThreadState.BLOCKED_AT_BARRIER
                            and o.state is not ThreadState.PARKED):
                        self._log(t, handle, "skip")
                        return self._outcome(t, OutcomeKind.SKIPPED, handle.gen)
            handle.state = ThreadState.BLOCKED_AT_BARRIER
            t.reached_barrier_at[handle.thread_id] = _now()
            t.barrier_priority[handle.thread_id] = handle.priority
            t.qp_blocked_calls += 1
            self._log(t, handle, "block")
            self._cv.notify_all()
            while t.phase not in ("released", "aborted"):
                self._cv.wait()
            handle.state = ThreadState.RUNNING
            kind = (OutcomeKind.RELEASED_AFTER_GLOBAL if t.phase == "released"
                    else OutcomeKind.ABORTED)
            return self._outcome(t, kind, handle.gen)

    # -- control plane ----------------------------------------------------

    def request_patch(self, patch: PatchSpec, method: Method) -> PatchTicket:
        method = Method(method)
        verdict = validate(patch, method)
        if not verdict:
            raise CategoryViolation(f"{patch.patch_id}: {verdict.reason}")
        with self._cv:
            if self._pending is not None:
                raise PatchInFlight(f"ticket {self._pending.ticket_id} still pending")
            t = PatchTicket(self._next_ticket, patch, method, _now(),
                            {tid: (h.priority, h.state) for tid, h in self._handles.items()})
            self._next_ticket += 1
            self._pending = t
            if method is Method.GLOBAL:
                t.phase = "waiting"
                self._active = t
                self._cv.notify_all()
        threading.Thread(target=self.run_patcher, args=(t,), daemon=True,
                         name=f"patcher-{t.ticket_id}").start()
        return t

    def await_sync(self, ticket: PatchTicket, timeout: float | None = None) -> SyncReport | None:
        if not ticket.done.wait(timeout):
            return None
        return ticket.report

    def apply(self, patch: PatchSpec, method: Method) -> SyncReport:
        return self.await_sync(self.request_patch(patch, method))

    def run_patcher(self, ticket: PatchTicket) -> SyncReport:
        try:
            if ticket.method is Method.GLOBAL:
                self._run_global(ticket)
            else:
                self._run_local(ticket)
        except Exception as e:  # keep the server alive whatever the patch does
            log.exception("patcher failed")
            with self._cv:
                if ticket.status is TicketStatus.PENDING:
                    self._finish(ticket, TicketStatus.FAILED, reason=str(e))
        return ticket.report

    def _run_global(self, t: PatchTicket) -> None:
        deadline = t.requested_at + int(self.watchdog_timeout * 1e9)
        with self._cv:
            while True:
                if self._quorum_blocked():
                    t.quiesced_at = _now()
                    t.phase = "applying"
                    try:
                        t.apply_duration = self.store.apply_patch_in_place(t.patch).duration
                    except GenerationError as e:
                        t.phase = "aborted"
                        self._finish(t, TicketStatus.FAILED, reason=str(e))
                        return
                    t.phase = "released"
                    self._finish(t, TicketStatus.SYNCHRONIZED)
                    return
                now = _now()
                if now >= deadline:
                    t.phase = "aborted"
                    self._finish(t, TicketStatus.FAILED, reason="quiescence deadlock", deadlock=True)
                    return
                self._wake_all()
                self._cv.wait(min(self.wakeup_interval, (deadline - now) / 1e9))

    def _run_local(self, t: PatchTicket) -> None:
        try:
            gen = self.store.clone_generation(self.store.current)
            t.clone_duration = self.store.clone_cost
            t.apply_duration = self.store.apply_patch_to_generation(gen, t.patch).duration
        except GenerationError as e:
            with self._cv:
                self._finish(t, TicketStatus.FAILED, reason=str(e))
            return
        deadline = t.requested_at + int(self.watchdog_timeout * 1e9)
        with self._cv:
            t.target_gen = gen
            t.ready_at = _now()
            self.store.set_current(gen)
            t.phase = "waiting"
            self._active = t
            self._log(t, None, "ready", detail=gen)
            while True:
                if all(h.gen == gen for h in self._handles.values()
                       if h.state is not ThreadState.PARKED):
                    self._finish(t, TicketStatus.SYNCHRONIZED)
                    return
                now = _now()
                if now >= deadline:
                    self._finish(t, TicketStatus.FAILED, reason="migration timeout", deadlock=True)
                    return
                self._wake_all()
                self._cv.wait(min(self.wakeup_interval, (deadline - now) / 1e9))

    # -- internals (caller holds the lock) --------------------------------

    def _check_registered(self, h: RegistrationHandle) -> None:
        if not h.registered or self._handles.get(h.thread_id) is not h:
            raise QuiescenceError("unregistered handle")

    def _closing_above(self, priority: Priority) -> bool:
        t = self._active
        if self.naive or t is None or t.method is not Method.GLOBAL:
            return False
        return any(o.state is ThreadState.BLOCKED_AT_BARRIER and o.priority > priority
                   for o in self._handles.values())

    def _must_park(self, priority: Priority, park_during_global: bool) -> bool:
        t = self._active
        if t is None or t.method is not Method.GLOBAL:
            return False
        if t.phase == "applying" or park_during_global:
            return True
        return self._closing_above(priority)

    def _quorum_blocked(self) -> bool:
        return all(h.state is ThreadState.BLOCKED_AT_BARRIER or h.state is ThreadState.PARKED
                   for h in self._handles.values())

    def _wake_all(self) -> None:
        for h in self._handles.values():
            if (h.wake_callback is not None and not h.woken
                    and (h.state is ThreadState.SLEEPING or h.waiting)):
                h.woken = True
                h.wake_callback()

    def _migrate(self, h: RegistrationHandle, t: PatchTicket | None) -> None:
        old = h.gen
        rep = self.store.migrate_thread(h, self.store.current)
        if t is not None and t.method is Method.LOCAL and h.gen == t.target_gen:
            t.migrated_at[h.thread_id] = _now()
            t.migrate_durations.append(rep.duration)
            h.state = ThreadState.MIGRATED if h.state is ThreadState.RUNNING else h.state
            self._log(t, h, "migrate", detail=h.gen)
            self._cv.notify_all()
        elif t is None:
            self._retire_idle(old)

    def _retire_idle(self, *gens: int) -> None:
        for g in gens or self.store.live_generations():
            if g == self.store.current:
                continue
            try:
                if self.store.generation(g).refcount == 0:
                    self.store.retire_generation(g)
            except GenerationError:
                pass

    def _outcome(self, t: PatchTicket | None, kind: OutcomeKind, gen: int) -> Outcome:
        if t is not None:
            t.qp_outcomes[kind] = t.qp_outcomes.get(kind, 0) + 1
        return Outcome(kind, gen)

    def _log(self, t: PatchTicket, h: RegistrationHandle | None, kind: str,
             detail: object = None) -> None:
        t.events.append(LogEntry(_now(), h.thread_id if h else 0, kind,
                                 h.priority if h else None, detail))

    def _finish(self, t: PatchTicket, status: TicketStatus, *, reason: str | None = None,
                deadlock: bool = False) -> None:
        t.status = status
        t.reason = reason
        t.finished_at = _now()
        if t.phase not in ("released", "aborted"):
            t.phase = "released" if status is TicketStatus.SYNCHRONIZED else "aborted"
        for h in self._handles.values():
            if h.state is ThreadState.MIGRATED:
                h.state = ThreadState.RUNNING
        t.report = self._report(t, deadlock)
        self._log(t, None, "finish", detail=status.value)
        self._active = None
        self._pending = None
        self.tickets.append(t)
        if status is TicketStatus.SYNCHRONIZED:
            self._retire_idle()
        t.done.set()
        self._cv.notify_all()

    def _report(self, t: PatchTicket, deadlock: bool) -> SyncReport:
        end = t.finished_at
        if t.method is Method.GLOBAL:
            waits = {tid: (end - at) / 1e9 for tid, at in t.reached_barrier_at.items()}
            reach = (t.quiesced_at - t.requested_at) / 1e9 if t.quiesced_at else None
            mig = None
        else:
            ready = t.ready_at or end
            waits = {tid: max(0, at - ready) / 1e9 for tid, at in t.migrated_at.items()}
            reach = (max(t.migrated_at.values(), default=ready) - ready) / 1e9 if t.ready_at else None
            mig = statistics.median(t.migrate_durations) if t.migrate_durations else None
            if t.status is TicketStatus.SYNCHRONIZED:
                end = max(t.migrated_at.values(), default=ready)
        return SyncReport(t.ticket_id, t.method, t.status, t.requested_at,
                          (end - t.requested_at) / 1e9, t.apply_duration, t.clone_duration,
                          reach, waits, mig, deadlock, t.reason)


# -- invariant checks over a ticket's event log -------------------------------

def blocking_order_violations(ticket: PatchTicket) -> list[str]:
    """Every LOW barrier entry precedes every MEDIUM one, which precede CRITICAL ones."""
    by_prio: dict[Priority, list[int]] = {p: [] for p in Priority}
    for tid, at in ticket.reached_barrier_at.items():
        by_prio[ticket.barrier_priority[tid]].append(at)
    out = []
    levels = [p for p in Priority if by_prio[p]]
    for lo, hi in zip(levels, levels[1:]):
        if max(by_prio[lo]) > min(by_prio[hi]):
            out.append(f"ticket {ticket.ticket_id}: {lo.name} blocked after {hi.name}")
    return out


def gate_soundness_violations(ticket: PatchTicket) -> list[str]:
    """Replay the event log and check no thread blocks ahead of a lower-priority one."""
    prio = {tid: p for tid, (p, _) in ticket.snapshot.items()}
    state = {tid: s for tid, (_, s) in ticket.snapshot.items()}
    out = []

    def check(at: int) -> None:
        for tid, s in state.items():
            if s is not ThreadState.BLOCKED_AT_BARRIER:
                continue
            for other, os_ in state.items():
                if (os_ not in (ThreadState.BLOCKED_AT_BARRIER, ThreadState.PARKED)
                        and prio[other] < prio[tid]):
                    out.append(f"t={at}: thread {tid} ({prio[tid].name}) blocked while "
                               f"thread {other} ({prio[other].name}) was {os_.value}")

    for e in ticket.events:
        if e.kind == "register":
            prio[e.thread_id] = e.priority
            state[e.thread_id] = ThreadState.RUNNING
        elif e.kind == "deregister":
            prio.pop(e.thread_id, None)
            state.pop(e.thread_id, None)
        elif e.kind == "priority":
            prio[e.thread_id] = e.priority
        elif e.kind == "block":
            prio[e.thread_id] = e.priority
            state[e.thread_id] = ThreadState.BLOCKED_AT_BARRIER
        elif e.kind == "sleep":
            state[e.thread_id] = ThreadState.SLEEPING
        elif e.kind in ("wake", "unpark"):
            state[e.thread_id] = ThreadState.RUNNING
        elif e.kind == "park":
            state[e.thread_id] = ThreadState.PARKED
        elif e.kind == "finish":
            break
        else:
            continue
        if ticket.method is Method.GLOBAL:
            check(e.t)
    return out
