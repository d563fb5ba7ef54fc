"""Connection management policies with quiescence points.

Two policies are provided:

* :class:`OneThreadPerConnection` gives every connection its own thread and
  caches threads of closed connections for reuse.  The quiescence point sits
  just before each blocking read, and only outside a transaction.
* :class:`ThreadPool` divides connections round-robin over thread groups.  Each
  group has a FIFO queue of ready connections, a set of workers and at most one
  listener.  Workers hit their quiescence point before taking each event,
  listeners at the head of the poll loop.  Role decides priority: processing
  is LOW, sleeping MEDIUM, listening CRITICAL.
"""
from __future__ import annotations

import contextlib
import errno
import itertools
import logging
import os
import select
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Iterator

from .protocol import MAX_LINE, Executor, Session
from .quiescence import Coordinator, Priority, QuiescenceError, RegistrationHandle

log = logging.getLogger(__name__)


class WakePipe:
    """Self-pipe used to interrupt a select() from another thread."""

    def __init__(self):
        self.r, self.w = os.pipe()
        os.set_blocking(self.r, False)
        os.set_blocking(self.w, False)

    def fileno(self) -> int:
        return self.r

    def wake(self) -> None:
        try:
            os.write(self.w, b"x")
        except BlockingIOError:
            pass
        except OSError as e:
            if e.errno != errno.EBADF:
                raise

    def drain(self) -> None:
        try:
            while os.read(self.r, 4096):
                pass
        except (BlockingIOError, OSError):
            pass

    def close(self) -> None:
        for fd in (self.r, self.w):
            with contextlib.suppress(OSError):
                os.close(fd)


class Connection:
    """A client socket with its line buffer and session."""

    def __init__(self, sock: socket.socket, addr, conn_id: int, admin: bool):
        self.sock = sock
        self.addr = addr
        self.conn_id = conn_id
        self.session = Session(conn_id, admin)
        self.buf = bytearray()
        self.eof = False
        self.group: int | None = None
        sock.setblocking(True)
        with contextlib.suppress(OSError):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def fileno(self) -> int:
        return self.sock.fileno()

    def read_available(self) -> bool:
        """Pull whatever the socket has without blocking; False once the peer is gone."""
        while True:
            try:
                chunk = self.sock.recv(65536, socket.MSG_DONTWAIT)
            except (BlockingIOError, InterruptedError):
                return True
            except OSError:
                self.eof = True
                return False
            if not chunk:
                self.eof = True
                return False
            self.buf += chunk
            if len(chunk) < 65536:
                return True

    def next_line(self) -> bytes | None:
        i = self.buf.find(b"\n")
        if i < 0:
            if len(self.buf) > MAX_LINE:
                self.buf.clear()
                return b"\x00" * (MAX_LINE + 1)  # rejected by the parser as too long
            return None
        line = bytes(self.buf[:i])
        del self.buf[:i + 1]
        return line

    def send(self, text: str) -> bool:
        try:
            self.sock.sendall(text.encode() + b"\n")
            return True
        except OSError:
            self.eof = True
            return False

    def close(self) -> None:
        with contextlib.suppress(OSError):
            self.sock.shutdown(socket.SHUT_RDWR)
        with contextlib.suppress(OSError):
            self.sock.close()


def serve_available(conn: Connection, executor: Executor) -> bool:
    """Execute every complete line buffered on ``conn``.  False if it should close."""
    while True:
        line = conn.next_line()
        if line is None:
            return not conn.eof
        if not conn.send(executor.handle_line(line, conn.session)):
            return False
        if conn.session.closed:
            return False


def _rollback_session(executor: Executor, session: Session) -> None:
    if session.txn is not None:
        txn, session.txn = session.txn, None
        with contextlib.suppress(Exception):
            executor.engine.rollback(txn)


class Policy:
    name = "base"

    def __init__(self, coordinator: Coordinator, executor: Executor):
        self.coordinator = coordinator
        self.executor = executor
        self.stopping = threading.Event()
        self._lock = threading.Lock()
        self.open: dict[int, Connection] = {}

    def assign(self, conn: Connection) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        self.stopping.set()

    def stats(self) -> dict[str, object]:
        return {"policy": self.name, "connections": len(self.open)}

    def _opened(self, conn: Connection) -> None:
        with self._lock:
            self.open[conn.conn_id] = conn

    def _closed(self, conn: Connection) -> None:
        _rollback_session(self.executor, conn.session)
        conn.close()
        with self._lock:
            self.open.pop(conn.conn_id, None)


# -- one thread per connection ------------------------------------------------

class _CachedThread:
    def __init__(self):
        self.event = threading.Event()
        self.conn: Connection | None = None


class OneThreadPerConnection(Policy):
    name = "otpc"

    def __init__(self, coordinator: Coordinator, executor: Executor, *,
                 thread_cache_size: int = 16):
        super().__init__(coordinator, executor)
        self.thread_cache_size = thread_cache_size
        self.cache: list[_CachedThread] = []
        self.threads_spawned = 0
        self.threads_reused = 0
        self._threads: set[threading.Thread] = set()

    def assign(self, conn: Connection) -> None:
        self._opened(conn)
        with self._lock:
            if self.cache:
                slot = self.cache.pop()
                slot.conn = conn
                self.threads_reused += 1
                slot.event.set()
                return
            self.threads_spawned += 1
        t = threading.Thread(target=self._thread_main, args=(conn,), daemon=True,
                             name=f"conn-{conn.conn_id}")
        self._threads.add(t)
        t.start()

    def stop(self) -> None:
        super().stop()
        with self._lock:
            cached, self.cache = self.cache, []
            conns = list(self.open.values())
        for slot in cached:
            slot.event.set()
        for c in conns:
            c.close()

    def stats(self) -> dict[str, object]:
        st = super().stats()
        st.update(threads_spawned=self.threads_spawned, threads_reused=self.threads_reused,
                  threads_cached=len(self.cache))
        return st

    def _thread_main(self, conn: Connection) -> None:
        c = self.coordinator
        pipe = WakePipe()
        slot = _CachedThread()
        current: list[Session | None] = [None]

        def wake() -> None:
            pipe.wake()
            slot.event.set()

        h = c.register_thread(Priority.LOW, wake, name=f"conn-{conn.conn_id}",
                              holds_locks=lambda: current[0] is not None
                              and current[0].in_transaction(),
                              park_during_global=True)
        try:
            next_conn: Connection | None = conn
            while next_conn is not None and not self.stopping.is_set():
                current[0] = next_conn.session
                self._serve(next_conn, h, pipe)
                current[0] = None
                self._closed(next_conn)
                next_conn = self._cache_wait(h, slot)
        except Exception:
            log.exception("connection thread failed")
            if current[0] is not None and conn.session is current[0]:
                self._closed(conn)
        finally:
            with self._lock:
                if slot in self.cache:
                    self.cache.remove(slot)
            with contextlib.suppress(QuiescenceError):
                c.deregister_thread(h)
            pipe.close()
            self._threads.discard(threading.current_thread())

    def _serve(self, conn: Connection, h: RegistrationHandle, pipe: WakePipe) -> None:
        c = self.coordinator
        s = conn.session
        s.handle = h
        s.wait = None
        while not self.stopping.is_set():
            if not s.in_transaction():
                c.quiescence_point(h)
            line = conn.next_line()
            if line is None:
                if conn.eof:
                    return
                with c.interruptible(h):
                    ready = _select_read([conn.fileno(), pipe.r])
                if pipe.r in ready:
                    pipe.drain()
                if conn.fileno() in ready and not conn.read_available():
                    if not conn.buf:
                        return
                continue
            if not conn.send(self.executor.handle_line(line, s)) or s.closed:
                return

    def _cache_wait(self, h: RegistrationHandle, slot: _CachedThread) -> Connection | None:
        c = self.coordinator
        with self._lock:
            if self.stopping.is_set() or len(self.cache) >= self.thread_cache_size:
                return None
            c.set_priority(h, Priority.MEDIUM)
            slot.conn = None
            slot.event.clear()
            self.cache.append(slot)
        while True:
            with c.sleeping(h):
                slot.event.wait()
            if self.stopping.is_set():
                return None
            with self._lock:
                conn, slot.conn = slot.conn, None
                slot.event.clear()
            c.quiescence_point(h)
            if conn is not None:
                while not c.set_priority(h, Priority.LOW):
                    c.quiescence_point(h)
                return conn


def _select_read(fds: list[int]) -> set[int]:
    p = select.poll()
    for fd in fds:
        p.register(fd, select.POLLIN)
    try:
        return {fd for fd, _ in p.poll()}
    except InterruptedError:
        return set()


# -- thread pool --------------------------------------------------------------

@dataclass(frozen=True)
class RoleEvent:
    t: int
    group: int
    thread_id: int
    role: str
    priority: Priority
    listeners: int


class _Worker:
    def __init__(self, group: "ThreadGroup", wid: int):
        self.group = group
        self.wid = wid
        self.event = threading.Event()
        self.handle: RegistrationHandle | None = None
        self.session: Session | None = None
        self.dedicated = False
        self.fresh = True
        self.busy_polls = 0
        self.idle_polls = 0

    def wake(self) -> None:
        self.event.set()
        if self.group.listener is self:
            self.group.pipe.wake()


class ThreadGroup:
    def __init__(self, pool: "ThreadPool", group_id: int):
        self.pool = pool
        self.group_id = group_id
        self.lock = threading.Lock()
        self.queue: deque[Connection] = deque()
        self.returned: deque[Connection] = deque()
        self.workers: set[_Worker] = set()
        self.sleepers: list[_Worker] = []
        self.listener: _Worker | None = None
        self.active = 0
        self.pipe = WakePipe()
        self.selector = selectors.DefaultSelector()
        self.selector.register(self.pipe.r, selectors.EVENT_READ, None)
        self.started = False
        self.connections = 0
        self.enqueued = 0
        self.dequeued = 0
        self.spawned = 0

    # caller holds self.lock
    def _wake_or_spawn(self) -> None:
        if self.sleepers:
            w = self.sleepers.pop()
            w.event.set()
        elif (self.active == 0 and len(self.workers) < self.pool.worker_cap_per_group
              and not self.pool.coordinator.registration_would_park(Priority.LOW)):
            # a new worker would only park until the barrier lifts; every LOW thread
            # is already blocked then, so the event simply waits for the release
            self._spawn()

    def _spawn(self) -> None:
        w = _Worker(self, next(self.pool._wids))
        self.workers.add(w)
        self.spawned += 1
        threading.Thread(target=self.pool._worker_main, args=(w,), daemon=True,
                         name=f"pool-{self.group_id}-{w.wid}").start()

    def add_connection(self, conn: Connection) -> None:
        with self.lock:
            self.connections += 1
            self.returned.append(conn)
            if not self.started:
                self.started = True
                self._spawn()
        self.pipe.wake()


class ThreadPool(Policy):
    name = "pool"

    def __init__(self, coordinator: Coordinator, executor: Executor, *, groups: int = 3,
                 worker_cap_per_group: int = 8, dedicated_threshold: int = 100,
                 role_log: int = 100000):
        super().__init__(coordinator, executor)
        if groups < 1:
            raise ValueError("pool needs at least one group")
        self.worker_cap_per_group = max(1, worker_cap_per_group)
        self.dedicated_threshold = dedicated_threshold
        self.groups = [ThreadGroup(self, i) for i in range(groups)]
        self._rr = itertools.count()
        self._wids = itertools.count(1)
        self.role_log: deque[RoleEvent] = deque(maxlen=role_log)

    def assign(self, conn: Connection) -> int:
        g = self.groups[next(self._rr) % len(self.groups)]
        conn.group = g.group_id
        self._opened(conn)
        g.add_connection(conn)
        return g.group_id

    def active_groups(self) -> list[int]:
        return [g.group_id for g in self.groups if g.started]

    def stop(self) -> None:
        super().stop()
        for g in self.groups:
            with g.lock:
                workers = list(g.workers)
            for w in workers:
                w.event.set()
            g.pipe.wake()
        with self._lock:
            conns = list(self.open.values())
        for c in conns:
            c.close()

    def stats(self) -> dict[str, object]:
        st = super().stats()
        st.update(groups=len(self.groups), active_groups=len(self.active_groups()),
                  workers=sum(len(g.workers) for g in self.groups))
        return st

    def _role(self, g: ThreadGroup, w: _Worker, role: str) -> None:
        h = w.handle
        self.role_log.append(RoleEvent(time.perf_counter_ns(), g.group_id, h.thread_id, role,
                                       h.priority, int(g.listener is not None)))

    # -- worker ------------------------------------------------------------

    def _worker_main(self, w: _Worker) -> None:
        g = w.group
        c = self.coordinator
        w.handle = c.register_thread(Priority.LOW, w.wake, name=f"pool-{g.group_id}-{w.wid}",
                                     holds_locks=lambda: w.session is not None
                                     and w.session.in_transaction())
        try:
            while not self.stopping.is_set():
                conn = self._get_event(w)
                if conn is None:
                    break
                self._process(w, conn)
        except Exception:
            log.exception("pool worker failed")
        finally:
            with g.lock:
                g.workers.discard(w)
                if w in g.sleepers:
                    g.sleepers.remove(w)
                if g.listener is w:
                    g.listener = None
            with contextlib.suppress(QuiescenceError):
                c.deregister_thread(w.handle)

    def _get_event(self, w: _Worker) -> Connection | None:
        g = w.group
        c = self.coordinator
        h = w.handle
        while not self.stopping.is_set():
            if w.fresh:
                # a just-spawned thread starts on the current generation holding
                # nothing, so it takes its first event without a barrier check
                w.fresh = False
            else:
                c.quiescence_point(h)
            with g.lock:
                if g.queue:
                    if c.set_priority(h, Priority.LOW):
                        g.active += 1
                        g.dequeued += 1
                        self._role(g, w, "worker")
                        return g.queue.popleft()
                    c.set_priority(h, Priority.MEDIUM)
                    continue
                if g.listener is None:
                    c.set_priority(h, Priority.CRITICAL)
                    g.listener = w
                    self._role(g, w, "listener")
                    listen = True
                else:
                    c.set_priority(h, Priority.MEDIUM)
                    w.event.clear()
                    g.sleepers.append(w)
                    self._role(g, w, "sleep")
                    listen = False
            if listen:
                conn = self._listen(w)
                if conn is not None:
                    return conn
                continue
            with c.sleeping(h):
                w.event.wait()
            with g.lock:
                if w in g.sleepers:
                    g.sleepers.remove(w)
        return None

    def _listen(self, w: _Worker) -> Connection | None:
        g = w.group
        c = self.coordinator
        h = w.handle
        try:
            while not self.stopping.is_set():
                c.quiescence_point(h)
                with g.lock:
                    while g.returned:
                        conn = g.returned.popleft()
                        try:
                            g.selector.register(conn.sock, selectors.EVENT_READ, conn)
                        except (ValueError, KeyError, OSError):
                            self._closed(conn)
                with c.interruptible(h):
                    try:
                        events = g.selector.select()
                    except OSError:
                        events = []
                ready = []
                for key, _ in events:
                    if key.data is None:
                        g.pipe.drain()
                        continue
                    with contextlib.suppress(KeyError, ValueError):
                        g.selector.unregister(key.fileobj)
                    ready.append(key.data)
                with g.lock:
                    if not w.dedicated and ready and not g.queue:
                        if c.set_priority(h, Priority.LOW):
                            mine = ready.pop(0)
                            g.listener = None
                            g.active += 1
                            g.enqueued += 1
                            g.dequeued += 1
                            self._role(g, w, "worker")
                            g.queue.extend(ready)
                            g.enqueued += len(ready)
                            if g.queue:
                                g._wake_or_spawn()
                            return mine
                    g.queue.extend(ready)
                    g.enqueued += len(ready)
                    if g.queue:
                        w.busy_polls += 1
                        w.idle_polls = 0
                        g._wake_or_spawn()
                    else:
                        w.idle_polls += 1
                        w.busy_polls = 0
                    if not w.dedicated and w.busy_polls >= self.dedicated_threshold:
                        w.dedicated = True
                        self._role(g, w, "dedicated")
                    elif w.dedicated and w.idle_polls >= self.dedicated_threshold:
                        w.dedicated = False
                        self._role(g, w, "listener")
            return None
        finally:
            with g.lock:
                if g.listener is w:
                    g.listener = None
                    w.dedicated = False

    def _process(self, w: _Worker, conn: Connection) -> None:
        g = w.group
        c = self.coordinator
        h = w.handle
        s = conn.session
        s.handle = h
        s.wait = lambda: self._waiting(w)
        if s.last_gen > h.gen:
            c.catch_up(h)
        w.session = s
        try:
            conn.read_available()
            alive = serve_available(conn, self.executor)
        except Exception:
            log.exception("request processing failed")
            alive = False
        finally:
            w.session = None
            s.handle = None
            s.wait = None
            with g.lock:
                g.active -= 1
        if not alive:
            self._closed(conn)
            return
        with g.lock:
            g.returned.append(conn)
        g.pipe.wake()

    @contextlib.contextmanager
    def _waiting(self, w: _Worker) -> Iterator[None]:
        """Engine wait hook: make sure the group keeps listening while this worker waits."""
        g = w.group
        with g.lock:
            g.active -= 1
            if g.listener is None or g.queue:
                g._wake_or_spawn()
        try:
            yield
        finally:
            with g.lock:
                g.active += 1


def make_policy(name: str, coordinator: Coordinator, executor: Executor, *,
                pool_groups: int = 3, worker_cap_per_group: int = 8,
                thread_cache_size: int = 16, dedicated_threshold: int = 100) -> Policy:
    if name in ("otpc", "one_thread_per_connection"):
        return OneThreadPerConnection(coordinator, executor, thread_cache_size=thread_cache_size)
    if name in ("pool", "thread_pool"):
        return ThreadPool(coordinator, executor, groups=pool_groups,
                          worker_cap_per_group=worker_cap_per_group,
                          dedicated_threshold=dedicated_threshold)
    raise ValueError(f"unknown policy {name!r}")
