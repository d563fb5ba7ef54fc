"""In-memory key-value engine: page log, exclusive key locks, transactions.

Records are appended to a log of 4 KiB pages mapped through the generation
store as shared data pages, so the page count grows with the data and every
code generation's page index covers it.  Overwrites and deletes only update
the key index; old records stay in their pages.
"""
from __future__ import annotations

import contextlib
import enum
import itertools
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, ContextManager

from .functions import TRANSFORM_VALUE, transform_value
from .generations import PAGE_SIZE, GenerationStore

RECORD_HEADER = struct.Struct("<II")
MAX_KEY = 256
MAX_VALUE = 1 << 20
PRELOAD_PREFIX = "__preload/"

WaitHook = Callable[[], ContextManager]


class EngineError(Exception):
    code = 500


class KeyMissing(EngineError):
    code = 404


class TxnStateError(EngineError):
    code = 409


class LockTimeout(EngineError):
    code = 408


class CapacityExceeded(EngineError):
    code = 413


class BadArgument(EngineError):
    code = 400


class TxnState(enum.Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


_txn_ids = itertools.count(1)


@dataclass(eq=False)
class Transaction:
    txn_id: int = field(default_factory=lambda: next(_txn_ids))
    locks: set[str] = field(default_factory=set)
    writes: dict[str, bytes | None] = field(default_factory=dict)
    state: TxnState = TxnState.ACTIVE


@dataclass(eq=False)
class _Waiter:
    txn: Transaction
    granted: threading.Event = field(default_factory=threading.Event)


class LockManager:
    """Exclusive, reentrant per-key locks granted in FIFO order."""

    def __init__(self, wait_timeout: float = 5.0):
        self.wait_timeout = wait_timeout
        self._mutex = threading.Lock()
        self._owners: dict[str, Transaction] = {}
        self._queues: dict[str, deque[_Waiter]] = {}

    def holder(self, key: str) -> Transaction | None:
        return self._owners.get(key)

    def waiters(self, key: str) -> list[Transaction]:
        with self._mutex:
            return [w.txn for w in self._queues.get(key, ())]

    def acquire(self, txn: Transaction, key: str, timeout: float | None = None,
                wait: WaitHook | None = None) -> None:
        with self._mutex:
            owner = self._owners.get(key)
            if owner is None:
                self._owners[key] = txn
                txn.locks.add(key)
                return
            if owner is txn:
                return
            w = _Waiter(txn)
            self._queues.setdefault(key, deque()).append(w)
        timeout = self.wait_timeout if timeout is None else timeout
        with (wait or contextlib.nullcontext)():
            granted = w.granted.wait(timeout)
        if granted:
            return
        with self._mutex:
            if w.granted.is_set():
                return
            q = self._queues[key]
            q.remove(w)
            if not q:
                del self._queues[key]
        raise LockTimeout(f"lock wait timeout on {key!r}")

    def release_all(self, txn: Transaction) -> None:
        with self._mutex:
            for key in txn.locks:
                q = self._queues.get(key)
                if q:
                    w = q.popleft()
                    if not q:
                        del self._queues[key]
                    self._owners[key] = w.txn
                    w.txn.locks.add(key)
                    w.granted.set()
                else:
                    del self._owners[key]
            txn.locks.clear()


class PageLog:
    def __init__(self, store: GenerationStore, max_pages: int):
        self.store = store
        self.max_pages = max_pages
        self.pages: list[bytearray] = []
        self.vpages: list[int] = []
        self.cursor = 0

    def _ensure(self, end: int) -> None:
        need = -(-end // PAGE_SIZE) - len(self.pages)
        if need <= 0:
            return
        if len(self.pages) + need > self.max_pages:
            raise CapacityExceeded(f"store capacity of {self.max_pages} pages exceeded")
        for vp, buf in self.store.map_data_pages(need):
            self.vpages.append(vp)
            self.pages.append(buf)

    def _write(self, pos: int, data: bytes) -> None:
        mv = memoryview(data)
        while mv:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(len(mv), PAGE_SIZE - off)
            self.pages[page][off:off + n] = mv[:n]
            mv = mv[n:]
            pos += n

    def read(self, pos: int, length: int) -> bytes:
        out = bytearray()
        while length:
            page, off = divmod(pos, PAGE_SIZE)
            n = min(length, PAGE_SIZE - off)
            out += self.pages[page][off:off + n]
            pos += n
            length -= n
        return bytes(out)

    def append(self, key: bytes, value: bytes) -> int:
        pos = self.cursor
        end = pos + RECORD_HEADER.size + len(key) + len(value)
        self._ensure(end)
        self._write(pos, RECORD_HEADER.pack(len(key), len(value)) + key + value)
        self.cursor = end
        return pos + RECORD_HEADER.size + len(key)

    def pad_to_page(self) -> None:
        self.cursor = len(self.pages) * PAGE_SIZE


class Engine:
    def __init__(self, store: GenerationStore, *, max_pages: int = 1 << 16,
                 lock_wait_timeout: float = 5.0):
        self.store = store
        self.locks = LockManager(lock_wait_timeout)
        self.log = PageLog(store, max_pages)
        self._index: dict[str, tuple[int, int]] = {}
        self._alloc = threading.Lock()

    # -- accounting -------------------------------------------------------

    @property
    def page_count(self) -> int:
        return len(self.log.pages)

    @property
    def key_count(self) -> int:
        return len(self._index)

    def scan(self) -> dict[str, str]:
        with self._alloc:
            items = list(self._index.items())
        return {k: self.log.read(pos, n).decode() for k, (pos, n) in items}

    # -- transactions -----------------------------------------------------

    def begin(self) -> Transaction:
        return Transaction()

    def commit(self, txn: Transaction) -> None:
        self._check_active(txn)
        try:
            self._install(txn.writes)
        finally:
            txn.state = TxnState.COMMITTED
            self.locks.release_all(txn)

    def rollback(self, txn: Transaction) -> None:
        self._check_active(txn)
        txn.writes.clear()
        txn.state = TxnState.ABORTED
        self.locks.release_all(txn)

    def lock(self, txn: Transaction, key: str, wait: WaitHook | None = None) -> None:
        self._check_active(txn)
        _check_key(key)
        try:
            self.locks.acquire(txn, key, wait=wait)
        except LockTimeout:
            self.rollback(txn)
            raise

    # -- data operations --------------------------------------------------

    def get(self, key: str, txn: Transaction | None = None, gen: int = 0,
            wait: WaitHook | None = None) -> str:
        _check_key(key)
        if txn is not None:
            self.lock(txn, key, wait)
            if key in txn.writes:
                raw = txn.writes[key]
                if raw is None:
                    raise KeyMissing(key)
                value = raw.decode()
            else:
                value = self._read(key)
        else:
            value = self._read(key)
        return transform_value(self.store.resolve(gen, TRANSFORM_VALUE), value)

    def set(self, key: str, value: str, txn: Transaction | None = None,
            wait: WaitHook | None = None) -> None:
        _check_key(key)
        raw = value.encode()
        if len(raw) > MAX_VALUE:
            raise BadArgument("value exceeds 1 MiB")
        self._write(key, raw, txn, wait)

    def delete(self, key: str, txn: Transaction | None = None,
               wait: WaitHook | None = None) -> None:
        _check_key(key)
        if txn is not None:
            self.lock(txn, key, wait)
            present = txn.writes[key] is not None if key in txn.writes else key in self._index
            if not present:
                raise KeyMissing(key)
        elif key not in self._index:
            raise KeyMissing(key)
        self._write(key, None, txn, wait)

    def sleep_query(self, millis: int, wait: WaitHook | None = None) -> None:
        if millis < 0:
            raise BadArgument("sleep must be non-negative")
        if millis:
            with (wait or contextlib.nullcontext)():
                time.sleep(millis / 1000)

    def preload(self, pages: int) -> None:
        """Grow the store with synthetic one-page entries to exactly ``pages`` pages."""
        with self._alloc:
            current = self.page_count
            if pages < current:
                raise BadArgument(f"preload target {pages} below current page count {current}")
            if pages > self.log.max_pages:
                raise CapacityExceeded(f"store capacity of {self.log.max_pages} pages exceeded")
            self.log.pad_to_page()
            base = len(self._index)
            for i in range(pages - current):
                key = f"{PRELOAD_PREFIX}{base + i}".encode()
                value = b"p" * (PAGE_SIZE - RECORD_HEADER.size - len(key))
                pos = self.log.append(key, value)
                self._index[key.decode()] = (pos, len(value))

    # -- internals --------------------------------------------------------

    def _read(self, key: str) -> str:
        loc = self._index.get(key)
        if loc is None:
            raise KeyMissing(key)
        return self.log.read(*loc).decode()

    def _write(self, key: str, raw: bytes | None, txn: Transaction | None,
               wait: WaitHook | None) -> None:
        if txn is not None:
            self.lock(txn, key, wait)
            txn.writes[key] = raw
            return
        implicit = Transaction()
        self.locks.acquire(implicit, key, wait=wait)
        try:
            if raw is None and key not in self._index:
                raise KeyMissing(key)
            self._install({key: raw})
        finally:
            implicit.state = TxnState.COMMITTED
            self.locks.release_all(implicit)

    def _install(self, writes: dict[str, bytes | None]) -> None:
        with self._alloc:
            for key, raw in writes.items():
                if raw is None:
                    self._index.pop(key, None)
                else:
                    pos = self.log.append(key.encode(), raw)
                    self._index[key] = (pos, len(raw))

    @staticmethod
    def _check_active(txn: Transaction) -> None:
        if txn.state is not TxnState.ACTIVE:
            raise TxnStateError(f"transaction {txn.txn_id} is {txn.state.value}")


def _check_key(key: str) -> None:
    if not key or len(key) > MAX_KEY or not key.isascii():
        raise BadArgument("keys must be 1..256 ASCII characters")
