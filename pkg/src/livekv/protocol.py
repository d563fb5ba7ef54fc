"""Line-oriented wire protocol: parsing, response formatting, command execution."""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable

from .engine import Engine, EngineError, Transaction, TxnState, WaitHook
from .functions import RENDER_VERSION, render_version
from .generations import GenerationError, GenerationStore
from .patches import Method, PatchError, PatchSpec, resolve_patch_ref
from .quiescence import (CategoryViolation, Coordinator, PatchInFlight, RegistrationHandle,
                         SyncReport, TicketStatus)

log = logging.getLogger(__name__)

MAX_LINE = 2 * 1024 * 1024

ARITY = {
    "PING": 0, "GET": 1, "SET": 2, "DEL": 1, "BEGIN": 0, "COMMIT": 0, "ROLLBACK": 0,
    "LOCK": 1, "SLEEP": 1, "VERSION": 0, "PRELOAD": 1, "STATS": 0, "PATCH": 2, "QUIT": 0,
}
ADMIN_VERBS = {"PATCH", "PRELOAD"}

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\"}
_UNESCAPES = {v: "\\" + k for k, v in _ESCAPES.items()}


class ParseError(Exception):
    pass


@dataclass(frozen=True)
class Command:
    verb: str
    args: tuple[str, ...] = ()


def tokenize(text: str) -> list[str]:
    out = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == '"':
            buf = []
            i += 1
            while True:
                if i >= n:
                    raise ParseError("unterminated quote")
                c = text[i]
                if c == "\\":
                    if i + 1 >= n or text[i + 1] not in _ESCAPES:
                        raise ParseError("bad escape")
                    buf.append(_ESCAPES[text[i + 1]])
                    i += 2
                elif c == '"':
                    i += 1
                    break
                else:
                    buf.append(c)
                    i += 1
            if i < n and not text[i].isspace():
                raise ParseError("garbage after quoted token")
            out.append("".join(buf))
        else:
            j = i
            while j < n and not text[j].isspace():
                if text[j] == '"':
                    raise ParseError("quote inside bare token")
                j += 1
            out.append(text[i:j])
            i = j
    return out


def parse(line: bytes) -> Command:
    if len(line) > MAX_LINE:
        raise ParseError("line too long")
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("invalid utf-8") from None
    words = tokenize(text.rstrip("\r\n"))
    if not words:
        raise ParseError("empty command")
    verb = words[0].upper()
    args = tuple(words[1:])
    if verb not in ARITY:
        raise ParseError(f"unknown verb {words[0]!r}")
    if len(args) != ARITY[verb]:
        raise ParseError(f"{verb} takes {ARITY[verb]} argument(s)")
    if verb in ("SLEEP", "PRELOAD"):
        if not args[0].isdigit():
            raise ParseError(f"{verb} needs a non-negative integer")
    if verb == "PATCH":
        sub = args[0].upper()
        if sub == "APPLY":
            method = args[1].lower()
            if method not in ("global", "local"):
                raise ParseError("PATCH APPLY takes global or local")
            args = (sub, method)
        elif sub == "LOAD":
            args = (sub, args[1])
        else:
            raise ParseError("PATCH takes LOAD or APPLY")
    return Command(verb, args)


def quote(value: str) -> str:
    if value and not any(c.isspace() or c in '"\\' for c in value):
        return value
    return '"' + "".join(_UNESCAPES.get(c, c) for c in value) + '"'


def ok() -> str:
    return "OK"


def err(code: int, msg: str) -> str:
    return f"ERR {code} {' '.join(msg.split()) or 'error'}"


def format_sync(r: SyncReport) -> str:
    def us(x: float | None) -> str:
        return "-" if x is None else str(round(x * 1e6))
    fields = (f"ticket={r.ticket_id} method={r.method.value} status={r.status.value} "
              f"sync_us={us(r.sync_time)} apply_us={us(r.apply_duration)} "
              f"clone_us={us(r.clone_duration)} reach_us={us(r.reach_quiescence)} "
              f"migrate_us={us(r.migrate_median)} threads={len(r.thread_waits)} "
              f"deadlock={int(r.deadlock)}")
    if r.status is TicketStatus.SYNCHRONIZED:
        return "SYNC " + fields
    return err(503, ("deadlock " if r.deadlock else "failed ") + fields)


def parse_fields(text: str) -> dict[str, str]:
    return dict(w.split("=", 1) for w in text.split() if "=" in w)


class Session:
    """Per-connection state seen by the executor."""

    def __init__(self, conn_id: int, admin: bool = False):
        self.conn_id = conn_id
        self.admin = admin
        self.txn: Transaction | None = None
        self.staged: PatchSpec | None = None
        self.handle: RegistrationHandle | None = None
        self.wait: WaitHook | None = None
        self.last_gen = 0
        self.closed = False

    def in_transaction(self) -> bool:
        return self.txn is not None


class Executor:
    def __init__(self, engine: Engine, coordinator: Coordinator,
                 stats: Callable[[], dict[str, object]] | None = None):
        self.engine = engine
        self.coordinator = coordinator
        self.store: GenerationStore = coordinator.store
        self._stats = stats

    def handle_line(self, line: bytes, session: Session) -> str:
        try:
            cmd = parse(line)
        except ParseError as e:
            return err(400, f"parse {e}")
        return self.execute(cmd, session)

    def execute(self, cmd: Command, session: Session) -> str:
        try:
            return self._dispatch(cmd, session)
        except EngineError as e:
            if session.txn is not None and session.txn.state is not TxnState.ACTIVE:
                session.txn = None
            return err(e.code, f"{type(e).__name__.lower()} {e}")
        except GenerationError as e:
            return err(413 if "capacity" in str(e) else 500, str(e))
        except Exception as e:
            log.exception("command %s failed", cmd.verb)
            return err(500, f"internal {e}")

    def _gen(self, session: Session) -> int:
        gen = session.handle.gen if session.handle is not None else self.store.current
        session.last_gen = max(session.last_gen, gen)
        return gen

    def _dispatch(self, cmd: Command, s: Session) -> str:
        verb, args = cmd.verb, cmd.args
        e = self.engine
        if verb in ADMIN_VERBS and not s.admin:
            return err(403, "admin commands not allowed on this connection")
        if verb == "PING":
            return ok()
        if verb == "GET":
            return "VAL " + quote(e.get(args[0], s.txn, self._gen(s), s.wait))
        if verb == "SET":
            e.set(args[0], args[1], s.txn, s.wait)
            return ok()
        if verb == "DEL":
            e.delete(args[0], s.txn, s.wait)
            return ok()
        if verb == "BEGIN":
            if s.txn is not None:
                return err(409, "transaction already active")
            s.txn = e.begin()
            return ok()
        if verb in ("COMMIT", "ROLLBACK"):
            if s.txn is None:
                return err(409, "no active transaction")
            txn, s.txn = s.txn, None
            (e.commit if verb == "COMMIT" else e.rollback)(txn)
            return ok()
        if verb == "LOCK":
            if s.txn is None:
                return err(409, "LOCK requires an active transaction")
            e.lock(s.txn, args[0], s.wait)
            return ok()
        if verb == "SLEEP":
            e.sleep_query(int(args[0]), s.wait)
            return ok()
        if verb == "VERSION":
            gen = self._gen(s)
            return f"VER {gen} {render_version(self.store.resolve(gen, RENDER_VERSION))}"
        if verb == "PRELOAD":
            e.preload(int(args[0]))
            return ok()
        if verb == "STATS":
            return self._format_stats()
        if verb == "PATCH":
            return self._patch(args, s)
        if verb == "QUIT":
            s.closed = True
            return ok()
        raise AssertionError(verb)

    def _patch(self, args: tuple[str, ...], s: Session) -> str:
        sub, arg = args
        if sub == "LOAD":
            try:
                s.staged = resolve_patch_ref(arg)
            except PatchError as e:
                return err(400, f"patch {e}")
            return f"OK {s.staged.patch_id} {s.staged.category.value} {s.staged.payload_bytes}"
        if s.staged is None:
            return err(409, "no patch loaded")
        if s.txn is not None:
            return err(409, "PATCH APPLY inside a transaction")
        method = Method(arg)
        c = self.coordinator
        try:
            with contextlib.ExitStack() as stack:
                if s.wait is not None:
                    stack.enter_context(s.wait())
                if s.handle is not None:
                    stack.enter_context(c.parked(s.handle))
                report = c.apply(s.staged, method)
        except CategoryViolation as e:
            return err(422, str(e))
        except PatchInFlight as e:
            return err(423, str(e))
        self._gen(s)
        return format_sync(report)

    def _format_stats(self) -> str:
        st = {
            "pages": self.engine.page_count,
            "keys": self.engine.key_count,
            "gen": self.store.current,
            "generations": len(self.store.live_generations()),
            "registered": len(self.coordinator.registered),
            "tickets": len(self.coordinator.tickets),
        }
        if self._stats is not None:
            st.update(self._stats())
        return "\n".join(["STATS"] + [f"{k}={v}" for k, v in st.items()] + ["."])
