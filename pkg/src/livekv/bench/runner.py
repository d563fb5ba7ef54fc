"""Closed-loop benchmark driver: terminals, patch schedule, csv output."""
from __future__ import annotations

import gc
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..client import Client, ProtocolError
from ..protocol import parse_fields
from .stats import Record, Summary, format_summary, summarize_records, write_records, write_syncs
from .workload import PatchSchedule, WorkloadSpec

log = logging.getLogger(__name__)


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host.strip("[]"), int(port)


def sync_row(resp: str, requested_at_us: int) -> dict:
    """Turn a ``SYNC``/``ERR 503`` reply into a syncs.csv row (plus extra fields)."""
    f = parse_fields(resp)
    row = {
        "ticket": f.get("ticket", ""),
        "method": f.get("method", ""),
        "requested_at_us": requested_at_us,
        "sync_time_us": f.get("sync_us", ""),
        "apply_us": f.get("apply_us", ""),
        "clone_us": "" if f.get("clone_us", "-") == "-" else f["clone_us"],
        "deadlock": f.get("deadlock", "0"),
        "status": f.get("status", "error"),
        "reach_us": f.get("reach_us", "-"),
        "migrate_us": f.get("migrate_us", "-"),
        "threads": f.get("threads", ""),
        "response": resp,
    }
    return row


@dataclass
class RunResult:
    out_dir: Path | None
    spec: WorkloadSpec
    records: list[Record]
    syncs: list[dict]
    sent: int
    in_flight: int
    summary: Summary | None
    schedule_errors: list[str] = field(default_factory=list)
    versions: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    measure_at: float = 0.0  # perf_counter() value that ts_us offsets are relative to
    trace: list[tuple[int, int, int | None, str]] = field(default_factory=list)


class _Terminal(threading.Thread):
    def __init__(self, tid: int, addr: tuple[str, int], spec: WorkloadSpec, start_at: float,
                 measure_at: float, end_at: float, trace: bool = False):
        super().__init__(daemon=True, name=f"terminal-{tid}")
        self.tid = tid
        self.addr = addr
        self.spec = spec
        self.start_at = start_at
        self.measure_at = measure_at
        self.end_at = end_at
        self.records: list[Record] = []  # this terminal's queue, merged by the collector
        self.versions: list[tuple[int, int]] = []
        self.trace: list[tuple[int, int, int | None, str]] | None = [] if trace else None
        self.sent = 0
        self.in_flight = 0
        self.error: str | None = None
        self.client: Client | None = None

    def run(self) -> None:
        try:
            self.client = Client(*self.addr, timeout=None)
            self._loop()
        except (OSError, ProtocolError) as e:
            self.error = str(e)
        finally:
            if self.client is not None:
                self.client.close()

    def _call(self, cmd: str, gen: int) -> tuple[str, int]:
        t0 = time.perf_counter()
        resp = self.client.call(cmd)
        t1 = time.perf_counter()
        verb = cmd.split(None, 1)[0]
        ok = not resp.startswith("ERR")
        if verb == "VERSION" and ok:
            gen = int(resp.split()[1])
            self.versions.append((round((t1 - self.measure_at) * 1e6), gen))
        if self.measure_at <= t0 < self.end_at:
            self.sent += 1
            ts = round((t0 - self.measure_at) * 1e6)
            if t1 < self.end_at:
                self.records.append(Record(ts, self.tid, verb, round((t1 - t0) * 1e6), gen, ok))
            else:
                self.in_flight += 1
            if self.trace is not None:
                done = round((t1 - self.measure_at) * 1e6) if t1 < self.end_at else None
                self.trace.append((self.tid, ts, done, cmd))
        return resp, gen

    def _loop(self) -> None:
        spec = self.spec
        interval = None if spec.target_rate is None else 1.0 / spec.target_rate
        next_at = self.start_at
        _, gen = self._call("VERSION", -1)
        n = 0
        for unit in spec.units(self.tid):
            now = time.perf_counter()
            if now >= self.end_at:
                return
            if interval is not None:
                if next_at > now:
                    time.sleep(next_at - now)
                next_at = max(next_at + interval, now)
            for cmd in unit:
                resp, gen = self._call(cmd, gen)
                if cmd == "BEGIN" and resp.startswith("ERR"):
                    break
            n += 1
            if spec.probe_interval and n % spec.probe_interval == 0:
                _, gen = self._call("VERSION", gen)


class _Admin(threading.Thread):
    def __init__(self, addr: tuple[str, int], schedule: PatchSchedule, measure_at: float):
        super().__init__(daemon=True, name="bench-admin")
        self.addr = addr
        self.schedule = schedule
        self.measure_at = measure_at
        self.rows: list[dict] = []
        self.errors: list[str] = []

    def run(self) -> None:
        fires = self.schedule.fire_times()
        if not fires:
            return
        try:
            cli = Client(*self.addr, timeout=None)
        except OSError as e:
            self.errors.append(f"admin connect: {e}")
            return
        loaded = None
        try:
            for at_s, patch, method in fires:
                if patch != loaded:
                    resp = cli.call(f"PATCH LOAD {patch}")
                    if not resp.startswith("OK"):
                        self.errors.append(f"load {patch}: {resp}")
                        continue
                    loaded = patch
                delay = self.measure_at + at_s - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                t0 = time.perf_counter()
                resp = cli.call(f"PATCH APPLY {method}")
                if resp.startswith("SYNC") or resp.startswith("ERR 503"):
                    self.rows.append(sync_row(resp, round((t0 - self.measure_at) * 1e6)))
                else:
                    self.errors.append(f"apply at {at_s}s: {resp}")
        except (OSError, ProtocolError) as e:
            self.errors.append(f"admin: {e}")
        finally:
            cli.close()


def _seed_keys(addr: tuple[str, int], keys: list[str]) -> None:
    if not keys:
        return
    with Client(*addr) as cli:
        for k in keys:
            cli.call(f"SET {k} seed")


def run_bench(server: str | tuple[str, int], workload: WorkloadSpec,
              schedule: PatchSchedule | None = None, out_dir: str | Path | None = None,
              *, pause_gc: bool = True, trace: bool = False) -> RunResult:
    """Drive ``workload`` against ``server`` and fire ``schedule`` on an admin connection.

    With ``pause_gc`` the cyclic garbage collector is off for the run: its
    stop-the-world passes add multi-millisecond stalls that would otherwise
    drown the latency effects being measured (an in-process server is
    affected too, which is the point).  ``trace`` keeps every measured
    command with its send and completion offsets.
    """
    was_enabled = gc.isenabled()
    if pause_gc:
        gc.collect()
        gc.disable()
    try:
        return _run(server, workload, schedule, out_dir, trace)
    finally:
        if pause_gc and was_enabled:
            gc.enable()


def _run(server, workload, schedule, out_dir, trace) -> RunResult:
    addr = parse_addr(server) if isinstance(server, str) else server
    schedule = schedule or PatchSchedule()
    schedule.validate(workload.duration_s)
    _seed_keys(addr, workload.setup_keys())
    start = time.perf_counter() + 0.05
    measure_at = start + workload.warmup_s
    end_at = measure_at + workload.duration_s
    terms = [_Terminal(i, addr, workload, start, measure_at, end_at, trace)
             for i in range(workload.terminals)]
    admin = _Admin(addr, schedule, measure_at)
    for t in terms:
        t.start()
    admin.start()
    for t in terms:
        t.join()
    admin.join()
    records = sorted((r for t in terms for r in t.records), key=lambda r: (r.ts_us, r.terminal))
    errors = admin.errors + [f"terminal {t.tid}: {t.error}" for t in terms if t.error]
    summary = summarize_records(records, workload.duration_s) if records else None
    result = RunResult(Path(out_dir) if out_dir else None, workload, records, admin.rows,
                       sum(t.sent for t in terms), sum(t.in_flight for t in terms), summary,
                       errors, {t.tid: t.versions for t in terms}, measure_at,
                       sorted(e for t in terms for e in (t.trace or ())))
    if out_dir is not None:
        write_outputs(result)
    return result


def write_outputs(result: RunResult) -> None:
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "records.csv", result.records)
    write_syncs(out / "syncs.csv", result.syncs)
    text = format_summary(result.summary) if result.summary else "records=0\n"
    text += (f"sent={result.sent}\nin_flight={result.in_flight}\n"
             f"syncs={len(result.syncs)}\nschedule_errors={len(result.schedule_errors)}\n")
    text += "".join(f"schedule_error {e}\n" for e in result.schedule_errors)
    (out / "summary.txt").write_text(text, encoding="utf-8")
