"""Scripted experiments: contention deadlock tally and scaling sweeps."""
from __future__ import annotations

import csv
import logging
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..client import Client
from ..protocol import parse_fields
from ..server import Server
from .runner import run_bench
from .stats import window_max
from .workload import PatchEvent, PatchSchedule, WorkloadSpec

log = logging.getLogger(__name__)


@dataclass
class DeadlockTally:
    mode: str
    runs: int
    deadlocks: int = 0
    synchronized: int = 0
    other: int = 0
    sync_times_us: list[int] = field(default_factory=list)
    elapsed_s: float = 0.0

    def line(self) -> str:
        return (f"mode={self.mode} runs={self.runs} deadlocks={self.deadlocks} "
                f"synchronized={self.synchronized} other={self.other} "
                f"elapsed_s={self.elapsed_s:.1f}")


def contention_round(addr: tuple[str, int], key: str = "k", pause: float = 0.02,
                     patch: str = "builtin:noop") -> str:
    """One scripted run: C1 holds ``key``, C2 waits on it, a global patch lands, C1 commits.

    Returns the admin's PATCH APPLY reply.
    """
    with Client(*addr) as c1, Client(*addr) as c2, Client(*addr) as admin:
        admin.call(f"PATCH LOAD {patch}")
        c1.call("BEGIN")
        c1.call(f"LOCK {key}")
        c2.call("BEGIN")
        c2.send(f"LOCK {key}")  # blocks inside the transaction
        time.sleep(pause)
        admin.send("PATCH APPLY global")
        time.sleep(pause)
        c1.call("COMMIT")
        c2.recv()
        c2.call("COMMIT")
        return admin.recv()


def verify_deadlock(mode: str, runs: int, server: tuple[str, int] | None = None,
                    watchdog: float | None = None, pause: float = 0.02) -> DeadlockTally:
    if mode not in ("naive", "priority"):
        raise ValueError("mode must be naive or priority")
    naive = mode == "naive"
    srv = None
    if server is None:
        wd = watchdog if watchdog is not None else (2.0 if naive else 10.0)
        srv = Server(port=0, policy="pool", naive_quiescence=naive, watchdog_timeout=wd,
                     lock_wait_timeout=max(30.0, 3 * wd)).start()
        server = srv.address
    tally = DeadlockTally(mode, runs)
    t0 = time.perf_counter()
    try:
        for i in range(runs):
            resp = contention_round(server, key=f"k{i % 7}", pause=pause)
            f = parse_fields(resp)
            if f.get("deadlock") == "1":
                tally.deadlocks += 1
            elif resp.startswith("SYNC"):
                tally.synchronized += 1
                tally.sync_times_us.append(int(f["sync_us"]))
            else:
                tally.other += 1
    finally:
        tally.elapsed_s = time.perf_counter() - t0
        if srv is not None:
            srv.stop()
    return tally


SCALING_FIELDS = ("kind", "point", "method", "samples", "clone_us", "migrate_us", "apply_us",
                  "max_latency_us")


def _state_point(pages: int, clones: int, policy: str, rate: float) -> dict:
    srv = Server(port=0, policy=policy, max_pages=max(1 << 16, pages + 16)).start()
    try:
        addr = srv.address
        with Client(*addr) as adm:
            resp = adm.call(f"PRELOAD {pages}")
            if resp != "OK":
                raise RuntimeError(f"preload {pages}: {resp}")
        gap = 1.0
        # light, rate-limited load: enough requests to see the freeze in the latency
        # window, few enough that the clone is not mostly waiting for the interpreter lock
        spec = WorkloadSpec("noop", terminals=2, warmup_s=0.5, duration_s=gap * (clones + 1),
                            target_rate=rate)
        sched = PatchSchedule([PatchEvent(gap * (i + 1), "builtin:noop", "local")
                               for i in range(clones)])
        res = run_bench(addr, spec, sched)
        ok = [r for r in res.syncs if r["status"] == "synchronized"]
        clone = [int(r["clone_us"]) for r in ok]
        mig = [int(r["migrate_us"]) for r in ok if r["migrate_us"] != "-"]
        lat = [window_max(res.records, int(r["requested_at_us"]), 1_000_000) for r in ok]
        return {"kind": "state", "point": pages, "method": "local", "samples": len(ok),
                "clone_us": round(statistics.median(clone)) if clone else "",
                "migrate_us": round(statistics.median(mig)) if mig else "",
                "apply_us": "", "max_latency_us": max(lat, default="")}
    finally:
        srv.stop()


def _patchsize_point(size: int, reps: int, method: str) -> dict:
    srv = Server(port=0, policy="otpc").start()
    try:
        durations = []
        with Client(*srv.address) as adm:
            resp = adm.call(f"PATCH LOAD synthetic:{size}")
            if not resp.startswith("OK"):
                raise RuntimeError(resp)
            for _ in range(reps):
                resp = adm.call(f"PATCH APPLY {method}")
                f = parse_fields(resp)
                if resp.startswith("SYNC"):
                    durations.append(int(f["apply_us"]))
        return {"kind": "patchsize", "point": size, "method": method, "samples": len(durations),
                "clone_us": "", "migrate_us": "",
                "apply_us": round(statistics.fmean(durations)) if durations else "",
                "max_latency_us": ""}
    finally:
        srv.stop()


def scaling_run(kind: str, points: list[int], out: str | Path | None = None, *,
                clones: int = 5, reps: int = 20, policy: str = "otpc",
                rate: float = 200.0) -> list[dict]:
    """Sweep state size (pages) or patch payload size (bytes), fresh server per point."""
    rows = []
    for p in points:
        if kind == "state":
            rows.append(_state_point(p, clones, policy, rate))
        elif kind == "patchsize":
            for method in ("global", "local"):
                rows.append(_patchsize_point(p, reps, method))
        else:
            raise ValueError("kind must be state or patchsize")
    if out is not None:
        path = Path(out)
        if path.suffix != ".csv":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "scaling.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, SCALING_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
