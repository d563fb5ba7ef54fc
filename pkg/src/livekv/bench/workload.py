"""Workload and patch schedule descriptions."""
from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Iterator

from ..protocol import quote


class WorkloadError(ValueError):
    pass


@dataclass
class WorkloadSpec:
    kind: str = "noop"  # noop | kvmix | txnmix | olap
    terminals: int = 10
    duration_s: float = 30.0
    warmup_s: float = 10.0
    read_pct: int = 50
    ops_per_txn: int = 4
    lock_keys: int = 16
    sleep_lo_ms: int = 500
    sleep_hi_ms: int = 5000
    target_rate: float | None = None
    probe_every: int | None = None
    keyspace: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("noop", "kvmix", "txnmix", "olap"):
            raise WorkloadError(f"unknown workload kind {self.kind!r}")
        if self.terminals < 1:
            raise WorkloadError("terminals must be >= 1")
        if not 0 <= self.read_pct <= 100:
            raise WorkloadError("read_pct must be within [0, 100]")
        if self.ops_per_txn < 1 or self.lock_keys < 1:
            raise WorkloadError("txnmix needs positive ops and keys")
        if not 0 <= self.sleep_lo_ms <= self.sleep_hi_ms:
            raise WorkloadError("olap sleep range must satisfy 0 <= lo <= hi")
        if self.target_rate is not None and self.target_rate <= 0:
            raise WorkloadError("target_rate must be positive")

    @property
    def probe_interval(self) -> int:
        if self.probe_every is not None:
            return self.probe_every
        return 1 if self.kind == "noop" else 10

    def units(self, terminal: int) -> Iterator[list[str]]:
        """Endless stream of command groups; a group is one transaction or one request."""
        rng = random.Random(self.seed * 7919 + terminal)
        keys = [f"k{i}" for i in range(self.keyspace)]
        while True:
            if self.kind == "noop":
                yield ["PING"]
            elif self.kind == "kvmix":
                k = rng.choice(keys)
                if rng.randrange(100) < self.read_pct:
                    yield [f"GET {k}"]
                else:
                    yield [f"SET {k} {quote(f'v{rng.randrange(1 << 30)}')}"]
            elif self.kind == "txnmix":
                # sorted lock order keeps scripted transactions deadlock-free
                picked = sorted({rng.randrange(self.lock_keys) for _ in range(self.ops_per_txn)})
                ops = ["BEGIN"]
                for i in picked:
                    if rng.randrange(2):
                        ops.append(f"GET k{i}")
                    else:
                        ops.append(f"SET k{i} v{rng.randrange(1 << 30)}")
                ops.append("COMMIT")
                yield ops
            else:
                yield [f"SLEEP {rng.randint(self.sleep_lo_ms, self.sleep_hi_ms)}"]

    def setup_keys(self) -> list[str]:
        if self.kind == "kvmix":
            return [f"k{i}" for i in range(self.keyspace)]
        if self.kind == "txnmix":
            return [f"k{i}" for i in range(self.lock_keys)]
        return []


_KIND = re.compile(r"^(noop|kvmix:(\d+)|txnmix:(\d+):(\d+)|olap:(\d+)\.\.(\d+))$")


def parse_workload(text: str, **kw) -> WorkloadSpec:
    m = _KIND.match(text.strip().lower())
    if not m:
        raise WorkloadError(f"bad workload {text!r}; use noop|kvmix:R|txnmix:N:K|olap:LO..HI")
    if m.group(2) is not None:
        return WorkloadSpec("kvmix", read_pct=int(m.group(2)), **kw)
    if m.group(3) is not None:
        return WorkloadSpec("txnmix", ops_per_txn=int(m.group(3)), lock_keys=int(m.group(4)), **kw)
    if m.group(5) is not None:
        return WorkloadSpec("olap", sleep_lo_ms=int(m.group(5)), sleep_hi_ms=int(m.group(6)), **kw)
    return WorkloadSpec("noop", **kw)


@dataclass(frozen=True)
class PatchEvent:
    at_s: float
    patch: str
    method: str


@dataclass(frozen=True)
class Periodic:
    every_ms: float
    count: int
    method: str
    measure_only: bool = True
    patch: str = "builtin:noop"
    start_s: float = 0.0


@dataclass
class PatchSchedule:
    events: list[PatchEvent] = field(default_factory=list)
    periodic: Periodic | None = None

    def validate(self, duration_s: float) -> None:
        for e in self.events:
            if not 0 <= e.at_s <= duration_s:
                raise WorkloadError(f"patch offset {e.at_s}s outside the measured phase")
            if e.method not in ("global", "local"):
                raise WorkloadError(f"bad method {e.method!r}")
        p = self.periodic
        if p is not None:
            if p.every_ms <= 0 or p.count < 0:
                raise WorkloadError("periodic schedule needs every_ms > 0 and count >= 0")
            if p.method not in ("global", "local"):
                raise WorkloadError(f"bad method {p.method!r}")

    def fire_times(self) -> list[tuple[float, str, str]]:
        out = [(e.at_s, e.patch, e.method) for e in self.events]
        p = self.periodic
        if p is not None:
            patch = "builtin:noop" if p.measure_only else p.patch
            out += [(p.start_s + i * p.every_ms / 1000, patch, p.method) for i in range(p.count)]
        return sorted(out, key=lambda x: x[0])


def parse_offsets(text: str) -> list[float]:
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise WorkloadError(f"bad offset list {text!r}") from None
