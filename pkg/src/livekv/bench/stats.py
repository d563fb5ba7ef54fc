"""Latency statistics over records.csv: nearest-rank percentiles and 100 ms bins."""
from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

RECORD_FIELDS = ("ts_us", "terminal", "verb", "latency_us", "gen", "ok")
SYNC_FIELDS = ("ticket", "method", "requested_at_us", "sync_time_us", "apply_us", "clone_us",
               "deadlock")
BIN_US = 100_000


@dataclass(frozen=True)
class Record:
    ts_us: int
    terminal: int
    verb: str
    latency_us: int
    gen: int
    ok: bool


@dataclass
class Summary:
    count: int
    ok: int
    p50: int
    p99: int
    p9995: int
    max: int
    bins: list[int]
    throughput: float
    extremes: list[Record] = field(default_factory=list)


def percentile(sorted_values: Sequence[int], p: float) -> int:
    """Nearest-rank percentile of an ascending sequence."""
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, math.ceil(p / 100 * len(sorted_values) - 1e-9))
    return sorted_values[min(rank, len(sorted_values)) - 1]


def bin_index(ts_us: int) -> int:
    return ts_us // BIN_US


def bin_counts(records: Iterable[Record], duration_s: float | None = None) -> list[int]:
    counts: dict[int, int] = {}
    for r in records:
        b = bin_index(r.ts_us)
        counts[b] = counts.get(b, 0) + 1
    n = max(counts, default=-1) + 1
    if duration_s is not None:
        n = max(n, math.ceil(duration_s * 1e6 / BIN_US - 1e-9))
    return [counts.get(i, 0) for i in range(n)]


def summarize_records(records: list[Record], duration_s: float | None = None) -> Summary:
    if not records:
        raise ValueError("no records to summarize")
    lat = sorted(r.latency_us for r in records)
    p9995 = percentile(lat, 99.95)
    bins = bin_counts(records, duration_s)
    span = duration_s if duration_s is not None else len(bins) * BIN_US / 1e6
    extremes = sorted((r for r in records if r.latency_us > p9995),
                      key=lambda r: (r.ts_us, r.terminal))
    return Summary(len(records), sum(r.ok for r in records), percentile(lat, 50),
                   percentile(lat, 99), p9995, lat[-1], bins,
                   len(records) / span if span > 0 else 0.0, extremes)


def read_records(path: str | Path) -> list[Record]:
    with open(path, newline="", encoding="utf-8") as f:
        rd = csv.DictReader(f)
        if tuple(rd.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
        return [Record(int(r["ts_us"]), int(r["terminal"]), r["verb"], int(r["latency_us"]),
                       int(r["gen"]), r["ok"] == "1") for r in rd]


def write_records(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow((r.ts_us, r.terminal, r.verb, r.latency_us, r.gen, int(r.ok)))


def write_syncs(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, SYNC_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_syncs(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def summarize(path: str | Path, duration_s: float | None = None) -> Summary:
    return summarize_records(read_records(path), duration_s)


def format_summary(s: Summary) -> str:
    lines = [
        f"records={s.count}",
        f"ok={s.ok}",
        f"errors={s.count - s.ok}",
        f"p50_us={s.p50}",
        f"p99_us={s.p99}",
        f"p99_95_us={s.p9995}",
        f"max_us={s.max}",
        f"throughput_rps={s.throughput:.1f}",
        f"bins={len(s.bins)}",
        f"bin_min={min(s.bins)}",
        f"bin_max={max(s.bins)}",
        "bins_100ms=" + " ".join(map(str, s.bins)),
        f"extremes={len(s.extremes)}",
    ]
    lines += [f"extreme ts_us={r.ts_us} terminal={r.terminal} verb={r.verb} "
              f"latency_us={r.latency_us} gen={r.gen}" for r in s.extremes]
    return "\n".join(lines) + "\n"


def window_max(records: Iterable[Record], center_us: int, half_width_us: int) -> int:
    """Largest latency among requests sent within ``center ± half_width``."""
    return max((r.latency_us for r in records
                if center_us - half_width_us <= r.ts_us <= center_us + half_width_us), default=0)


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, r_squared)."""
    if len(xs) < 2:
        raise ValueError("need at least two points")
    slope, intercept = statistics.linear_regression(xs, ys)
    try:
        r = statistics.correlation(xs, ys)
    except statistics.StatisticsError:  # constant ys
        r = 1.0
    return slope, intercept, r * r
