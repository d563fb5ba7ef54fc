"""``bench`` command line."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiments import scaling_run, verify_deadlock
from .runner import parse_addr, run_bench
from .stats import format_summary, linear_fit, summarize
from .workload import PatchEvent, PatchSchedule, Periodic, WorkloadError, parse_offsets, parse_workload


def _points(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        mult = 1
        if part.endswith("k"):
            part, mult = part[:-1], 1024
        out.append(int(float(part) * mult) if mult == 1024 else int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="Benchmark harness for livekv.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="drive a workload against a server")
    r.add_argument("--server", default="127.0.0.1:7474")
    r.add_argument("--workload", default="noop", help="noop|kvmix:R|txnmix:N:K|olap:LO..HI")
    r.add_argument("--terminals", type=int, default=10)
    r.add_argument("--duration", type=float, default=30.0)
    r.add_argument("--warmup", type=float, default=10.0)
    r.add_argument("--rate", type=float, help="per-terminal request rate limit (req/s)")
    r.add_argument("--probe-every", type=int, help="VERSION probe every N requests")
    r.add_argument("--patch-at", default="", help="comma-separated offsets in seconds")
    r.add_argument("--every-ms", type=float, help="periodic patch interval")
    r.add_argument("--count", type=int, default=0, help="number of periodic patches")
    r.add_argument("--measure-only", action="store_true",
                   help="periodic patches synchronize without a real patch")
    r.add_argument("--method", choices=["global", "local"], default="global")
    r.add_argument("--patch", default="builtin:p1-render-4k",
                   help="patch file, builtin:<id> or synthetic:<bytes>")
    r.add_argument("--out", required=True)

    d = sub.add_parser("verify-deadlock", help="scripted lock contention across a global patch")
    d.add_argument("--mode", choices=["naive", "priority"], required=True)
    d.add_argument("--runs", type=int, default=100)
    d.add_argument("--server", help="use a running server instead of an in-process one")
    d.add_argument("--watchdog", type=float, help="watchdog for the in-process server")

    s = sub.add_parser("scaling", help="state-size or patch-size sweep")
    s.add_argument("--kind", choices=["state", "patchsize"], required=True)
    s.add_argument("--points", required=True,
                   help="page counts (state) or payload bytes, e.g. 4k,16k (patchsize)")
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--clones", type=int, default=5)
    s.add_argument("--out", default="scaling.csv")

    m = sub.add_parser("summarize", help="statistics for a records.csv")
    m.add_argument("file")
    m.add_argument("--duration", type=float)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.cmd == "run":
            spec = parse_workload(args.workload, terminals=args.terminals,
                                  duration_s=args.duration, warmup_s=args.warmup,
                                  target_rate=args.rate, probe_every=args.probe_every)
            sched = PatchSchedule([PatchEvent(t, args.patch, args.method)
                                   for t in parse_offsets(args.patch_at)])
            if args.every_ms:
                sched.periodic = Periodic(args.every_ms, args.count, args.method,
                                          args.measure_only, args.patch)
            res = run_bench(parse_addr(args.server), spec, sched, args.out)
            print((res.out_dir / "summary.txt").read_text(), end="")
            return 0
        if args.cmd == "verify-deadlock":
            server = parse_addr(args.server) if args.server else None
            tally = verify_deadlock(args.mode, args.runs, server, args.watchdog)
            print(tally.line())
            return 0
        if args.cmd == "scaling":
            pts = _points(args.points)
            rows = scaling_run(args.kind, pts, args.out, clones=args.clones, reps=args.reps)
            for row in rows:
                print(",".join(str(row[k]) for k in row))
            key = "clone_us" if args.kind == "state" else "apply_us"
            for method in sorted({r["method"] for r in rows}):
                sel = [r for r in rows if r["method"] == method and r[key] != ""]
                if len(sel) >= 2:
                    _, _, r2 = linear_fit([r["point"] for r in sel], [r[key] for r in sel])
                    print(f"fit {method} {key} r2={r2:.3f}")
            return 0
        if args.cmd == "summarize":
            print(format_summary(summarize(args.file, args.duration)), end="")
            return 0
    except (WorkloadError, ValueError, OSError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
