"""Benchmark harness: workloads, patch schedules, statistics and experiments."""
from .experiments import scaling_run, verify_deadlock
from .runner import RunResult, run_bench
from .stats import percentile, summarize
from .workload import PatchEvent, PatchSchedule, Periodic, WorkloadSpec, parse_workload

__all__ = ["PatchEvent", "PatchSchedule", "Periodic", "RunResult", "WorkloadSpec",
           "parse_workload", "percentile", "run_bench", "scaling_run", "summarize",
           "verify_deadlock"]
