"""Runs a variant: either its task DAG through the gateway, or an external command."""

from __future__ import annotations

import heapq
import logging
import os
import shlex
import signal
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .gateway import Gateway, GatewayError
from .model import SpecError, SystemSpec, TaskSpec, canonicalize, require_valid
from .prompts import prompt_pair

log = logging.getLogger(__name__)

EXTERNAL_TASK = "external"


@dataclass(frozen=True)
class ExecutionResult:
    per_task_outputs: Mapping[str, str]
    final_output: str
    per_task_latency: Mapping[str, float]
    total_time: float
    completed_tasks: int
    total_tasks: int
    success: bool
    error_log: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.completed_tasks > self.total_tasks:
            raise ValueError("completed_tasks exceeds total_tasks")
        if self.success != (self.completed_tasks == self.total_tasks):
            raise ValueError("success must equal (completed == total)")

    @property
    def completion_rate(self) -> float:
        return self.completed_tasks / self.total_tasks if self.total_tasks else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_task_outputs": dict(sorted(self.per_task_outputs.items())),
            "final_output": self.final_output,
            "per_task_latency": dict(sorted(self.per_task_latency.items())),
            "total_time": self.total_time,
            "completed_tasks": self.completed_tasks,
            "total_tasks": self.total_tasks,
            "success": self.success,
            "error_log": list(self.error_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExecutionResult":
        return cls(
            per_task_outputs=dict(d["per_task_outputs"]),
            final_output=d["final_output"],
            per_task_latency={k: float(v) for k, v in d["per_task_latency"].items()},
            total_time=float(d["total_time"]),
            completed_tasks=int(d["completed_tasks"]),
            total_tasks=int(d["total_tasks"]),
            success=bool(d["success"]),
            error_log=tuple(d.get("error_log", ())),
        )


def topo_order(spec: SystemSpec) -> list[str]:
    """Kahn's algorithm with a min-heap so ready tasks come out in task_id order."""
    ids = {t.task_id for t in spec.tasks}
    indegree = {t.task_id: 0 for t in spec.tasks}
    children: dict[str, list[str]] = {tid: [] for tid in ids}
    for t in spec.tasks:
        for dep in set(t.dependencies):
            if dep not in ids:
                raise SpecError(f"task {t.task_id} depends on unknown task {dep}")
            indegree[t.task_id] += 1
            children[dep].append(t.task_id)
    ready = [tid for tid, n in indegree.items() if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        tid = heapq.heappop(ready)
        order.append(tid)
        for child in children[tid]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)
    if len(order) != len(ids):
        raise SpecError("cycle in task dependencies")
    return order


def terminal_tasks(spec: SystemSpec) -> set[str]:
    depended_on = {d for t in spec.tasks for d in t.dependencies}
    return {t.task_id for t in spec.tasks} - depended_on


def task_prompts(spec: SystemSpec, task: TaskSpec, dep_outputs: Mapping[str, str],
                 prompt_dir=None) -> tuple[str, str]:
    agent = spec.agent(task.agent_id)
    tools = sorted(agent.tools | task.tools)
    if dep_outputs:
        context = "\n\n".join(f"[{dep}]\n{out}" for dep, out in sorted(dep_outputs.items()))
    else:
        context = "(none)"
    return prompt_pair(
        "task.txt",
        prompt_dir,
        role=agent.role,
        goal=agent.goal or "(unspecified)",
        backstory=agent.backstory,
        tools=", ".join(tools) or "none",
        description=task.description,
        expected_output=task.expected_output,
        context=context,
    )


def execute_workflow(spec: SystemSpec, gateway: Gateway, *, parallelism: int = 1,
                     clock: Callable[[], float] | None = None, prompt_dir=None) -> ExecutionResult:
    """Run every task once, in dependency order.

    A failed task is logged and its transitive dependents are skipped; tasks that do not
    depend on it still run. With ``parallelism > 1`` independent ready tasks run on a
    thread pool; results are merged by task_id either way.
    """
    require_valid(spec)
    clock = clock or gateway.clock
    order = topo_order(spec)
    rank = {tid: i for i, tid in enumerate(order)}
    tasks = {t.task_id: t for t in spec.tasks}
    outputs: dict[str, str] = {}
    latency: dict[str, float] = {}
    errors: list[str] = []
    blocked: set[str] = set()

    def run_one(tid: str) -> tuple[str, str | None, float, str | None]:
        task = tasks[tid]
        deps = {d: outputs[d] for d in task.dependencies}
        system, user = task_prompts(spec, task, deps, prompt_dir)
        t0 = clock()
        try:
            text = gateway.complete(system, user)
        except GatewayError as exc:
            return tid, None, _duration(t0, clock()), f"task {tid} failed: {exc}"
        return tid, text, _duration(t0, clock()), None

    start = clock()
    remaining = list(order)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        while remaining:
            for tid in list(remaining):
                if set(tasks[tid].dependencies) & blocked:
                    blocked.add(tid)
                    errors.append(f"task {tid} skipped: dependency failed")
                    remaining.remove(tid)
            wave = [tid for tid in remaining if set(tasks[tid].dependencies) <= outputs.keys()]
            if parallelism <= 1:
                wave = wave[:1]
            for tid, text, dt, err in sorted(pool.map(run_one, wave), key=lambda r: rank[r[0]]):
                latency[tid] = dt
                remaining.remove(tid)
                if err is None:
                    outputs[tid] = text
                else:
                    log.warning(err)
                    errors.append(err)
                    blocked.add(tid)
    total = _duration(start, clock())

    finals = [outputs[tid] for tid in order if tid in terminal_tasks(spec) and tid in outputs]
    return ExecutionResult(
        per_task_outputs=dict(sorted(outputs.items())),
        final_output="\n\n".join(finals),
        per_task_latency=dict(sorted(latency.items())),
        total_time=total,
        completed_tasks=len(outputs),
        total_tasks=len(order),
        success=len(outputs) == len(order),
        error_log=tuple(errors),
    )


def _duration(start: float, end: float) -> float:
    # Microsecond resolution keeps float residue out of stored timings.
    return round(end - start, 6)


def execute_external(command: str, spec: SystemSpec, timeout: float) -> ExecutionResult:
    """Run ``command <spec-file>`` in a fresh directory; stdout is the output."""
    argv = shlex.split(command)
    if not argv:
        raise ValueError("command must be nonempty")
    with tempfile.TemporaryDirectory(prefix="evolver-run-") as tmp:
        return _run_external(argv, Path(tmp), spec, timeout)


def _run_external(argv: list[str], workdir: Path, spec: SystemSpec, timeout: float) -> ExecutionResult:
    spec_path = workdir / "spec.json"
    spec_path.write_text(canonicalize(spec), encoding="utf-8")
    start = time.perf_counter()
    try:
        proc = subprocess.Popen(
            [*argv, str(spec_path)],
            cwd=workdir,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
    except OSError as exc:
        return _external_failure(f"could not start command: {exc}", time.perf_counter() - start)
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.communicate()
        return _external_failure("timeout", time.perf_counter() - start)
    elapsed = time.perf_counter() - start

    if proc.returncode != 0:
        detail = err.strip() or f"exit status {proc.returncode}"
        return _external_failure(detail, elapsed, f"exit status {proc.returncode}")
    return ExecutionResult(
        per_task_outputs={EXTERNAL_TASK: out},
        final_output=out,
        per_task_latency={EXTERNAL_TASK: elapsed},
        total_time=elapsed,
        completed_tasks=1,
        total_tasks=1,
        success=True,
        error_log=tuple(line for line in [err.strip()] if line),
    )


def _external_failure(message: str, elapsed: float, *extra: str) -> ExecutionResult:
    return ExecutionResult(
        per_task_outputs={},
        final_output="",
        per_task_latency={EXTERNAL_TASK: elapsed},
        total_time=elapsed,
        completed_tasks=0,
        total_tasks=1,
        success=False,
        error_log=(message, *extra),
    )
