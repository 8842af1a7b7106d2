"""Pipeline runs: task-graph dispatch, retries, skip propagation, cron triggers.

A run is an append-only event log (one JSON object per line); the
:class:`PipelineRun` view is a fold over those events, so replaying a log
always reconstructs the same run. Event types::

    run_created   plan_id, trigger, schedule, tasks {name: [deps]}, max_retries
    run_started
    task_started  task, attempt
    task_retry    task, attempt, logs, error     (retryable failure, task stays RUNNING)
    task_finished task, attempt, state (SUCCEEDED|FAILED), output, logs, error
    task_skipped  task, reason
    run_finished  state

Every event also carries ``seq`` and ``at``.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import queue
import threading
import uuid
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from .clock import SystemClock, isoformat, parse_ts
from .cron import fires_between
from .errors import (
    ConcurrentRunRejected,
    InvalidTransition,
    PlanNotFound,
    PredecessorNotSatisfied,
    RanforgeError,
    RunNotFound,
    StorageFailure,
    TaskFailed,
    TaskNotFound,
)
from .intake import TestPlan

log = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 2
DEFAULT_BACKOFF_S = 5.0
_EPS = timedelta(microseconds=1)


class Trigger(str, Enum):
    CRON = "CRON"
    MANUAL = "MANUAL"


class RunState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    SKIPPED = "SKIPPED"

    @property
    def terminal(self) -> bool:
        return self in (RunState.SUCCEEDED, RunState.FAILED, RunState.SKIPPED)


TaskState = RunState

_RUN_MOVES = {
    RunState.PENDING: {RunState.RUNNING},
    RunState.RUNNING: {RunState.SUCCEEDED, RunState.FAILED, RunState.SKIPPED},
}


@dataclass
class TaskRecord:
    task_name: str
    deps: tuple[str, ...] = ()
    attempt: int = 0
    state: TaskState = TaskState.PENDING
    output: Any = None
    logs: str = ""
    error: Optional[dict] = None
    started_at: Optional[str] = None
    ended_at: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "task_name": self.task_name,
            "deps": list(self.deps),
            "attempt": self.attempt,
            "state": self.state.value,
            "output": self.output,
            "logs": self.logs,
            "error": self.error,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
        }


@dataclass
class PipelineRun:
    run_id: str
    plan_id: str
    trigger: Trigger
    schedule: Optional[str] = None
    state: RunState = RunState.PENDING
    created_at: Optional[str] = None
    started_at: Optional[str] = None
    ended_at: Optional[str] = None
    max_retries: int = DEFAULT_MAX_RETRIES
    task_records: list[TaskRecord] = field(default_factory=list)

    def task(self, name: str) -> TaskRecord:
        for t in self.task_records:
            if t.task_name == name:
                return t
        raise TaskNotFound(f"run {self.run_id} has no task {name}")

    @property
    def task_names(self) -> list[str]:
        return [t.task_name for t in self.task_records]

    def outputs(self) -> dict[str, Any]:
        return {t.task_name: t.output for t in self.task_records if t.state is TaskState.SUCCEEDED}

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "plan_id": self.plan_id,
            "trigger": self.trigger.value,
            "schedule": self.schedule,
            "state": self.state.value,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "max_retries": self.max_retries,
            "task_records": [t.to_dict() for t in self.task_records],
        }


def _move(run: PipelineRun, to: RunState) -> None:
    if to not in _RUN_MOVES.get(run.state, set()):
        raise InvalidTransition(f"run {run.run_id}: {run.state.value} -> {to.value}")
    run.state = to


def apply_event(run: Optional[PipelineRun], ev: Mapping) -> PipelineRun:
    """Fold one event into ``run``; the only place run state changes."""
    kind = ev["type"]
    if kind == "run_created":
        return PipelineRun(
            run_id=ev["run_id"],
            plan_id=ev["plan_id"],
            trigger=Trigger(ev["trigger"]),
            schedule=ev.get("schedule"),
            created_at=ev["at"],
            max_retries=ev["max_retries"],
            task_records=[TaskRecord(name, tuple(deps)) for name, deps in ev["tasks"]],
        )
    if run is None:
        raise InvalidTransition(f"event {kind} before run_created")
    if kind == "run_started":
        _move(run, RunState.RUNNING)
        run.started_at = ev["at"]
    elif kind == "task_started":
        t = run.task(ev["task"])
        if t.state is not TaskState.PENDING and not (t.state is TaskState.RUNNING and ev["attempt"] > t.attempt):
            raise InvalidTransition(f"task {t.task_name} is {t.state.value}")
        blocked = [d for d in t.deps if run.task(d).state is not TaskState.SUCCEEDED]
        if blocked and not ev.get("standalone"):
            raise InvalidTransition(f"task {t.task_name} started before {', '.join(blocked)} succeeded")
        if ev["attempt"] > run.max_retries + 1:
            raise InvalidTransition(f"task {t.task_name} attempt {ev['attempt']} exceeds retry bound")
        t.state, t.attempt = TaskState.RUNNING, ev["attempt"]
        t.started_at = t.started_at or ev["at"]
    elif kind in ("task_retry", "task_finished"):
        t = run.task(ev["task"])
        if t.state is not TaskState.RUNNING or t.attempt != ev["attempt"]:
            raise InvalidTransition(f"task {t.task_name} {kind} while {t.state.value}")
        t.logs, t.error = ev.get("logs", ""), ev.get("error")
        if kind == "task_finished":
            t.state = TaskState(ev["state"])
            if not t.state.terminal:
                raise InvalidTransition(f"task {t.task_name} cannot finish as {t.state.value}")
            t.output, t.ended_at = ev.get("output"), ev["at"]
    elif kind == "task_skipped":
        t = run.task(ev["task"])
        if t.state is not TaskState.PENDING:
            raise InvalidTransition(f"task {t.task_name} is {t.state.value}, cannot skip")
        t.state, t.logs, t.ended_at = TaskState.SKIPPED, ev.get("reason", ""), ev["at"]
    elif kind == "run_finished":
        _move(run, RunState(ev["state"]))
        run.ended_at = ev["at"]
    else:
        raise InvalidTransition(f"unknown event type {kind}")
    return run


def replay(events: Iterable[Mapping]) -> PipelineRun:
    run = None
    for ev in events:
        run = apply_event(run, ev)
    if run is None:
        raise RunNotFound("empty event log")
    return run


class EventStore:
    """One ``<run_id>.jsonl`` file per run; a trailing line without newline is ignored."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, run_id: str) -> Path:
        return self.root / f"{run_id}.jsonl"

    def append(self, run_id: str, event: Mapping) -> None:
        line = (json.dumps(event, sort_keys=True, default=str) + "\n").encode()
        try:
            with open(self.path(run_id), "ab") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
        except OSError as exc:
            raise StorageFailure(f"cannot append event for {run_id}: {exc}") from exc

    def read(self, run_id: str) -> list[dict]:
        try:
            data = self.path(run_id).read_bytes()
        except FileNotFoundError:
            raise RunNotFound(f"no run {run_id}") from None
        return [json.loads(line) for line in data.split(b"\n")[:-1] if line.strip()]

    def run_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.jsonl"))


@dataclass
class TaskContext:
    """What an executor sees: the plan, its own params, upstream outputs, and a log sink."""

    run: PipelineRun
    plan: TestPlan
    task_name: str
    params: Mapping[str, Any]
    inputs: dict[str, Any]
    attempt: int
    clock: Any
    lines: list[str] = field(default_factory=list)

    def log(self, msg: str) -> None:
        self.lines.append(f"{isoformat(self.clock.now())} {msg}")


@dataclass
class TaskResult:
    """Executor return value; ``halt`` ends the pipeline with downstream tasks SKIPPED."""

    output: Any = None
    halt: bool = False
    reason: str = ""


Executor = Callable[[TaskContext], Any]


def subgraph(plan: TestPlan, names: Optional[Iterable[str]] = None) -> list[tuple[str, tuple[str, ...]]]:
    """Tasks restricted to ``names`` in plan order, each depending on its nearest kept ancestors."""
    graph = plan.graph()
    order = plan.topological_order()
    keep = set(order if names is None else names)
    unknown = keep - set(graph)
    if unknown:
        raise TaskNotFound(f"plan {plan.plan_id} has no task(s) {', '.join(sorted(unknown))}")
    ancestors: dict[str, set[str]] = {}
    for name in order:
        ancestors[name] = set().union(*({d} | ancestors[d] for d in graph[name])) if graph[name] else set()
    out = []
    for name in order:
        if name not in keep:
            continue
        if names is None:
            out.append((name, tuple(graph[name])))
            continue
        kept = ancestors[name] & keep
        direct = tuple(sorted(a for a in kept if not any(a in ancestors[b] for b in kept)))
        out.append((name, direct))
    return out


class PipelineEngine:
    def __init__(
        self,
        executors: Mapping[str, Executor],
        events: EventStore,
        clock=None,
        max_retries: int = DEFAULT_MAX_RETRIES,
        backoff_s: float = DEFAULT_BACKOFF_S,
        max_workers: int = 4,
        on_run_end: Optional[Callable[[PipelineRun], None]] = None,
    ):
        self.executors = dict(executors)
        self.events = events
        self.clock = clock or SystemClock()
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.on_run_end = on_run_end
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="task")
        self._lock = threading.RLock()
        self._plans: dict[str, TestPlan] = {}
        self._runs: dict[str, PipelineRun] = {}
        self._seq: dict[str, int] = defaultdict(int)
        self._run_locks: dict[str, threading.RLock] = {}
        self._active: dict[str, str] = {}
        self._done: dict[str, threading.Event] = {}

    # -- plans

    def register_plan(self, plan: TestPlan) -> None:
        with self._lock:
            self._plans[plan.plan_id] = plan

    def plan(self, plan_id: str) -> TestPlan:
        with self._lock:
            try:
                return self._plans[plan_id]
            except KeyError:
                raise PlanNotFound(f"no plan {plan_id}") from None

    def plans(self) -> list[TestPlan]:
        with self._lock:
            return [self._plans[k] for k in sorted(self._plans)]

    # -- event writing (single writer per run)

    def _emit(self, run_id: str, event: dict) -> PipelineRun:
        with self._run_locks[run_id]:
            self._seq[run_id] += 1
            ev = {"seq": self._seq[run_id], "at": isoformat(self.clock.now()), **event}
            # fold into a copy so readers always hold a consistent snapshot
            run = apply_event(copy.deepcopy(self._runs.get(run_id)), ev)
            self.events.append(run_id, ev)
            self._runs[run_id] = run
            return run

    # -- runs

    def create_run(
        self,
        plan_id: str,
        trigger: Trigger | str = Trigger.MANUAL,
        tasks: Optional[Iterable[str]] = None,
        schedule: Optional[str] = None,
    ) -> PipelineRun:
        """Persist a PENDING run; the plan's claim slot is held until the run ends."""
        plan = self.plan(plan_id)
        graph = subgraph(plan, tasks)
        with self._lock:
            holder = self._active.get(plan_id)
            if holder is not None:
                raise ConcurrentRunRejected(f"plan {plan_id} already has active run {holder}",
                                            detail={"active_run": holder})
            run_id = f"run-{isoformat(self.clock.now())[:10].replace('-', '')}-{uuid.uuid4().hex[:8]}"
            self._active[plan_id] = run_id
            self._run_locks[run_id] = threading.RLock()
            self._done[run_id] = threading.Event()
        try:
            return self._emit(run_id, {
                "type": "run_created",
                "run_id": run_id,
                "plan_id": plan_id,
                "trigger": Trigger(trigger).value,
                "schedule": schedule,
                "tasks": [[n, list(d)] for n, d in graph],
                "max_retries": self.max_retries,
            })
        except BaseException:
            self._release(plan_id, run_id)
            raise

    def _release(self, plan_id: str, run_id: str) -> None:
        with self._lock:
            if self._active.get(plan_id) == run_id:
                del self._active[plan_id]
            ev = self._done.get(run_id)
        if ev is not None:
            ev.set()

    def active_run(self, plan_id: str) -> Optional[str]:
        with self._lock:
            return self._active.get(plan_id)

    def start_run(
        self,
        plan_id: str,
        trigger: Trigger | str = Trigger.MANUAL,
        tasks: Optional[Iterable[str]] = None,
        schedule: Optional[str] = None,
        wait: bool = True,
    ) -> PipelineRun:
        run = self.create_run(plan_id, trigger, tasks, schedule)
        if not wait:
            threading.Thread(target=self._drive_safely, args=(run.run_id,), daemon=True,
                             name=f"drive-{run.run_id}").start()
            return run
        return self.drive(run.run_id)

    def _drive_safely(self, run_id: str) -> None:
        try:
            self.drive(run_id)
        except Exception:  # pragma: no cover - drive records failures itself
            log.exception("run %s crashed", run_id)

    def drive(self, run_id: str) -> PipelineRun:
        """Run every pending task in graph order, concurrently where the graph allows."""
        run = self.get_run(run_id)
        plan = self.plan(run.plan_id)
        if run.state is RunState.PENDING:
            run = self._emit(run_id, {"type": "run_started"})
        inflight: dict = {}
        halted = False
        try:
            while True:
                if not halted:
                    for t in run.task_records:
                        if t.state is TaskState.PENDING and t.task_name not in inflight and all(
                            run.task(d).state is TaskState.SUCCEEDED for d in t.deps
                        ):
                            fut = self._pool.submit(self._attempts, run_id, plan, t.task_name, None)
                            inflight[t.task_name] = fut
                if not inflight:
                    break
                done, _ = wait(list(inflight.values()), return_when=FIRST_COMPLETED)
                for name in [n for n, f in inflight.items() if f in done]:
                    result, _rec = inflight.pop(name).result()
                    if isinstance(result, TaskResult) and result.halt:
                        halted = True
                run = self.get_run(run_id)
            return self._finish(run_id)
        except BaseException:
            for f in inflight.values():
                f.cancel()
            self._finish(run_id, force_failed=True)
            raise

    def _finish(self, run_id: str, force_failed: bool = False) -> PipelineRun:
        run = self.get_run(run_id)
        try:
            if run.state.terminal:
                return run
            for t in run.task_records:
                if t.state is TaskState.PENDING:
                    upstream = [d for d in t.deps if run.task(d).state is not TaskState.SUCCEEDED]
                    reason = f"upstream {', '.join(upstream)} did not succeed" if upstream else "pipeline ended"
                    run = self._emit(run_id, {"type": "task_skipped", "task": t.task_name, "reason": reason})
            states = {t.state for t in run.task_records}
            if force_failed or TaskState.FAILED in states or TaskState.RUNNING in states:
                final = RunState.FAILED
            elif TaskState.SKIPPED in states:
                final = RunState.SKIPPED
            else:
                final = RunState.SUCCEEDED
            if run.state is RunState.PENDING:
                run = self._emit(run_id, {"type": "run_started"})
            run = self._emit(run_id, {"type": "run_finished", "state": final.value})
            if self.on_run_end is not None:
                try:
                    self.on_run_end(run)
                except Exception:
                    log.exception("cleanup after run %s failed", run_id)
            return run
        finally:
            self._release(run.plan_id, run_id)

    def _attempts(self, run_id: str, plan: TestPlan, name: str, inputs: Optional[dict]):
        """Execute one task with retries; returns (result, TaskRecord)."""
        executor = self.executors.get(name)
        standalone = inputs is not None
        run = self.get_run(run_id)
        upstream = dict(run.outputs())
        if inputs:
            upstream.update(inputs)
        node = plan.task(name)
        attempt = 0
        while True:
            attempt += 1
            run = self._emit(run_id, {"type": "task_started", "task": name, "attempt": attempt,
                                      "standalone": standalone})
            ctx = TaskContext(run, plan, name, node.params, upstream, attempt, self.clock)
            try:
                if executor is None:
                    raise TaskFailed(f"no executor registered for task {name}")
                result = executor(ctx)
            except Exception as exc:
                err = exc.to_dict() if isinstance(exc, RanforgeError) else {"code": "internal_error",
                                                                              "message": str(exc), "detail": None}
                retryable = isinstance(exc, RanforgeError) and exc.retryable
                ctx.log(f"attempt {attempt} failed: {err['code']}: {err['message']}")
                if retryable and attempt <= self.max_retries:
                    self._emit(run_id, {"type": "task_retry", "task": name, "attempt": attempt,
                                        "logs": "\n".join(ctx.lines), "error": err})
                    self.clock.sleep(self.backoff_s)
                    continue
                run = self._emit(run_id, {"type": "task_finished", "task": name, "attempt": attempt,
                                          "state": "FAILED", "logs": "\n".join(ctx.lines), "error": err})
                return exc, run.task(name)
            res = result if isinstance(result, TaskResult) else TaskResult(result)
            if res.halt:
                ctx.log(f"pipeline ends: {res.reason}")
            run = self._emit(run_id, {"type": "task_finished", "task": name, "attempt": attempt,
                                      "state": "SUCCEEDED", "output": res.output, "logs": "\n".join(ctx.lines)})
            return res, run.task(name)

    def execute_task(self, run_id: str, task_name: str, inputs: Optional[dict] = None) -> TaskRecord:
        """Run one task of a non-terminal run on its own.

        Without ``inputs`` every predecessor must already have SUCCEEDED; with
        ``inputs`` (task name -> output) the caller supplies upstream results.
        """
        run = self.get_run(run_id)
        plan = self.plan(run.plan_id)
        t = run.task(task_name)
        if run.state.terminal:
            raise InvalidTransition(f"run {run_id} is {run.state.value}")
        if t.state is not TaskState.PENDING:
            raise InvalidTransition(f"task {task_name} is {t.state.value}")
        blocked = [d for d in t.deps if run.task(d).state is not TaskState.SUCCEEDED]
        if blocked and inputs is None:
            raise PredecessorNotSatisfied(f"task {task_name} waits on {', '.join(blocked)}",
                                          detail={"unsatisfied": blocked})
        with self._lock:
            self._run_locks.setdefault(run_id, threading.RLock())
        if run.state is RunState.PENDING:
            self._emit(run_id, {"type": "run_started"})
        result, rec = self._attempts(run_id, plan, task_name, inputs)
        run = self.get_run(run_id)
        # a failed task can never be re-run, so its dependents are skipped now
        if rec.state is TaskState.FAILED or isinstance(result, TaskResult) and result.halt or all(
            x.state is not TaskState.PENDING for x in run.task_records
        ):
            self._finish(run_id)
        if rec.state is TaskState.FAILED:
            raise TaskFailed(f"task {task_name} failed after {rec.attempt} attempt(s)", detail=rec.to_dict())
        return rec

    def get_run(self, run_id: str) -> PipelineRun:
        with self._lock:
            run = self._runs.get(run_id)
        if run is not None:
            return run
        events = self.events.read(run_id)
        run = replay(events)
        with self._lock:
            self._runs.setdefault(run_id, run)
            self._seq[run_id] = max(self._seq[run_id], events[-1]["seq"])
            self._run_locks.setdefault(run_id, threading.RLock())
        return run

    def runs(self, plan_id: Optional[str] = None) -> list[PipelineRun]:
        out = []
        for rid in self.events.run_ids():
            try:
                run = self.get_run(rid)
            except (RanforgeError, ValueError):
                continue
            if plan_id is None or run.plan_id == plan_id:
                out.append(run)
        out.sort(key=lambda r: (r.created_at or "", r.run_id), reverse=True)
        return out

    def wait(self, run_id: str, timeout: Optional[float] = None) -> PipelineRun:
        with self._lock:
            ev = self._done.get(run_id)
        if ev is not None:
            ev.wait(timeout)
        return self.get_run(run_id)

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


@dataclass(frozen=True)
class Fire:
    at: datetime
    plan_id: str
    schedule: str
    tasks: tuple[str, ...]


class Scheduler:
    """Turns cron fires into run triggers on a queue drained by a dispatcher thread.

    Fires missed while the scheduler was not ticking are not backfilled; a
    tick that spans several fires of one schedule triggers it once. When two
    schedules of a plan fire together, only the one covering more tasks runs.
    """

    def __init__(self, engine: PipelineEngine, clock=None, start: Optional[datetime] = None):
        self.engine = engine
        self.clock = clock or engine.clock
        self._last = parse_ts(start) if start is not None else self.clock.now()
        self.queue: "queue.Queue[Optional[Fire]]" = queue.Queue()
        self.dispatched: list[tuple[Fire, Optional[str], Optional[str]]] = []
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def due(self, start: datetime, end: datetime) -> list[Fire]:
        fires: dict[tuple[str, datetime], Fire] = {}
        for plan in self.engine.plans():
            for sched in plan.schedules:
                hits = fires_between(sched.cadence, start, end)
                if not hits:
                    continue
                at = hits[-1]
                key = (plan.plan_id, at)
                cand = Fire(at, plan.plan_id, sched.name, tuple(sched.tasks))
                if key not in fires or len(cand.tasks) > len(fires[key].tasks):
                    fires[key] = cand
        latest: dict[str, Fire] = {}
        for f in sorted(fires.values(), key=lambda f: (f.at, -len(f.tasks))):
            latest[f.plan_id] = f  # one trigger per plan per tick
        return sorted(latest.values(), key=lambda f: (f.at, f.plan_id))

    def tick(self, now: Optional[datetime] = None) -> list[Fire]:
        now = parse_ts(now) if now is not None else self.clock.now()
        if now <= self._last:
            return []
        fires = self.due(self._last + _EPS, now + _EPS)
        self._last = now
        for f in fires:
            self.queue.put(f)
        return fires

    def dispatch_pending(self, wait: bool = True) -> list[tuple[Fire, Optional[str], Optional[str]]]:
        """Start a run for every queued fire; returns (fire, run_id, rejection) tuples."""
        out = []
        while True:
            try:
                f = self.queue.get_nowait()
            except queue.Empty:
                break
            if f is None:
                continue
            out.append(self._dispatch(f, wait))
        return out

    def _dispatch(self, f: Fire, wait: bool):
        try:
            run = self.engine.start_run(f.plan_id, Trigger.CRON, f.tasks, f.schedule, wait=wait)
            entry = (f, run.run_id, None)
        except RanforgeError as exc:
            log.warning("cron fire %s/%s at %s dropped: %s", f.plan_id, f.schedule, isoformat(f.at), exc)
            entry = (f, None, exc.code)
        self.dispatched.append(entry)
        return entry

    def start(self, poll_s: float = 1.0) -> None:
        """Run the tick loop and a dispatcher in background threads."""

        def ticker():
            while not self._stop.wait(poll_s):
                self.tick()

        def dispatcher():
            while True:
                f = self.queue.get()
                if f is None:
                    return
                self._dispatch(f, wait=True)

        self._stop.clear()
        self._thread = threading.Thread(target=ticker, daemon=True, name="cron-tick")
        self._thread.start()
        self._dispatcher = threading.Thread(target=dispatcher, daemon=True, name="cron-dispatch")
        self._dispatcher.start()

    def stop(self) -> None:
        self._stop.set()
        self.queue.put(None)
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._dispatcher.join(timeout=5)

