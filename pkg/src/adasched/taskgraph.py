"""DAG job model, rank measures and hyper-period expansion.

All times are integer microseconds. Job-set and request files carry
milliseconds (fractions allowed); conversion happens at the boundary via
:func:`ms_to_us` / :func:`us_to_ms`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

DEVICE_NAMES = ("cpu", "gpu")

JOBSET_SCHEMA = "adasched.jobset/1"
REQUEST_SCHEMA = "adasched.request/1"

# 2**53 us is ~285 years; beyond this float conversions stop being exact.
MAX_HYPERPERIOD_US = 2**53


def ms_to_us(ms: float) -> int:
    return int(round(float(ms) * 1000.0))


def us_to_ms(us: int) -> float:
    return us / 1000.0


class HyperPeriodError(OverflowError):
    """Raised when the lcm of the request periods exceeds the supported range."""


class TaskState(enum.IntEnum):
    WAITING = 0
    READY = 1
    DISPATCHED = 2
    FINISHED = 3


@dataclass(frozen=True)
class TaskNode:
    id: int
    wcet: tuple[int, ...]  # us, indexed by device id
    flops: float = 0.0

    def __post_init__(self):
        if any(w <= 0 for w in self.wcet):
            raise ValueError(f"task {self.id}: WCETs must be positive, got {self.wcet}")
        if self.flops < 0:
            raise ValueError(f"task {self.id}: flops must be >= 0")

    @property
    def e(self) -> int:
        """WCET used by the rank measures: the max over devices."""
        return max(self.wcet)


@dataclass(frozen=True)
class DagSpec:
    id: int
    tasks: tuple[TaskNode, ...]
    edges: frozenset[tuple[int, int]] = frozenset()
    name: str = ""

    def __post_init__(self):
        n = len(self.tasks)
        if n == 0:
            raise ValueError(f"job {self.id}: empty task list")
        for i, t in enumerate(self.tasks):
            if t.id != i:
                raise ValueError(f"job {self.id}: task ids must be 0..n-1 in order")
        ndev = {len(t.wcet) for t in self.tasks}
        if len(ndev) != 1:
            raise ValueError(f"job {self.id}: tasks disagree on device count")
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"job {self.id}: edge ({u}, {v}) out of range")
            # ids are a topological order, which also rules out cycles
            if u >= v:
                raise ValueError(f"job {self.id}: edge ({u}, {v}) violates topological id order")

    @classmethod
    def chain(cls, id: int, tasks: Sequence[TaskNode], name: str = "") -> "DagSpec":
        edges = frozenset((i, i + 1) for i in range(len(tasks) - 1))
        return cls(id=id, tasks=tuple(tasks), edges=edges, name=name)

    @property
    def n_devices(self) -> int:
        return len(self.tasks[0].wcet)

    @cached_property
    def succ(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.tasks]
        for u, v in sorted(self.edges):
            out[u].append(v)
        return tuple(tuple(s) for s in out)

    @cached_property
    def pred(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.tasks]
        for u, v in sorted(self.edges):
            out[v].append(u)
        return tuple(tuple(p) for p in out)

    @cached_property
    def blevels(self) -> tuple[int, ...]:
        bl = [0] * len(self.tasks)
        for t in reversed(range(len(self.tasks))):
            bl[t] = self.tasks[t].e + max((bl[s] for s in self.succ[t]), default=0)
        return tuple(bl)

    @cached_property
    def depth(self) -> int:
        """Maximum edge count on any root-to-leaf path."""
        hops = [0] * len(self.tasks)
        for t in reversed(range(len(self.tasks))):
            hops[t] = max((hops[s] + 1 for s in self.succ[t]), default=0)
        return max(hops)

    @cached_property
    def descendants(self) -> tuple[frozenset[int], ...]:
        desc: list[frozenset[int]] = [frozenset()] * len(self.tasks)
        for t in reversed(range(len(self.tasks))):
            acc: set[int] = set()
            for s in self.succ[t]:
                acc.add(s)
                acc |= desc[s]
            desc[t] = frozenset(acc)
        return tuple(desc)

    @property
    def is_chain(self) -> bool:
        return self.edges == frozenset((i, i + 1) for i in range(len(self.tasks) - 1))

    @property
    def total_wcet(self) -> int:
        """Sum of max-device WCETs (the job's overall WCET)."""
        return sum(t.e for t in self.tasks)

    @property
    def flops(self) -> float:
        return sum(t.flops for t in self.tasks)

    def segment_limit(self, start: int) -> int:
        """Largest fusion depth from ``start`` that stays on a chain segment.

        A segment stops before any branch (out-degree > 1) or join
        (in-degree > 1).
        """
        d, t = 0, start
        while len(self.succ[t]) == 1:
            nxt = self.succ[t][0]
            if len(self.pred[nxt]) != 1:
                break
            d, t = d + 1, nxt
        return d

    def scaled(self, frames: int) -> "DagSpec":
        """Spec whose WCETs and flops are multiplied by ``frames``."""
        if frames == 1:
            return self
        tasks = tuple(
            TaskNode(t.id, tuple(w * frames for w in t.wcet), t.flops * frames) for t in self.tasks
        )
        return DagSpec(self.id, tasks, self.edges, self.name)


def blevel(spec: DagSpec, task_id: int) -> int:
    if not 0 <= task_id < len(spec.tasks):
        raise ValueError(f"unknown task id {task_id} for job {spec.id}")
    return spec.blevels[task_id]


@dataclass(frozen=True)
class OracleRequest:
    """Per-job ``(frames, period_ms)`` pairs, positionally matching the job set."""

    entries: tuple[tuple[int, float], ...]

    def __post_init__(self):
        # canonical types so code-built and file-loaded requests serialise identically
        object.__setattr__(self, "entries", tuple((int(w), float(p)) for w, p in self.entries))
        for w, p in self.entries:
            if w < 1:
                raise ValueError(f"frames must be a positive integer, got {w}")
            if p <= 0:
                raise ValueError(f"periods must be positive, got {p}")

    @classmethod
    def from_periods(cls, periods_ms: Iterable[float], frames: int = 1) -> "OracleRequest":
        return cls(tuple((frames, p) for p in periods_ms))

    @property
    def periods_ms(self) -> tuple[float, ...]:
        return tuple(p for _, p in self.entries)

    @property
    def frames(self) -> tuple[int, ...]:
        return tuple(w for w, _ in self.entries)


@dataclass(eq=False)
class DagInstance:
    spec: DagSpec  # already scaled by the frame count
    index: int  # 1-based
    release: int
    deadline: int
    frames: int = 1
    states: list[TaskState] = field(default_factory=list)
    finish_time: int | None = None

    def __post_init__(self):
        if not self.states:
            self.states = [
                TaskState.WAITING if self.spec.pred[t] else TaskState.READY
                for t in range(len(self.spec.tasks))
            ]

    @property
    def spec_id(self) -> int:
        return self.spec.id

    @property
    def key(self) -> tuple[int, int]:
        return (self.spec.id, self.index)

    @property
    def finished(self) -> bool:
        return self.finish_time is not None

    @property
    def lateness(self) -> int | None:
        return None if self.finish_time is None else self.finish_time - self.deadline

    def ready_tasks(self) -> list[int]:
        return [t for t, s in enumerate(self.states) if s == TaskState.READY]

    def finish_tasks(self, task_ids: Iterable[int], now: int) -> None:
        """Mark tasks finished, promote successors, close the instance if done."""
        spec, states = self.spec, self.states
        for t in task_ids:
            states[t] = TaskState.FINISHED
        for t in task_ids:
            for s in spec.succ[t]:
                if states[s] == TaskState.WAITING and all(
                    states[p] == TaskState.FINISHED for p in spec.pred[s]
                ):
                    states[s] = TaskState.READY
        if all(s == TaskState.FINISHED for s in states):
            self.finish_time = now

    def copy(self) -> "DagInstance":
        return DagInstance(
            self.spec, self.index, self.release, self.deadline, self.frames,
            list(self.states), self.finish_time,
        )


def local_deadline(instance: DagInstance, task_id: int) -> int:
    spec = instance.spec
    return instance.deadline - blevel(spec, task_id) + spec.tasks[task_id].e


def expand_hyperperiod(
    jobs: Sequence[DagSpec],
    request: OracleRequest,
    max_hyperperiod: int = MAX_HYPERPERIOD_US,
) -> tuple[int, list[DagInstance]]:
    """Release every instance of every job inside one hyper-period.

    Returns ``(H, instances)`` with H in microseconds. Instances are ordered
    by job then instance index.
    """
    if len(jobs) != len(request.entries):
        raise ValueError(f"request has {len(request.entries)} entries for {len(jobs)} jobs")
    periods = [ms_to_us(p) for p in request.periods_ms]
    if any(p <= 0 for p in periods):
        raise ValueError("periods must be at least 1 us")
    H = 1
    for p in periods:
        H = math.lcm(H, p)
        if H > max_hyperperiod:
            raise HyperPeriodError(f"hyper-period exceeds {max_hyperperiod} us")
    instances = []
    for spec, (w, _), p in zip(jobs, request.entries, periods):
        scaled = spec.scaled(w)
        for j in range(1, H // p + 1):
            instances.append(DagInstance(scaled, j, (j - 1) * p, j * p, frames=w))
    return H, instances


class FrontierEntry(NamedTuple):
    local_deadline: int
    spec_id: int
    instance_index: int
    task_id: int
    instance: DagInstance


def frontier_of(instances: Iterable[DagInstance], now: int) -> list[FrontierEntry]:
    """Ready tasks of released, unblocked instances, sorted by local deadline.

    An instance is unblocked when every lower-index instance of the same job
    among ``instances`` has finished. Ties break on (job, instance, task).
    """
    by_job: dict[int, list[DagInstance]] = {}
    for inst in instances:
        by_job.setdefault(inst.spec_id, []).append(inst)
    out = []
    for insts in by_job.values():
        head = min((i for i in insts if not i.finished), key=lambda i: i.index, default=None)
        if head is None or head.release > now:
            continue
        for t in head.ready_tasks():
            out.append(FrontierEntry(local_deadline(head, t), head.spec_id, head.index, t, head))
    out.sort(key=lambda e: e[:4])
    return out


# -- file formats -----------------------------------------------------------


def jobset_to_dict(jobs: Sequence[DagSpec]) -> dict:
    out = []
    for spec in jobs:
        tasks = []
        for t in spec.tasks:
            row = {f"wcet_{DEVICE_NAMES[d]}_ms": us_to_ms(w) for d, w in enumerate(t.wcet)}
            row["flops"] = t.flops
            tasks.append(row)
        out.append({"name": spec.name, "tasks": tasks, "edges": sorted(list(e) for e in spec.edges)})
    return {"schema": JOBSET_SCHEMA, "devices": list(DEVICE_NAMES), "jobs": out}


def jobset_from_dict(data: dict) -> list[DagSpec]:
    if data.get("schema") != JOBSET_SCHEMA:
        raise ValueError(f"unsupported job-set schema {data.get('schema')!r}")
    devices = data.get("devices", list(DEVICE_NAMES))
    jobs = []
    for k, job in enumerate(data["jobs"]):
        tasks = [
            TaskNode(i, tuple(ms_to_us(t[f"wcet_{d}_ms"]) for d in devices), float(t.get("flops", 0.0)))
            for i, t in enumerate(job["tasks"])
        ]
        edges = frozenset((int(u), int(v)) for u, v in job.get("edges", []))
        jobs.append(DagSpec(k, tuple(tasks), edges, job.get("name", f"G{k + 1}")))
    return jobs


def load_jobset(path: str | Path) -> list[DagSpec]:
    return jobset_from_dict(json.loads(Path(path).read_text()))


def request_to_dict(request: OracleRequest) -> dict:
    return {"schema": REQUEST_SCHEMA, "jobs": [{"w": w, "p_ms": p} for w, p in request.entries]}


def request_from_dict(data: dict) -> OracleRequest:
    if data.get("schema", REQUEST_SCHEMA) != REQUEST_SCHEMA:
        raise ValueError(f"unsupported request schema {data.get('schema')!r}")
    return OracleRequest(tuple((int(e["w"]), float(e["p_ms"])) for e in data["jobs"]))
