"""Discrete-event execution of one hyper-period on a CPU/GPU platform.

The snapshot owns all mutable state: instance progress, device FIFO queues
and the completion/release event heap. A driver loop alternates between
dispatching the earliest-local-deadline frontier task (:func:`apply_mapping`)
and moving time forward (:func:`advance`)::

    snap = HyperSnapshot(jobs, request)
    while not snap.done:
        frontier = snap.frontier()
        if frontier:
            apply_mapping(snap, frontier[0], policy(observe_state(snap)))
        else:
            advance(snap)
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .taskgraph import (
    DEVICE_NAMES,
    DagInstance,
    DagSpec,
    FrontierEntry,
    OracleRequest,
    TaskState,
    expand_hyperperiod,
    frontier_of,
    us_to_ms,
)
from .workload import FusionProfile, synthesize_fusion_profile

TRACE_SCHEMA = "adasched.trace/1"

DEFAULT_FREQUENCY_LEVELS = (0.6, 0.8, 1.0, 1.2, 1.4, 1.6)

_COMPLETION, _RELEASE = 0, 1


class ContractViolation(RuntimeError):
    """An operation was invoked outside its precondition."""


# -- action codec -----------------------------------------------------------


def action_space_size(n_devices: int, max_depth: int) -> int:
    return n_devices * (max_depth + 1)


def decode_action(a: int, n_devices: int, max_depth: int) -> tuple[int, int]:
    """Split an action index into ``(device, fusion depth)``."""
    if not 0 <= a < action_space_size(n_devices, max_depth):
        raise ValueError(f"action {a} outside [0, {action_space_size(n_devices, max_depth)})")
    return divmod(a, max_depth + 1)


def encode_action(device: int, depth: int, n_devices: int, max_depth: int) -> int:
    if not (0 <= device < n_devices and 0 <= depth <= max_depth):
        raise ValueError(f"device {device} / depth {depth} out of range")
    return device * (max_depth + 1) + depth


# -- devices ----------------------------------------------------------------


@dataclass(slots=True)
class DeviceModel:
    id: int
    name: str
    frequency_levels: tuple[float, ...] = DEFAULT_FREQUENCY_LEVELS
    speedup_table: dict[float, float] | None = None
    current_frequency: float = 1.0
    busy_until: int = 0
    queue: deque = field(default_factory=deque)
    running: "MappingDecision | None" = None

    def __post_init__(self):
        if 1.0 not in self.frequency_levels:
            raise ValueError(f"{self.name}: baseline frequency 1.0 missing from levels")
        self.frequency_levels = tuple(sorted(self.frequency_levels))
        if self.speedup_table is None:
            self.speedup_table = {f: f for f in self.frequency_levels}
        sp = [self.speedup_table[f] for f in self.frequency_levels]
        if any(b < a for a, b in zip(sp, sp[1:])):
            raise ValueError(f"{self.name}: speedup table must be non-decreasing in frequency")
        if self.speedup_table[1.0] != 1.0:
            raise ValueError(f"{self.name}: speedup at baseline frequency must be 1.0")

    @property
    def max_speedup(self) -> float:
        return self.speedup_table[self.frequency_levels[-1]]

    def speedup(self, frequency: float) -> float:
        return self.speedup_table[frequency]

    def fresh(self) -> "DeviceModel":
        return DeviceModel(self.id, self.name, self.frequency_levels, dict(self.speedup_table))


def default_devices(frequency_levels: Sequence[float] = DEFAULT_FREQUENCY_LEVELS) -> list[DeviceModel]:
    return [DeviceModel(i, name, tuple(frequency_levels)) for i, name in enumerate(DEVICE_NAMES)]


# -- decisions and snapshot -------------------------------------------------


@dataclass(slots=True)
class MappingDecision:
    seq: int
    spec_id: int
    instance_index: int
    tasks: tuple[int, ...]
    device: int
    depth: int
    action: int
    decision_time: int
    deadline: int
    nominal: int  # fused WCET at baseline frequency, no interference
    start_time: int | None = None
    finish_time: int | None = None
    frequency: float = 1.0
    speedup: float = 1.0
    interference: float = 1.0

    @property
    def start_task(self) -> int:
        return self.tasks[0]

    @property
    def key(self) -> tuple[int, int, int]:
        """(job, instance, first task): unique per decision within a hyper-period."""
        return (self.spec_id, self.instance_index, self.tasks[0])


StartHook = Callable[["HyperSnapshot", MappingDecision, DeviceModel], float]


def perturb_duration(base: float, rng: np.random.Generator, intensity: float) -> float:
    """Inflate ``base`` by a factor drawn uniformly from ``[1, 1 + intensity]``."""
    if intensity < 0:
        raise ValueError("interference intensity must be >= 0")
    if intensity == 0:
        return base
    return base * rng.uniform(1.0, 1.0 + intensity)


def group_rng(seed: int, key: tuple[int, int, int]) -> np.random.Generator:
    """Interference stream for one group, independent of dispatch order."""
    return np.random.default_rng([seed, *key])


class HyperSnapshot:
    """Mutable world for one (job set, request) hyper-period."""

    def __init__(
        self,
        jobs: Sequence[DagSpec],
        request: OracleRequest,
        profiles: dict[int, FusionProfile] | None = None,
        devices: Sequence[DeviceModel] | None = None,
        max_depth: int | None = None,
        intensity: float = 0.0,
        seed: int = 0,
        start_hook: StartHook | None = None,
    ):
        self.jobs = list(jobs)
        self.request = request
        self.H, self.instances = expand_hyperperiod(self.jobs, request)
        self.profiles = profiles if profiles is not None else {j.id: synthesize_fusion_profile(j) for j in self.jobs}
        self.devices = [d.fresh() for d in (devices if devices is not None else default_devices())]
        self.max_depth = max(j.depth for j in self.jobs) if max_depth is None else max_depth
        self.intensity = intensity
        self.seed = seed
        self.start_hook = start_hook
        self.now = 0
        self.events: list[tuple[int, int, int, int]] = []
        self.decisions: list[MappingDecision] = []
        self.finished: list[DagInstance] = []

        self.by_job: list[list[DagInstance]] = [[] for _ in self.jobs]
        for inst in self.instances:
            self.by_job[inst.spec_id].append(inst)
            if inst.release > 0:
                heapq.heappush(self.events, (inst.release, _RELEASE, -1, -1))
        self._head = [0] * len(self.jobs)  # index of earliest unfinished instance per job
        self._undispatched = sum(len(i.spec.tasks) for i in self.instances)

    # -- queries ------------------------------------------------------------

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_actions(self) -> int:
        return action_space_size(self.n_devices, self.max_depth)

    @property
    def state_size(self) -> int:
        return self.n_devices + 2 * len(self.jobs)

    @property
    def done(self) -> bool:
        return len(self.finished) == len(self.instances)

    @property
    def all_dispatched(self) -> bool:
        return self._undispatched == 0

    def active(self, k: int) -> DagInstance | None:
        """Earliest unfinished instance of job ``k`` if it has been released."""
        insts = self.by_job[k]
        h = self._head[k]
        if h < len(insts) and insts[h].release <= self.now:
            return insts[h]
        return None

    def frontier(self) -> list[FrontierEntry]:
        heads = [inst for k in range(len(self.jobs)) if (inst := self.active(k)) is not None]
        return frontier_of(heads, self.now)

    # -- internals ----------------------------------------------------------

    def _start(self, dec: MappingDecision, dev: DeviceModel) -> None:
        freq = self.start_hook(self, dec, dev) if self.start_hook is not None else 1.0
        dev.current_frequency = freq
        sp = dev.speedup(freq)
        base = dec.nominal / sp
        if self.intensity > 0:
            perturbed = perturb_duration(base, group_rng(self.seed, dec.key), self.intensity)
            dec.interference = perturbed / base
            base = perturbed
        dec.frequency, dec.speedup = freq, sp
        dec.start_time = self.now
        dec.finish_time = self.now + max(1, int(round(base)))
        dev.running = dec
        dev.busy_until = dec.finish_time
        heapq.heappush(self.events, (dec.finish_time, _COMPLETION, dev.id, dec.seq))

    def _instance(self, spec_id: int, index: int) -> DagInstance:
        return self.by_job[spec_id][index - 1]


def _group_tasks(spec: DagSpec, start: int, depth: int) -> tuple[int, ...]:
    out, t = [start], start
    for _ in range(depth):
        t = spec.succ[t][0]
        out.append(t)
    return tuple(out)


def apply_mapping(snap: HyperSnapshot, t_min: FrontierEntry, action: int) -> MappingDecision:
    """Dispatch ``t_min`` and up to ``depth`` chain descendants as one group."""
    inst, task = t_min.instance, t_min.task_id
    if snap.active(inst.spec_id) is not inst or inst.states[task] != TaskState.READY:
        raise ContractViolation(f"task {task} of {inst.key} is not in the frontier")
    device, depth = decode_action(action, snap.n_devices, snap.max_depth)
    prof = snap.profiles[inst.spec_id]
    depth = min(depth, prof.max_depth(task))
    tasks = _group_tasks(inst.spec, task, depth)
    fused = prof.fused_wcet(task, depth, device)
    w = inst.frames
    nominal = fused if w == 1 else w * (fused - prof.launch_overhead[device]) + prof.launch_overhead[device]
    for t in tasks:
        inst.states[t] = TaskState.DISPATCHED
    snap._undispatched -= len(tasks)
    dec = MappingDecision(
        seq=len(snap.decisions), spec_id=inst.spec_id, instance_index=inst.index, tasks=tasks,
        device=device, depth=depth, action=action, decision_time=snap.now,
        deadline=inst.deadline, nominal=nominal,
    )
    snap.decisions.append(dec)
    dev = snap.devices[device]
    if dev.running is None and not dev.queue:
        snap._start(dec, dev)
    else:
        dev.queue.append(dec)
    return dec


def observe_state(snap: HyperSnapshot) -> np.ndarray:
    """``[dt_1..dt_n, rt_1..rt_J, dr_1..dr_J]`` normalised by the hyper-period."""
    n, J = snap.n_devices, len(snap.jobs)
    s = np.zeros(n + 2 * J)
    H, now = snap.H, snap.now
    for i, dev in enumerate(snap.devices):
        load = (dev.running.finish_time if dev.running is not None else now) - now
        load += sum(d.nominal for d in dev.queue)
        s[i] = max(load, 0) / H
    for k in range(J):
        inst = snap.active(k)
        if inst is None:
            continue
        spec, states = inst.spec, inst.states
        rt = 0
        for t, st in enumerate(states):
            if st != TaskState.FINISHED and all(states[p] == TaskState.FINISHED for p in spec.pred[t]):
                rt = max(rt, spec.blevels[t])
        s[n + k] = rt / H
        s[n + J + k] = (inst.deadline - now) / H
    return s


def advance(snap: HyperSnapshot) -> list[MappingDecision]:
    """Jump to the next event time and process every event due then.

    Completions at the same instant are handled in (device id, decision
    order). Returns the groups that completed.
    """
    if not snap.events:
        raise ContractViolation("advance() on an empty event queue")
    t = snap.events[0][0]
    snap.now = t
    done: list[MappingDecision] = []
    while snap.events and snap.events[0][0] == t:
        _, kind, dev_id, _ = heapq.heappop(snap.events)
        if kind != _COMPLETION:
            continue
        dev = snap.devices[dev_id]
        dec = dev.running
        dev.running = None
        dev.current_frequency = 1.0
        inst = snap._instance(dec.spec_id, dec.instance_index)
        inst.finish_tasks(dec.tasks, t)
        done.append(dec)
        if inst.finished:
            snap.finished.append(inst)
            snap._head[inst.spec_id] += 1
        if dev.queue:
            snap._start(dev.queue.popleft(), dev)
    return done


def assign_rewards(instance: DagInstance, transitions: Iterable) -> list:
    """Write +1 (deadline met, inclusive) or -1 into every pending transition of ``instance``."""
    if not instance.finished:
        raise ContractViolation(f"instance {instance.key} has not finished")
    r = 1.0 if instance.finish_time <= instance.deadline else -1.0
    out = []
    for tr in transitions:
        tr.r = r
        out.append(tr)
    return out


# -- trace export -----------------------------------------------------------


def trace_records(snap: HyperSnapshot, extra: dict[tuple, dict] | None = None) -> list[dict]:
    records = []
    for d in snap.decisions:
        inst = snap._instance(d.spec_id, d.instance_index)
        rec = {
            "seq": d.seq,
            "job": d.spec_id,
            "instance": d.instance_index,
            "tasks": list(d.tasks),
            "device": DEVICE_NAMES[d.device] if d.device < len(DEVICE_NAMES) else str(d.device),
            "action": d.action,
            "decision_ms": us_to_ms(d.decision_time),
            "start_ms": None if d.start_time is None else us_to_ms(d.start_time),
            "finish_ms": None if d.finish_time is None else us_to_ms(d.finish_time),
            "frequency": d.frequency,
            "deadline_ms": us_to_ms(d.deadline),
            "instance_finish_ms": None if inst.finish_time is None else us_to_ms(inst.finish_time),
            "met": None if inst.finish_time is None else inst.finish_time <= inst.deadline,
        }
        if extra and d.key in extra:
            rec.update(extra[d.key])
        records.append(rec)
    return records


def write_trace(path, records: list[dict], meta: dict | None = None) -> None:
    header = {"schema": TRACE_SCHEMA, **(meta or {})}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or rows[0].get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path}: not a {TRACE_SCHEMA} file")
    return rows[0], rows[1:]
