"""Greedy policy rollout, admission control and the Global-EDF baseline."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .qlearn import QNetwork
from .simenv import (
    DeviceModel,
    HyperSnapshot,
    MappingDecision,
    advance,
    apply_mapping,
    encode_action,
    observe_state,
)
from .taskgraph import (
    DEVICE_NAMES,
    DagSpec,
    FrontierEntry,
    OracleRequest,
    ms_to_us,
    request_from_dict,
    request_to_dict,
    us_to_ms,
)
from .workload import FusionProfile, throughput_index

PLAN_SCHEMA = "adasched.plan/1"
REPORT_SCHEMA = "adasched.compare/1"
DEFAULT_THRESHOLD = 15.0  # percent

Policy = Callable[[HyperSnapshot, FrontierEntry], int]


@dataclass
class InstanceOutcome:
    spec_id: int
    index: int
    release: int
    deadline: int
    finish: int

    @property
    def lateness(self) -> int:
        return self.finish - self.deadline

    @property
    def met(self) -> bool:
        return self.finish <= self.deadline


@dataclass
class SchedulePlan:
    request: OracleRequest
    H: int
    decisions: list[MappingDecision]
    outcomes: list[InstanceOutcome]
    kind: str = "rl"
    meta: dict = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return len(self.outcomes)

    @property
    def misses(self) -> int:
        return sum(not o.met for o in self.outcomes)

    @property
    def miss_pct(self) -> float:
        return 100.0 * self.misses / self.n_instances

    @property
    def avg_lateness_ms(self) -> float:
        return us_to_ms(float(np.mean([o.lateness for o in self.outcomes])))

    def by_instance(self) -> dict[tuple[int, int], list[MappingDecision]]:
        out: dict[tuple[int, int], list[MappingDecision]] = {}
        for d in self.decisions:
            out.setdefault((d.spec_id, d.instance_index), []).append(d)
        return out


def simulate(jobs: Sequence[DagSpec], request: OracleRequest, policy: Policy, kind: str,
             profiles: dict[int, FusionProfile] | None = None,
             devices: Sequence[DeviceModel] | None = None,
             max_depth: int | None = None) -> tuple[SchedulePlan, HyperSnapshot]:
    """Roll ``policy`` out over one hyper-period with nominal WCETs and baseline frequencies."""
    snap = HyperSnapshot(jobs, request, profiles, devices, max_depth)
    while not snap.done:
        fr = snap.frontier()
        if fr:
            apply_mapping(snap, fr[0], policy(snap, fr[0]))
        else:
            advance(snap)
    outcomes = [InstanceOutcome(i.spec_id, i.index, i.release, i.deadline, i.finish_time) for i in snap.instances]
    return SchedulePlan(request, snap.H, list(snap.decisions), outcomes, kind), snap


def greedy_policy(net: QNetwork) -> Policy:
    def policy(snap: HyperSnapshot, entry: FrontierEntry) -> int:
        return int(np.argmax(net.forward(observe_state(snap))))
    return policy


def edf_policy(snap: HyperSnapshot, entry: FrontierEntry) -> int:
    """Unfused dispatch to the device with the smallest task WCET (lowest id on ties)."""
    wcet = entry.instance.spec.tasks[entry.task_id].wcet
    device = min(range(len(wcet)), key=lambda d: (wcet[d], d))
    return encode_action(device, 0, snap.n_devices, snap.max_depth)


def _check_dims(net: QNetwork, jobs, devices, max_depth):
    n = len(devices) if devices is not None else len(DEVICE_NAMES)
    D = max(j.depth for j in jobs) if max_depth is None else max_depth
    want = (n + 2 * len(jobs), n * (D + 1))
    if (net.sizes[0], net.sizes[2]) != want:
        raise ValueError(
            f"network maps {net.sizes[0]} inputs to {net.sizes[2]} actions; "
            f"platform needs {want[0]} inputs and {want[1]} actions"
        )


def infer_plan(net: QNetwork, jobs: Sequence[DagSpec], request: OracleRequest,
               profiles: dict[int, FusionProfile] | None = None,
               devices: Sequence[DeviceModel] | None = None,
               max_depth: int | None = None) -> SchedulePlan:
    _check_dims(net, jobs, devices, max_depth)
    plan, _ = simulate(jobs, request, greedy_policy(net), "rl", profiles, devices, max_depth)
    return plan


def edf_baseline(jobs: Sequence[DagSpec], request: OracleRequest,
                 profiles: dict[int, FusionProfile] | None = None,
                 devices: Sequence[DeviceModel] | None = None,
                 max_depth: int | None = None) -> SchedulePlan:
    plan, _ = simulate(jobs, request, edf_policy, "edf", profiles, devices, max_depth)
    plan.meta["fusion"] = "disabled"
    return plan


def admit(plan: SchedulePlan, th: float = DEFAULT_THRESHOLD) -> bool:
    """Accept iff the predicted miss percentage is strictly below ``th``."""
    return plan.miss_pct < th


# -- comparison -------------------------------------------------------------


@dataclass
class ComparisonRow:
    request_id: int
    periods_ms: tuple[float, ...]
    ti: float
    instances: int
    rl_miss_pct: float
    edf_miss_pct: float
    rl_lateness_ms: float
    edf_lateness_ms: float
    admitted: bool


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    threshold: float = DEFAULT_THRESHOLD

    @property
    def rl_wins(self) -> int:
        return sum(r.rl_miss_pct < r.edf_miss_pct for r in self.rows)

    @property
    def ties(self) -> int:
        return sum(r.rl_miss_pct == r.edf_miss_pct for r in self.rows)

    @property
    def edf_wins(self) -> int:
        return sum(r.rl_miss_pct > r.edf_miss_pct for r in self.rows)

    COLUMNS = ("request_id", "ti", "periods_ms", "instances", "rl_miss_pct", "edf_miss_pct",
               "rl_lateness_ms", "edf_lateness_ms", "admitted")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {REPORT_SCHEMA}; threshold_pct={self.threshold}; baseline fusion disabled\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([
                r.request_id, repr(r.ti), " ".join(repr(p) for p in r.periods_ms), r.instances,
                repr(r.rl_miss_pct), repr(r.edf_miss_pct), repr(r.rl_lateness_ms), repr(r.edf_lateness_ms),
                int(r.admitted),
            ])
        buf.write(f"# totals: rl_wins={self.rl_wins} ties={self.ties} edf_wins={self.edf_wins}\n")
        return buf.getvalue()


def compare(policy_plans: Sequence[SchedulePlan], baseline_plans: Sequence[SchedulePlan],
            requests: Sequence[OracleRequest], jobs: Sequence[DagSpec],
            th: float = DEFAULT_THRESHOLD) -> ComparisonReport:
    """Pair RL and baseline plans per request; rows sorted by throughput index."""
    if not (len(policy_plans) == len(baseline_plans) == len(requests)):
        raise ValueError("policy plans, baseline plans and requests must have equal length")
    rows = []
    for i, (p, b, r) in enumerate(zip(policy_plans, baseline_plans, requests)):
        if p.request != r or b.request != r:
            raise ValueError(f"request {i}: plans were computed for a different request")
        rows.append(ComparisonRow(
            i, r.periods_ms, throughput_index(r, jobs), p.n_instances, p.miss_pct, b.miss_pct,
            p.avg_lateness_ms, b.avg_lateness_ms, admit(p, th),
        ))
    rows.sort(key=lambda row: (row.ti, row.request_id))
    return ComparisonReport(rows, th)


def read_report_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- plan files -------------------------------------------------------------


def plan_to_dict(plan: SchedulePlan) -> dict:
    by_inst = plan.by_instance()
    instances = []
    for o in plan.outcomes:
        instances.append({
            "job": o.spec_id,
            "instance": o.index,
            "release_ms": us_to_ms(o.release),
            "deadline_ms": us_to_ms(o.deadline),
            "finish_ms": us_to_ms(o.finish),
            "decisions": [d.seq for d in by_inst.get((o.spec_id, o.index), [])],
        })
    decisions = [
        {
            "seq": d.seq, "job": d.spec_id, "instance": d.instance_index, "tasks": list(d.tasks),
            "device": d.device, "depth": d.depth, "action": d.action,
            "decision_ms": us_to_ms(d.decision_time), "start_ms": us_to_ms(d.start_time),
            "finish_ms": us_to_ms(d.finish_time), "nominal_ms": us_to_ms(d.nominal),
            "deadline_ms": us_to_ms(d.deadline),
        }
        for d in plan.decisions
    ]
    return {
        "schema": PLAN_SCHEMA,
        "kind": plan.kind,
        "request": request_to_dict(plan.request),
        "H_ms": us_to_ms(plan.H),
        "predicted": {"instances": plan.n_instances, "misses": plan.misses, "miss_pct": plan.miss_pct},
        "meta": plan.meta,
        "instances": instances,
        "decisions": decisions,
    }


def plan_from_dict(data: dict) -> SchedulePlan:
    if data.get("schema") != PLAN_SCHEMA:
        raise ValueError(f"unsupported plan schema {data.get('schema')!r}")
    decisions = [
        MappingDecision(
            seq=d["seq"], spec_id=d["job"], instance_index=d["instance"], tasks=tuple(d["tasks"]),
            device=d["device"], depth=d["depth"], action=d["action"],
            decision_time=ms_to_us(d["decision_ms"]), deadline=ms_to_us(d["deadline_ms"]),
            nominal=ms_to_us(d["nominal_ms"]), start_time=ms_to_us(d["start_ms"]),
            finish_time=ms_to_us(d["finish_ms"]),
        )
        for d in data["decisions"]
    ]
    outcomes = [
        InstanceOutcome(i["job"], i["instance"], ms_to_us(i["release_ms"]), ms_to_us(i["deadline_ms"]),
                        ms_to_us(i["finish_ms"]))
        for i in data["instances"]
    ]
    return SchedulePlan(request_from_dict(data["request"]), ms_to_us(data["H_ms"]), decisions, outcomes,
                        data.get("kind", "rl"), data.get("meta", {}))


def plan_trace(plan: SchedulePlan) -> list[dict]:
    """Trace records for a plan, same schema as simulator traces."""
    finish = {(o.spec_id, o.index): o for o in plan.outcomes}
    out = []
    for d in plan.decisions:
        o = finish[(d.spec_id, d.instance_index)]
        out.append({
            "seq": d.seq, "job": d.spec_id, "instance": d.instance_index, "tasks": list(d.tasks),
            "device": DEVICE_NAMES[d.device], "action": d.action,
            "decision_ms": us_to_ms(d.decision_time), "start_ms": us_to_ms(d.start_time),
            "finish_ms": us_to_ms(d.finish_time), "frequency": d.frequency,
            "deadline_ms": us_to_ms(d.deadline), "instance_finish_ms": us_to_ms(o.finish), "met": o.met,
        })
    return out


def plan_json(plan: SchedulePlan) -> str:
    return json.dumps(plan_to_dict(plan), sort_keys=True, indent=1) + "\n"
