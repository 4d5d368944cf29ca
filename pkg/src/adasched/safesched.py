"""Deployed low-level scheduler: plan replay under interference with DVFS safe mode.

Replay keeps the plan's mapping and each device's dispatch order fixed.
A group starts once its device has finished the previous group in that
order and its own predecessors (and, for a first group, the previous
instance of the job) are done. With no interference and baseline
frequencies this reproduces the simulator's timing exactly. Start times are
max-plus functions of durations, so any speed-up can only move finishes
earlier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .rollout import DEFAULT_THRESHOLD, SchedulePlan, admit
from .simenv import DeviceModel, default_devices, group_rng, perturb_duration
from .taskgraph import DEVICE_NAMES, DagSpec, us_to_ms


class PlanRejected(RuntimeError):
    """Refusing to deploy a plan that failed admission."""


@dataclass
class ControllerConfig:
    rho: float = 0.5
    delta_sl: float | None = None  # ms; None -> delta_sl_fraction of the job's total WCET
    delta_sl_fraction: float = 0.10
    sign: str = "deficit"  # "literal" adds (sl - delta_sl) as printed in Algorithm 1

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.delta_sl is not None and self.delta_sl < 0:
            raise ValueError("delta_sl must be >= 0")
        if self.sign not in ("deficit", "literal"):
            raise ValueError(f"unknown sign convention {self.sign!r}")

    def margin_us(self, spec: DagSpec) -> float:
        if self.delta_sl is not None:
            return self.delta_sl * 1000.0
        return self.delta_sl_fraction * spec.total_wcet


def slack(spec: DagSpec, deadline: int, now: int, tasks: Sequence[int]) -> int:
    """Time to deadline minus the worst-case remaining work of ``tasks`` and their descendants."""
    rest = set(tasks)
    for t in tasks:
        rest |= spec.descendants[t]
    return (deadline - now) - sum(spec.tasks[t].e for t in rest)


def controller_step(sp_prev: float, sl: float, delta_sl: float, rho: float, b: float,
                    max_speedup: float = float("inf"), sign: str = "deficit") -> float:
    """Pole-based speed-up update, clamped to ``[1, max_speedup]``.

    The default ``deficit`` form adds ``rho * (delta_sl - sl) / b`` so the
    speed-up grows while the slack stays below the margin.
    """
    if b <= 0:
        raise ValueError("b must be positive")
    err = (delta_sl - sl) if sign == "deficit" else (sl - delta_sl)
    sp = sp_prev + rho * err / b
    return min(max(sp, 1.0), max_speedup)


def lookup_frequency(device: DeviceModel, sp: float) -> float:
    """Lowest frequency level whose speed-up reaches ``sp``; the top level otherwise."""
    for f in device.frequency_levels:
        if device.speedup(f) >= sp - 1e-12:
            return f
    return device.frequency_levels[-1]


@dataclass
class DeployRun:
    safe_mode: bool
    records: list[dict] = field(default_factory=list)
    finish: dict[tuple[int, int], int] = field(default_factory=dict)
    deadlines: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def misses(self) -> int:
        return sum(self.finish[k] > self.deadlines[k] for k in self.finish)

    @property
    def miss_pct(self) -> float:
        return 100.0 * self.misses / len(self.finish)

    @property
    def engaged(self) -> int:
        return sum(r["safe"] for r in self.records)


@dataclass
class DeployResult:
    plan: SchedulePlan
    without_safe: DeployRun
    with_safe: DeployRun
    intensity: float
    seed: int

    def summary(self, th: float = DEFAULT_THRESHOLD) -> dict:
        n = self.plan.n_instances
        return {
            "instances": n,
            "predicted_misses": self.plan.misses,
            "predicted_pct": self.plan.miss_pct,
            "deployed_misses": self.without_safe.misses,
            "deployed_pct": self.without_safe.miss_pct,
            "safe_misses": self.with_safe.misses,
            "safe_pct": self.with_safe.miss_pct,
            "deployed_admissible": self.without_safe.miss_pct < th,
            "safe_admissible": self.with_safe.miss_pct < th,
            "intensity": self.intensity,
            "seed": self.seed,
        }


def replay(plan: SchedulePlan, jobs: Sequence[DagSpec], intensity: float = 0.0, seed: int = 0,
           safe_mode: bool = False, cfg: ControllerConfig | None = None,
           devices: Sequence[DeviceModel] | None = None) -> DeployRun:
    cfg = cfg or ControllerConfig()
    devices = list(devices) if devices is not None else default_devices()
    specs = {j.id: j.scaled(w) for j, w in zip(jobs, plan.request.frames)}
    release = {(o.spec_id, o.index): o.release for o in plan.outcomes}
    run = DeployRun(safe_mode, deadlines={(o.spec_id, o.index): o.deadline for o in plan.outcomes})

    dev_free = [0] * len(devices)
    task_finish: dict[tuple[int, int, int], int] = {}
    sp_state: dict[tuple[int, int], float] = {}
    for dec in plan.decisions:
        if dec.device >= len(devices) or dec.spec_id not in specs:
            raise ValueError(f"decision {dec.seq} does not fit the platform/job set")
        spec = specs[dec.spec_id]
        key = (dec.spec_id, dec.instance_index)
        first = dec.tasks[0]
        ready = release[key]
        if dec.instance_index > 1:
            ready = max(ready, run.finish[(dec.spec_id, dec.instance_index - 1)])
        for p in spec.pred[first]:
            ready = max(ready, task_finish[(*key, p)])
        start = max(ready, dev_free[dec.device])

        dev = devices[dec.device]
        sl = slack(spec, dec.deadline, start, dec.tasks)
        freq, engaged = 1.0, False
        sp = sp_state.get(key, 1.0)
        margin = cfg.margin_us(spec)
        if safe_mode and sl < margin:
            b = sum(spec.tasks[t].e for t in dec.tasks)
            sp = controller_step(sp, sl, margin, cfg.rho, b, dev.max_speedup, cfg.sign)
            sp_state[key] = sp
            freq, engaged = lookup_frequency(dev, sp), True
        speedup = dev.speedup(freq)
        base = dec.nominal / speedup
        dur = perturb_duration(base, group_rng(seed, dec.key), intensity) if intensity > 0 else base
        finish = start + max(1, int(round(dur)))

        dev_free[dec.device] = finish
        for t in dec.tasks:
            task_finish[(*key, t)] = finish
        if all((*key, t) in task_finish for t in range(len(spec.tasks))):
            run.finish[key] = max(task_finish[(*key, t)] for t in range(len(spec.tasks)))
        run.records.append({
            "seq": dec.seq, "job": dec.spec_id, "instance": dec.instance_index, "tasks": list(dec.tasks),
            "device": DEVICE_NAMES[dec.device] if dec.device < len(DEVICE_NAMES) else str(dec.device),
            "action": dec.action, "decision_ms": us_to_ms(ready), "start_ms": us_to_ms(start),
            "finish_ms": us_to_ms(finish), "frequency": freq, "sp": sp,
            "slack_ms": us_to_ms(sl), "safe": engaged, "deadline_ms": us_to_ms(dec.deadline),
        })
    for rec in run.records:
        k = (rec["job"], rec["instance"])
        rec["instance_finish_ms"] = us_to_ms(run.finish[k])
        rec["met"] = run.finish[k] <= run.deadlines[k]
    return run


def deploy(plan: SchedulePlan, jobs: Sequence[DagSpec], intensity: float = 0.3, seed: int = 0,
           cfg: ControllerConfig | None = None, devices: Sequence[DeviceModel] | None = None,
           th: float = DEFAULT_THRESHOLD, force: bool = False) -> DeployResult:
    """Paired deployment: safe mode off, then on, under the same interference draws."""
    if not force and not admit(plan, th):
        raise PlanRejected(f"plan misses {plan.miss_pct:.1f}% >= threshold {th}%")
    off = replay(plan, jobs, intensity, seed, False, cfg, devices)
    on = replay(plan, jobs, intensity, seed, True, cfg, devices)
    return DeployResult(plan, off, on, intensity, seed)
