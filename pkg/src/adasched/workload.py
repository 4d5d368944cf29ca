"""Synthetic benchmark suite, fused-variant WCET synthesis and request schedules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .taskgraph import DEVICE_NAMES, DagSpec, OracleRequest, TaskNode, ms_to_us, us_to_ms

FUSION_SCHEMA = "adasched.fusion/1"
SCHEDULE_SCHEMA = "adasched.requests/1"

# (name, task count, base period in ms); the two DNN chains share one base
# period and the two CNN chains another so that hyper-periods stay short.
SUITE_LAYOUT = (("G1-dnn", 5, 12), ("G2-dnn", 5, 12), ("G3-cnn", 6, 18), ("G4-cnn", 6, 18))
GPU_SPEEDUP_RANGE = (1.5, 4.0)
FLOPS_PER_CPU_MS = 1.0e6

DEFAULT_ALPHA = 0.1
DEFAULT_GAIN_FLOOR = 0.6
DEFAULT_LAUNCH_OVERHEAD_MS = (0.05, 0.2)  # cpu, gpu


class FusionError(ValueError):
    """A fusion group would cross a branch or join, or run past the chain end."""


def _split_integer(total: int, weights: np.ndarray) -> list[int]:
    # largest-remainder apportionment, so parts sum to exactly `total`
    raw = weights / weights.sum() * total
    parts = np.floor(raw).astype(int)
    short = total - int(parts.sum())
    order = np.argsort(-(raw - parts), kind="stable")
    parts[order[:short]] += 1
    return [int(p) for p in parts]


def build_benchmark_suite(seed: int = 0, layout=SUITE_LAYOUT) -> list[DagSpec]:
    """Four linear pipelines (two 5-task DNNs, two 6-task CNNs).

    CPU WCETs are random shares of the job's base period, so the summed
    max-device WCET lands exactly on it. GPU WCETs divide the CPU value by a
    per-task speedup drawn from ``GPU_SPEEDUP_RANGE``.
    """
    rng = np.random.default_rng(seed)
    jobs = []
    for k, (name, n_tasks, base_ms) in enumerate(layout):
        weights = rng.uniform(0.5, 1.5, size=n_tasks)
        cpu = _split_integer(ms_to_us(base_ms), weights)
        speedups = rng.uniform(*GPU_SPEEDUP_RANGE, size=n_tasks)
        tasks = []
        for i in range(n_tasks):
            gpu = max(1, int(round(cpu[i] / speedups[i])))
            tasks.append(TaskNode(i, (cpu[i], gpu), FLOPS_PER_CPU_MS * us_to_ms(cpu[i])))
        jobs.append(DagSpec.chain(k, tasks, name))
    return jobs


@dataclass
class FusionProfile:
    spec_id: int
    alpha: float
    gain_floor: float
    launch_overhead: tuple[int, ...]  # us per device
    table: dict[tuple[int, int, int], int] = field(default_factory=dict)  # (start, d, dev) -> us

    def fused_wcet(self, start: int, depth: int, device: int) -> int:
        try:
            return self.table[(start, depth, device)]
        except KeyError:
            raise FusionError(
                f"job {self.spec_id}: no fused variant for start={start} depth={depth} device={device}"
            ) from None

    def max_depth(self, start: int) -> int:
        d = 0
        while (start, d + 1, 0) in self.table:
            d += 1
        return d

    def variant_count(self, device: int = 0) -> int:
        """Number of multi-task fused variants on one device."""
        return sum(1 for (_, d, p) in self.table if d >= 1 and p == device)


def fused_time(member_wcets: Sequence[float], depth: int, alpha: float, gain_floor: float,
               overhead: float) -> float:
    """Closed-form cost of one fused dispatch: clamped gain on the summed work plus one launch."""
    return max(gain_floor, 1.0 - alpha * depth) * sum(member_wcets) + overhead


def synthesize_fusion_profile(
    spec: DagSpec,
    alpha: float = DEFAULT_ALPHA,
    gain_floor: float = DEFAULT_GAIN_FLOOR,
    launch_overhead: Sequence[int] | None = None,
    max_depth: int | None = None,
) -> FusionProfile:
    """Tabulate fused WCETs for every contiguous chain segment of ``spec``.

    Segments stop at branch and join points. Each entry is additionally
    held at or above the next-shallower entry, so adding a kernel to a group
    never makes it cheaper.

    ``max_depth`` asks for variants up to that depth from every start; a
    request that cannot be met without crossing a branch or join raises
    :class:`FusionError`. By default each start gets its full segment.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must be in [0, 1)")
    if not 0 < gain_floor <= 1:
        raise ValueError("gain_floor must be in (0, 1]")
    if launch_overhead is None:
        launch_overhead = tuple(ms_to_us(o) for o in DEFAULT_LAUNCH_OVERHEAD_MS)
    launch_overhead = tuple(int(o) for o in launch_overhead)
    if len(launch_overhead) != spec.n_devices:
        raise ValueError("launch_overhead needs one entry per device")
    prof = FusionProfile(spec.id, alpha, gain_floor, launch_overhead)
    n = len(spec.tasks)
    for start in range(n):
        limit = spec.segment_limit(start)
        if max_depth is not None:
            wanted = min(max_depth, n - 1 - start)
            if wanted > limit:
                raise FusionError(
                    f"job {spec.id}: depth {wanted} from task {start} crosses a branch or join"
                )
            limit = wanted
        for dev in range(spec.n_devices):
            prev = 0
            for d in range(limit + 1):
                members = [spec.tasks[start + i].wcet[dev] for i in range(d + 1)]
                cost = int(round(fused_time(members, d, alpha, gain_floor, launch_overhead[dev])))
                prev = max(prev, cost)
                prof.table[(start, d, dev)] = prev
    return prof


def base_period_ms(spec: DagSpec) -> int:
    """Summed max-device WCET rounded up to whole milliseconds."""
    return -(-spec.total_wcet // 1000)


def gray_walk(radices: Sequence[int]) -> list[tuple[int, ...]]:
    """Reflected mixed-radix Gray code: adjacent tuples differ in one digit."""
    if not radices:
        return [()]
    rest = gray_walk(radices[1:])
    out = []
    for v in range(radices[0]):
        tail = rest if v % 2 == 0 else rest[::-1]
        out.extend((v, *t) for t in tail)
    return out


def enumerate_requests(
    jobs: Sequence[DagSpec], period_multipliers: Sequence[int] = (1, 2, 3), frames: int = 1
) -> list[OracleRequest]:
    if not jobs:
        raise ValueError("no jobs")
    bases = [base_period_ms(j) for j in jobs]
    out = []
    for digits in gray_walk([len(period_multipliers)] * len(jobs)):
        periods = [period_multipliers[d] * b for d, b in zip(digits, bases)]
        out.append(OracleRequest.from_periods(periods, frames))
    return out


def is_gray_walk(requests: Sequence[OracleRequest]) -> bool:
    for a, b in itertools.pairwise(requests):
        if sum(x != y for x, y in zip(a.entries, b.entries)) != 1:
            return False
    return True


def throughput_index(request: OracleRequest, jobs: Sequence[DagSpec]) -> float:
    """Aggregate FLOPs per millisecond demanded by a request."""
    return sum(spec.flops * w / p for spec, (w, p) in zip(jobs, request.entries))


# -- file formats -----------------------------------------------------------


def fusion_profiles_to_dict(profiles: Sequence[FusionProfile]) -> dict:
    out = []
    for prof in profiles:
        rows = [
            {"start": s, "depth": d, "device": DEVICE_NAMES[p], "wcet_ms": us_to_ms(w)}
            for (s, d, p), w in sorted(prof.table.items())
        ]
        out.append({
            "job": prof.spec_id,
            "alpha": prof.alpha,
            "gain_floor": prof.gain_floor,
            "launch_overhead_ms": {DEVICE_NAMES[p]: us_to_ms(o) for p, o in enumerate(prof.launch_overhead)},
            "variants": rows,
        })
    return {"schema": FUSION_SCHEMA, "profiles": out}


def fusion_profiles_from_dict(data: dict) -> list[FusionProfile]:
    if data.get("schema") != FUSION_SCHEMA:
        raise ValueError(f"unsupported fusion-profile schema {data.get('schema')!r}")
    out = []
    for entry in data["profiles"]:
        overhead = tuple(ms_to_us(entry["launch_overhead_ms"][d]) for d in DEVICE_NAMES)
        prof = FusionProfile(int(entry["job"]), float(entry["alpha"]), float(entry["gain_floor"]), overhead)
        for row in entry["variants"]:
            key = (int(row["start"]), int(row["depth"]), DEVICE_NAMES.index(row["device"]))
            prof.table[key] = ms_to_us(row["wcet_ms"])
        out.append(prof)
    return out


def schedule_to_dict(requests: Sequence[OracleRequest], jobs: Sequence[DagSpec]) -> dict:
    rows = [
        {"id": i, "jobs": [{"w": w, "p_ms": p} for w, p in r.entries], "ti": throughput_index(r, jobs)}
        for i, r in enumerate(requests)
    ]
    return {"schema": SCHEDULE_SCHEMA, "requests": rows}


def schedule_from_dict(data: dict) -> list[OracleRequest]:
    if data.get("schema") != SCHEDULE_SCHEMA:
        raise ValueError(f"unsupported request-schedule schema {data.get('schema')!r}")
    return [
        OracleRequest(tuple((int(e["w"]), float(e["p_ms"])) for e in row["jobs"]))
        for row in data["requests"]
    ]
