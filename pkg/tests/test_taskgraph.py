import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasched.taskgraph import (
    DagInstance,
    DagSpec,
    HyperPeriodError,
    OracleRequest,
    TaskNode,
    TaskState,
    blevel,
    expand_hyperperiod,
    frontier_of,
    jobset_from_dict,
    jobset_to_dict,
    local_deadline,
)
from oracles import brute_blevel, lcm_all, random_dag


def chain(es, id=0):
    return DagSpec.chain(id, [TaskNode(i, (e, e)) for i, e in enumerate(es)])


def diamond():
    tasks = [TaskNode(0, (1, 1)), TaskNode(1, (2, 1)), TaskNode(2, (5, 3)), TaskNode(3, (1, 1))]
    return DagSpec(0, tuple(tasks), frozenset({(0, 1), (0, 2), (1, 3), (2, 3)}))


def test_blevel_chain_and_leaf():
    spec = chain([4, 2, 3])
    assert blevel(spec, 0) == 9
    assert blevel(spec, 2) == 3


def test_blevel_diamond_matches_path_enumeration():
    spec = diamond()
    e = [t.e for t in spec.tasks]
    assert blevel(spec, 0) == brute_blevel(e, set(spec.edges), 0) == 7


def test_blevel_uses_max_device_wcet():
    spec = DagSpec.chain(0, [TaskNode(0, (4, 1)), TaskNode(1, (1, 6))])
    assert blevel(spec, 0) == 10


def test_blevel_unknown_task():
    with pytest.raises(ValueError):
        blevel(chain([1, 2]), 5)


def test_local_deadline_examples():
    inst = DagInstance(chain([4, 2, 3]), 1, 0, 12)
    assert local_deadline(inst, 0) == 7
    assert local_deadline(inst, 2) == 12
    assert local_deadline(DagInstance(diamond(), 1, 0, 20), 0) == 14


def test_random_dags_match_oracle():
    rng = random.Random(7)
    for _ in range(100):
        n, edges, cpu, gpu = random_dag(rng)
        spec = DagSpec(0, tuple(TaskNode(i, (cpu[i], gpu[i])) for i in range(n)), frozenset(edges))
        e = [max(c, g) for c, g in zip(cpu, gpu)]
        for t in range(n):
            assert blevel(spec, t) == brute_blevel(e, edges, t)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_local_deadline_bounded_by_instance_deadline(seed):
    n, edges, cpu, gpu = random_dag(random.Random(seed))
    spec = DagSpec(0, tuple(TaskNode(i, (cpu[i], gpu[i])) for i in range(n)), frozenset(edges))
    inst = DagInstance(spec, 1, 0, 1000)
    for t in range(n):
        ld = local_deadline(inst, t)
        assert ld <= inst.deadline
        assert (ld == inst.deadline) == (blevel(spec, t) == spec.tasks[t].e)


def test_spec_validation():
    with pytest.raises(ValueError):
        DagSpec(0, (TaskNode(0, (1, 1)), TaskNode(1, (1, 1))), frozenset({(1, 0)}))
    with pytest.raises(ValueError):
        TaskNode(0, (0, 1))
    assert chain([1, 1, 1, 1, 1]).depth == 4
    assert diamond().depth == 2


@pytest.mark.parametrize(
    "periods, H, counts",
    [((12, 8), 24, [2, 3]), ((10, 10), 10, [1, 1]), ((6, 12, 18, 6), 36, [6, 3, 2, 6])],
)
def test_expand_hyperperiod(periods, H, counts):
    jobs = [chain([1], id=k) for k in range(len(periods))]
    H_us, insts = expand_hyperperiod(jobs, OracleRequest.from_periods(periods))
    assert H_us == H * 1000 == lcm_all([p * 1000 for p in periods])
    assert [sum(i.spec_id == k for i in insts) for k in range(len(periods))] == counts
    for k, p in enumerate(periods):
        mine = [i for i in insts if i.spec_id == k]
        assert [i.release for i in mine] == [(j - 1) * p * 1000 for j in range(1, len(mine) + 1)]
        assert mine[-1].deadline == H_us


@given(st.lists(st.integers(1, 40), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_expand_counts_property(periods):
    jobs = [chain([1], id=k) for k in range(len(periods))]
    H, insts = expand_hyperperiod(jobs, OracleRequest.from_periods(periods))
    assert len(insts) == sum(H // (p * 1000) for p in periods)


def test_expand_scales_frames():
    jobs = [chain([2, 3])]
    _, insts = expand_hyperperiod(jobs, OracleRequest(((2, 10),)))
    assert [t.wcet for t in insts[0].spec.tasks] == [(4, 4), (6, 6)]


def test_expand_overflow():
    jobs = [chain([1], id=k) for k in range(3)]
    with pytest.raises(HyperPeriodError):
        expand_hyperperiod(jobs, OracleRequest.from_periods([7919, 7907, 7901]), max_hyperperiod=10**9)


def test_fig2_initial_frontier():
    jobs = [chain([2, 2, 2], id=0), chain([3, 3], id=1)]
    _, insts = expand_hyperperiod(jobs, OracleRequest.from_periods([8, 12]))
    fr = frontier_of(insts, 0)
    assert [(e.spec_id, e.instance_index, e.task_id) for e in fr] == [(0, 1, 0), (1, 1, 0)]


def test_frontier_empty_when_all_finished():
    jobs = [chain([1, 1])]
    _, insts = expand_hyperperiod(jobs, OracleRequest.from_periods([5]))
    insts[0].finish_tasks([0, 1], 2)
    assert frontier_of(insts, 10) == []


def test_frontier_blocks_next_instance_until_previous_finishes():
    jobs = [chain([4000, 4000]), chain([1000], id=1)]
    _, insts = expand_hyperperiod(jobs, OracleRequest.from_periods([5, 10]))
    first, second = insts[0], insts[1]
    assert second.index == 2 and second.release == 5000
    first.states[0] = TaskState.DISPATCHED
    keys = {(e.spec_id, e.instance_index) for e in frontier_of(insts, 5000)}
    assert (0, 2) not in keys
    first.finish_tasks([0, 1], 6000)
    keys = {(e.spec_id, e.instance_index) for e in frontier_of(insts, 6000)}
    assert (0, 2) in keys


def test_frontier_tie_break_is_lexicographic():
    jobs = [chain([2], id=0), chain([2], id=1)]
    _, insts = expand_hyperperiod(jobs, OracleRequest.from_periods([10, 10]))
    fr = frontier_of(list(reversed(insts)), 0)
    assert [e.spec_id for e in fr] == [0, 1]


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_frontier_has_no_ancestor_pairs(seed):
    rng = random.Random(seed)
    n, edges, cpu, gpu = random_dag(rng)
    spec = DagSpec(0, tuple(TaskNode(i, (cpu[i], gpu[i])) for i in range(n)), frozenset(edges))
    inst = DagInstance(spec, 1, 0, 10**6)
    # finish a random prefix-closed set of tasks
    for t in range(n):
        if inst.states[t] == TaskState.READY and rng.random() < 0.5:
            inst.finish_tasks([t], 0)
    fr = frontier_of([inst], 0)
    ids = [e.task_id for e in fr]
    for a in ids:
        for b in ids:
            assert b not in spec.descendants[a]


def test_jobset_round_trip():
    jobs = [chain([1500, 2250], id=0), diamond()]
    jobs[1] = DagSpec(1, jobs[1].tasks, jobs[1].edges, "d")
    again = jobset_from_dict(jobset_to_dict(jobs))
    assert [j.tasks for j in again] == [j.tasks for j in jobs]
    assert [j.edges for j in again] == [j.edges for j in jobs]
