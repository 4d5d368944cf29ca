"""Episode loop and training schedule for the DQN/DDQN mapping policy."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .qlearn import (
    QNetwork,
    ReplayBuffer,
    Transition,
    checkpoint_dict,
    net_from_dict,
    sync_target,
    train_step,
)
from .simenv import HyperSnapshot, advance, apply_mapping, assign_rewards, observe_state
from .taskgraph import DagSpec, OracleRequest
from .workload import FusionProfile, synthesize_fusion_profile

log = logging.getLogger(__name__)

LOG_SCHEMA = "adasched.trainlog/1"


@dataclass
class TrainConfig:
    num_steps: int = 1  # epochs
    num_runs: int = 100  # episodes per request per epoch
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5  # of all planned episodes
    batch_size: int = 64
    lr: float = 1e-3
    mode: str = "ddqn"
    gamma: float = 1.0
    target_sync: int = 500  # train steps
    buffer_capacity: int = 10_000
    hidden: int = 16
    seed: int = 0
    reward_window: int = 500
    convergence_tol: float | None = 0.01
    persist_buffer: bool = True
    intensity: float = 0.0
    exploration: str = "epsilon"  # or "softmax"
    temperature: float = 1.0

    def __post_init__(self):
        if self.num_runs < 1:
            raise ValueError("num_runs must be >= 1")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.mode not in ("dqn", "ddqn"):
            raise ValueError(f"mode must be 'dqn' or 'ddqn', got {self.mode!r}")
        if self.exploration not in ("epsilon", "softmax"):
            raise ValueError(f"unknown exploration {self.exploration!r}")

    def epsilon(self, episode: int, total: int) -> float:
        horizon = max(1, int(total * self.eps_decay_fraction))
        if episode >= horizon:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * episode / horizon


class Learner:
    """Online/target networks, replay buffer and update cadence."""

    def __init__(self, net: QNetwork, cfg: TrainConfig):
        self.cfg = cfg
        self.net = net
        self.target = net.copy()
        self.buffer = ReplayBuffer(cfg.buffer_capacity, net.sizes[0], seed=cfg.seed + 1)
        self.updates = 0
        self.pushed = 0

    def observe(self, transitions: Sequence[Transition]) -> float | None:
        for tr in transitions:
            self.buffer.push(tr)
        self.pushed += len(transitions)
        loss = train_step(self.net, self.target, self.buffer, self.cfg.batch_size, self.cfg.lr,
                          self.cfg.mode, self.cfg.gamma)
        if loss is not None:
            self.updates += 1
            if self.updates % self.cfg.target_sync == 0:
                sync_target(self.net, self.target)
        return loss


def select_action(net: QNetwork, s: np.ndarray, eps: float, rng: np.random.Generator,
                  exploration: str = "epsilon", temperature: float = 1.0) -> int:
    """Epsilon-greedy (or Boltzmann) choice; greedy ties go to the lowest index."""
    n = net.sizes[2]
    if exploration == "epsilon":
        if eps > 0 and rng.random() < eps:
            return int(rng.integers(n))
        return int(np.argmax(net.forward(s)))
    q = net.forward(s) / max(temperature, 1e-12)
    p = np.exp(q - q.max())
    return int(rng.choice(n, p=p / p.sum()))


@dataclass
class EpisodeResult:
    transitions: list[Transition]
    reward: float
    misses: int
    instances: int
    losses: list[float] = field(default_factory=list)


def run_episode(env: HyperSnapshot, net: QNetwork, eps: float, rng: np.random.Generator,
                learner: Learner | None = None, exploration: str = "epsilon",
                temperature: float = 1.0) -> EpisodeResult:
    """Drive one hyper-period to completion with an epsilon-greedy policy.

    Transitions stay pending until their instance finishes; then they get
    the instance's reward and, with a ``learner``, go to the replay buffer
    followed by one training step.
    """
    pending: dict[tuple[int, int], list[Transition]] = {}
    transitions: list[Transition] = []
    losses: list[float] = []
    rewards: list[float] = []
    seen_finished = 0
    s_cached = None
    while not env.done:
        fr = env.frontier()
        if fr:
            entry = fr[0]
            s = s_cached if s_cached is not None else observe_state(env)
            a = select_action(net, s, eps, rng, exploration, temperature)
            apply_mapping(env, entry, a)
            s2 = observe_state(env)
            tr = Transition(s, a, s2, terminal=env.all_dispatched)
            pending.setdefault(entry.instance.key, []).append(tr)
            transitions.append(tr)
            s_cached = s2
            continue
        advance(env)
        s_cached = None
        while seen_finished < len(env.finished):
            inst = env.finished[seen_finished]
            seen_finished += 1
            done_trs = assign_rewards(inst, pending.pop(inst.key, []))
            rewards.append(1.0 if inst.finish_time <= inst.deadline else -1.0)
            if learner is not None:
                loss = learner.observe(done_trs)
                if loss is not None:
                    losses.append(loss)
    misses = sum(r < 0 for r in rewards)
    return EpisodeResult(transitions, float(np.mean(rewards)), int(misses), len(rewards), losses)


class Trainer:
    """Epoch-by-epoch training over a request schedule; resumable."""

    def __init__(self, jobs: Sequence[DagSpec], requests: Sequence[OracleRequest], cfg: TrainConfig,
                 profiles: dict[int, FusionProfile] | None = None, devices=None,
                 max_depth: int | None = None):
        self.jobs = list(jobs)
        self.requests = list(requests)
        self.cfg = cfg
        self.profiles = profiles or {j.id: synthesize_fusion_profile(j) for j in self.jobs}
        self.devices = devices
        probe = HyperSnapshot(self.jobs, self.requests[0], self.profiles, devices, max_depth) if self.requests else None
        self.max_depth = probe.max_depth if probe else (max_depth or max(j.depth for j in self.jobs))
        n_devices = probe.n_devices if probe else 2
        state_size = n_devices + 2 * len(self.jobs)
        n_actions = n_devices * (self.max_depth + 1)
        net = QNetwork(state_size, cfg.hidden, n_actions, seed=cfg.seed, n_devices=n_devices,
                       max_depth=self.max_depth)
        self.learner = Learner(net, cfg)
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.epoch = 0
        self.episode = 0
        self.log: list[dict] = []
        self._window: deque[float] = deque(maxlen=cfg.reward_window)
        self.epoch_averages: list[float] = []

    @property
    def net(self) -> QNetwork:
        return self.learner.net

    @property
    def planned_episodes(self) -> int:
        return self.cfg.num_steps * len(self.requests) * self.cfg.num_runs

    def make_env(self, request: OracleRequest, episode: int) -> HyperSnapshot:
        return HyperSnapshot(self.jobs, request, self.profiles, self.devices, self.max_depth,
                             intensity=self.cfg.intensity, seed=self.cfg.seed * 1_000_003 + episode)

    def run_epoch(self) -> list[dict]:
        cfg, records = self.cfg, []
        for ri, req in enumerate(self.requests):
            for run in range(cfg.num_runs):
                eps = cfg.epsilon(self.episode, self.planned_episodes)
                res = run_episode(self.make_env(req, self.episode), self.net, eps, self.rng, self.learner,
                                  cfg.exploration, cfg.temperature)
                self._window.append(res.reward)
                rec = {
                    "epoch": self.epoch,
                    "request": ri,
                    "run": run,
                    "episode": self.episode,
                    "reward": res.reward,
                    "misses": res.misses,
                    "instances": res.instances,
                    "decisions": len(res.transitions),
                    "loss": float(np.mean(res.losses)) if res.losses else None,
                    "epsilon": eps,
                    "moving_avg": float(np.mean(self._window)),
                }
                records.append(rec)
                self.episode += 1
        self.log.extend(records)
        self.epoch_averages.append(records[-1]["moving_avg"] if records else 0.0)
        self.epoch += 1
        log.info("epoch %d done: moving average reward %.4f", self.epoch, self.epoch_averages[-1])
        return records

    def converged(self) -> bool:
        tol = self.cfg.convergence_tol
        if tol is None or len(self.epoch_averages) < 2:
            return False
        return abs(self.epoch_averages[-1] - self.epoch_averages[-2]) < tol

    def fit(self, on_epoch: Callable[["Trainer"], None] | None = None) -> tuple[QNetwork, list[dict]]:
        if not self.requests:
            return self.net, self.log
        if not self.cfg.persist_buffer:
            self.learner.buffer = ReplayBuffer(self.cfg.buffer_capacity, self.net.sizes[0], seed=self.cfg.seed + 1)
        while self.epoch < self.cfg.num_steps:
            self.run_epoch()
            if on_epoch is not None:
                on_epoch(self)
            if self.converged():
                log.info("converged after %d epochs", self.epoch)
                break
        return self.net, self.log

    # -- persistence ----------------------------------------------------------

    def save_state(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        state = {
            "schema": "adasched.trainstate/1",
            "config": asdict(self.cfg),
            "epoch": self.epoch,
            "episode": self.episode,
            "updates": self.learner.updates,
            "pushed": self.learner.pushed,
            "epoch_averages": self.epoch_averages,
            "window": list(self._window),
            "rng": self.rng.bit_generator.state,
            "net": checkpoint_dict(self.net),
            "target": checkpoint_dict(self.learner.target),
        }
        (d / "trainer_state.json").write_text(json.dumps(state, sort_keys=True) + "\n")
        buf = self.learner.buffer.state_dict()
        rng_state = json.dumps(buf.pop("rng"))
        np.savez(d / "replay.npz", rng=np.array(rng_state), **buf)

    def load_state(self, directory: str | Path) -> None:
        d = Path(directory)
        state = json.loads((d / "trainer_state.json").read_text())
        self.epoch, self.episode = state["epoch"], state["episode"]
        self.learner.updates, self.learner.pushed = state["updates"], state["pushed"]
        self.epoch_averages = list(state["epoch_averages"])
        self._window = deque(state["window"], maxlen=self.cfg.reward_window)
        self.rng.bit_generator.state = state["rng"]
        self.learner.net = net_from_dict(state["net"])
        self.learner.target = net_from_dict(state["target"])
        with np.load(d / "replay.npz") as z:
            buf = {k: z[k] for k in ("S", "A", "R", "S2", "T")}
            buf["rng"] = json.loads(str(z["rng"]))
        self.learner.buffer.load_state_dict(buf)


def train(jobs: Sequence[DagSpec], requests: Sequence[OracleRequest], cfg: TrainConfig,
          profiles: dict[int, FusionProfile] | None = None, devices=None,
          on_epoch: Callable[[Trainer], None] | None = None) -> tuple[QNetwork, list[dict]]:
    """Train a Q-network over ``requests`` (in the given order) for ``cfg.num_steps`` epochs."""
    return Trainer(jobs, requests, cfg, profiles, devices).fit(on_epoch)


def write_log(path: str | Path, records: Sequence[dict], meta: dict | None = None) -> None:
    lines = [json.dumps({"schema": LOG_SCHEMA, **(meta or {})}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")
