"""Small ReLU Q-network with hand-written backprop, replay buffer and TD updates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "adasched.qnet"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class IncompleteTransition(RuntimeError):
    pass


class QNetwork:
    """Two-layer perceptron: input -> ReLU hidden -> linear Q-values."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, seed: int = 0,
                 n_devices: int | None = None, max_depth: int | None = None):
        self.sizes = (n_in, n_hidden, n_out)
        self.seed = seed
        self.n_devices = n_devices
        self.max_depth = max_depth
        if n_devices is not None and max_depth is not None and n_devices * (max_depth + 1) != n_out:
            raise ValueError(f"output size {n_out} != n_devices*(max_depth+1)")
        rng = np.random.default_rng(seed)
        lim1 = np.sqrt(6.0 / (n_in + n_hidden))
        lim2 = np.sqrt(6.0 / (n_hidden + n_out))
        self.W1 = rng.uniform(-lim1, lim1, size=(n_hidden, n_in))
        self.b1 = np.zeros(n_hidden)
        self.W2 = rng.uniform(-lim2, lim2, size=(n_out, n_hidden))
        self.b2 = np.zeros(n_out)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def forward(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.sizes[0]:
            raise ValueError(f"state has length {s.shape[-1]}, network expects {self.sizes[0]}")
        h = self.W1 @ s.T if s.ndim > 1 else self.W1 @ s
        if s.ndim > 1:
            h = np.maximum(h + self.b1[:, None], 0.0)
            return (self.W2 @ h).T + self.b2
        h = np.maximum(h + self.b1, 0.0)
        return self.W2 @ h + self.b2

    __call__ = forward

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.sizes, other.seed = self.sizes, self.seed
        other.n_devices, other.max_depth = self.n_devices, self.max_depth
        for name in PARAM_NAMES:
            setattr(other, name, getattr(self, name).copy())
        return other

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())


def forward(net: QNetwork, s: np.ndarray) -> np.ndarray:
    return net.forward(s)


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    if net.sizes != target_net.sizes:
        raise ValueError(f"architecture mismatch: {net.sizes} vs {target_net.sizes}")
    for name in PARAM_NAMES:
        getattr(target_net, name)[...] = getattr(net, name)


def huber(delta, kappa: float = 1.0):
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    a = np.abs(delta)
    return np.where(a <= kappa, 0.5 * a * a, kappa * (a - 0.5 * kappa))


def huber_grad(delta, kappa: float = 1.0):
    return np.clip(delta, -kappa, kappa)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    s_next: np.ndarray
    terminal: bool = False
    r: float | None = None

    @property
    def complete(self) -> bool:
        return self.r is not None


def _targets(net, target_net, r, s2, terminal, mode, gamma):
    single = np.ndim(s2) == 1
    s2 = np.atleast_2d(s2)
    q_next = target_net.forward(s2)
    if mode == "dqn":
        boot = q_next.max(axis=1)
    elif mode == "ddqn":
        pick = np.argmax(net.forward(s2), axis=1)
        boot = q_next[np.arange(len(pick)), pick]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = r + gamma * np.where(terminal, 0.0, boot)
    return y[0] if single else y


def td_error(net: QNetwork, target_net: QNetwork, tr: Transition, mode: str = "ddqn",
             gamma: float = 1.0) -> float:
    """``Q(s,a) - (r + gamma * bootstrap(s'))``; terminal transitions drop the bootstrap."""
    if not tr.complete:
        raise IncompleteTransition("transition has no reward yet")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    y = _targets(net, target_net, tr.r, tr.s_next, tr.terminal, mode, gamma)
    return float(net.forward(tr.s)[tr.a] - y)


def loss_and_grads(net: QNetwork, target_net: QNetwork, batch, mode: str = "ddqn",
                   gamma: float = 1.0, kappa: float = 1.0):
    """Mean Huber loss over a batch and its gradient w.r.t. the online parameters.

    ``batch`` is ``(S, A, R, S2, T)``. The bootstrap target is held constant,
    so gradients flow only through ``Q(s, a)`` of the taken actions.
    """
    S, A, R, S2, T = batch
    B = len(A)
    y = _targets(net, target_net, R, S2, T, mode, gamma)
    pre = S @ net.W1.T + net.b1
    hid = np.maximum(pre, 0.0)
    Q = hid @ net.W2.T + net.b2
    rows = np.arange(B)
    delta = Q[rows, A] - y
    loss = float(huber(delta, kappa).mean())

    dQ = np.zeros_like(Q)
    dQ[rows, A] = huber_grad(delta, kappa) / B
    dhid = dQ @ net.W2
    dpre = dhid * (pre > 0)
    grads = {
        "W2": dQ.T @ hid,
        "b2": dQ.sum(axis=0),
        "W1": dpre.T @ S,
        "b1": dpre.sum(axis=0),
    }
    return loss, grads, delta


class ReplayBuffer:
    """Fixed-capacity ring of complete transitions."""

    def __init__(self, capacity: int, state_size: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.S = np.zeros((capacity, state_size))
        self.S2 = np.zeros((capacity, state_size))
        self.A = np.zeros(capacity, dtype=np.int64)
        self.R = np.zeros(capacity)
        self.T = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition) -> None:
        if not tr.complete:
            raise IncompleteTransition("only complete transitions enter the replay buffer")
        i = self._next
        self.S[i], self.A[i], self.R[i], self.S2[i], self.T[i] = tr.s, tr.a, tr.r, tr.s_next, tr.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def __iter__(self):
        """Surviving transitions, oldest first."""
        for i in self._order():
            yield Transition(self.S[i].copy(), int(self.A[i]), self.S2[i].copy(), bool(self.T[i]), float(self.R[i]))

    def sample_indices(self, batch_size: int) -> np.ndarray:
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int):
        idx = self.sample_indices(batch_size)
        return self.S[idx], self.A[idx], self.R[idx], self.S2[idx], self.T[idx]

    def state_dict(self) -> dict:
        order = self._order()
        return {
            "capacity": self.capacity,
            "S": self.S[order], "A": self.A[order], "R": self.R[order],
            "S2": self.S2[order], "T": self.T[order],
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, d: dict) -> None:
        n = len(d["A"])
        self.S[:n], self.A[:n], self.R[:n], self.S2[:n], self.T[:n] = d["S"], d["A"], d["R"], d["S2"], d["T"]
        self.size, self._next = n, n % self.capacity
        self.rng.bit_generator.state = d["rng"]


def train_step(net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, batch_size: int,
               lr: float, mode: str = "ddqn", gamma: float = 1.0, kappa: float = 1.0) -> float | None:
    """One mini-batch gradient-descent step; returns the pre-update mean loss.

    Returns ``None`` (and leaves the network untouched) while the buffer
    holds fewer than ``batch_size`` transitions.
    """
    if len(buffer) < batch_size:
        return None
    loss, grads, _ = loss_and_grads(net, target_net, buffer.sample(batch_size), mode, gamma, kappa)
    for name, g in grads.items():
        getattr(net, name)[...] -= lr * g
    if not net.all_finite():
        raise FloatingPointError("non-finite network parameters after update")
    return loss


# -- checkpoints ------------------------------------------------------------


def checkpoint_dict(net: QNetwork, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": list(net.sizes),
        "activation": "relu",
        "output": "linear",
        "n_devices": net.n_devices,
        "max_depth": net.max_depth,
        "seed": net.seed,
        "meta": meta or {},
        "params": {name: getattr(net, name).tolist() for name in PARAM_NAMES},
    }


def save_checkpoint(net: QNetwork, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(net, meta), indent=1) + "\n")


def net_from_dict(data: dict, where: str = "<checkpoint>") -> QNetwork:
    def need(key):
        if key not in data:
            raise CheckpointError(f"{where}: missing key {key!r}")
        return data[key]

    if need("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{where}: format is {data['format']!r}, expected {CHECKPOINT_FORMAT!r}")
    if need("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{where}: unsupported version {data['version']!r}")
    sizes = need("layers")
    if not (isinstance(sizes, list) and len(sizes) == 3 and all(isinstance(x, int) and x > 0 for x in sizes)):
        raise CheckpointError(f"{where}: 'layers' must be three positive integers, got {sizes!r}")
    n_in, n_hid, n_out = sizes
    net = QNetwork.__new__(QNetwork)
    net.sizes = (n_in, n_hid, n_out)
    net.seed = data.get("seed", 0)
    net.n_devices, net.max_depth = data.get("n_devices"), data.get("max_depth")
    if net.n_devices is not None and net.max_depth is not None and net.n_devices * (net.max_depth + 1) != n_out:
        raise CheckpointError(
            f"{where}: action metadata n_devices={net.n_devices}, max_depth={net.max_depth} "
            f"does not match output size {n_out}"
        )
    params = need("params")
    shapes = {"W1": (n_hid, n_in), "b1": (n_hid,), "W2": (n_out, n_hid), "b2": (n_out,)}
    for name, shape in shapes.items():
        if name not in params:
            raise CheckpointError(f"{where}: missing key 'params.{name}'")
        try:
            arr = np.array(params[name], dtype=float)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{where}: params.{name}: {exc}") from None
        if arr.shape != shape:
            raise CheckpointError(f"{where}: params.{name} has shape {arr.shape}, expected {shape}")
        setattr(net, name, arr)
    return net


def load_checkpoint(path: str | Path, state_size: int | None = None,
                    action_space: tuple[int, int] | None = None) -> QNetwork:
    """Load a checkpoint, optionally validating it against a platform.

    ``action_space`` is ``(n_devices, max_depth)``.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}:1:1: top level must be an object")
    net = net_from_dict(data, str(path))
    if state_size is not None and net.sizes[0] != state_size:
        raise CheckpointError(f"{path}: checkpoint expects {net.sizes[0]} inputs, platform provides {state_size}")
    if action_space is not None:
        n, D = action_space
        if (net.n_devices, net.max_depth) not in ((n, D), (None, None)) or net.sizes[2] != n * (D + 1):
            raise CheckpointError(
                f"{path}: checkpoint action space (n={net.n_devices}, D={net.max_depth}) "
                f"incompatible with platform (n={n}, D={D})"
            )
    return net
