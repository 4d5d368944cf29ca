import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from adasched.qlearn import (
    CheckpointError,
    IncompleteTransition,
    QNetwork,
    ReplayBuffer,
    Transition,
    huber,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    sync_target,
    td_error,
    train_step,
)


def set_params(net, W1, b1, W2, b2):
    net.W1, net.b1, net.W2, net.b2 = (np.array(x, dtype=float) for x in (W1, b1, W2, b2))
    return net


def toy_net():
    # Q(s) = [0.5 s, 0.2 s] for s >= 0
    return set_params(QNetwork(1, 1, 2), [[1.0]], [0.0], [[0.5], [0.2]], [0.0, 0.0])


def test_forward_zero_net():
    net = set_params(QNetwork(3, 4, 2), np.zeros((4, 3)), np.zeros(4), np.zeros((2, 4)), np.zeros(2))
    assert np.all(net.forward(np.ones(3)) == 0)


def test_forward_hand_evaluated():
    net = set_params(QNetwork(2, 2, 1), [[1, 2], [-1, 1]], [0.5, -1], [[2, -3]], [0.25])
    s = np.array([1.0, 0.5])
    # hidden = relu([1 + 1 + 0.5, -1 + 0.5 - 1]) = [2.5, 0]; out = 5 + 0.25
    assert net.forward(s)[0] == pytest.approx(5.25)
    assert net.forward(np.stack([s, s]))[:, 0] == pytest.approx([5.25, 5.25])


def test_forward_rejects_wrong_length():
    with pytest.raises(ValueError):
        QNetwork(10, 16, 12).forward(np.zeros(9))


def test_td_error_examples():
    net = toy_net()
    tr = Transition(np.array([1.0]), 0, np.array([0.4]), False, r=1.0)
    assert td_error(net, net, tr, "dqn") == pytest.approx(-0.7)
    assert td_error(net, net, tr, "ddqn") == pytest.approx(-0.7)
    term = Transition(np.array([1.0]), 0, np.array([0.4]), True, r=-1.0)
    assert td_error(net, net, term, "ddqn") == pytest.approx(1.5)


def test_gamma_zero_makes_modes_agree():
    net, tgt = QNetwork(4, 8, 3, seed=1), QNetwork(4, 8, 3, seed=2)
    rng = np.random.default_rng(0)
    tr = Transition(rng.random(4), 2, rng.random(4), False, r=1.0)
    assert td_error(net, tgt, tr, "dqn", 0.0) == td_error(net, tgt, tr, "ddqn", 0.0)
    assert td_error(net, tgt, tr, "dqn", 1.0) != td_error(net, tgt, tr, "ddqn", 1.0)


def test_td_error_incomplete():
    with pytest.raises(IncompleteTransition):
        td_error(toy_net(), toy_net(), Transition(np.ones(1), 0, np.ones(1)))


def test_huber_values():
    assert huber(0.5) == pytest.approx(0.125)
    assert huber(2.0) == pytest.approx(1.5)
    assert huber(-2.0) == pytest.approx(1.5)
    eps = 1e-7
    assert huber(1 - eps) == pytest.approx(0.5, abs=1e-6) and huber(1 + eps) == pytest.approx(0.5, abs=1e-6)
    slope_in = (huber(1.0) - huber(1 - eps)) / eps
    slope_out = (huber(1 + eps) - huber(1.0)) / eps
    assert slope_in == pytest.approx(1.0, abs=1e-5) and slope_out == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


def batch_targets(net, target, batch, mode, gamma):
    """Per-transition targets y = Q(s,a) - delta, taken from td_error at the current parameters."""
    S, A, R, S2, T = batch
    return np.array([
        net.forward(S[i])[A[i]] - td_error(net, target, Transition(S[i], int(A[i]), S2[i], bool(T[i]), float(R[i])),
                                           mode, gamma)
        for i in range(len(A))
    ])


def batch_loss(net, batch, y):
    S, A = batch[0], batch[1]
    q = np.array([net.forward(S[i])[A[i]] for i in range(len(A))])
    return float(np.mean(huber(q - y)))


@given(st.integers(0, 10_000), st.sampled_from(["dqn", "ddqn"]))
@settings(max_examples=30, deadline=None, derandomize=True)
def test_gradients_match_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    n_in, n_h, n_out, B = 4, 5, 3, 6
    net = QNetwork(n_in, n_h, n_out, seed=seed)
    net.b1 = rng.normal(0, 0.3, n_h)
    tgt = QNetwork(n_in, n_h, n_out, seed=seed + 1)
    batch = (rng.normal(size=(B, n_in)), rng.integers(n_out, size=B), rng.choice([-1.0, 1.0], B),
             rng.normal(size=(B, n_in)), rng.random(B) < 0.3)
    _, grads, delta = loss_and_grads(net, tgt, batch, mode, 1.0)
    # Huber is only C1 at |delta| = kappa, where central differences carry O(h) error;
    # a dead row with a terminal +-1 reward lands exactly there (covered separately below)
    assume(np.all(np.abs(np.abs(delta) - 1.0) > 1e-3))
    y = batch_targets(net, tgt, batch, mode, 1.0)  # held constant, as in the update rule
    h = 1e-6
    for name, g in grads.items():
        p = getattr(net, name)
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = batch_loss(net, batch, y)
            p[idx] = old - h
            dn = batch_loss(net, batch, y)
            p[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        err = np.abs(g - fd) / np.maximum(np.abs(g) + np.abs(fd), 1e-6)
        assert err.max() < 1e-4, (name, err.max())


def test_gradient_at_huber_kink():
    net = QNetwork(2, 3, 2, seed=0)
    net.W1[:] = 0.0
    net.b1[:] = -1.0  # every hidden unit dead, so Q(s) = b2
    net.b2[:] = 0.0
    S = np.ones((2, 2))
    batch = (S, np.array([1, 1]), np.array([1.0, -0.5]), S, np.array([True, True]))
    _, grads, delta = loss_and_grads(net, net, batch, "dqn", 1.0)
    assert delta.tolist() == [-1.0, 0.5]
    # one-sided derivatives of huber agree at the kink: -kappa; inside: delta
    assert grads["b2"].tolist() == [0.0, (-1.0 + 0.5) / 2]


def test_zero_delta_step_leaves_params():
    net = toy_net()
    buf = ReplayBuffer(4, 1)
    buf.push(Transition(np.array([1.0]), 0, np.array([1.0]), True, r=0.5))
    before = {k: v.copy() for k, v in net.params.items()}
    assert train_step(net, net.copy(), buf, 1, 0.1) == 0.0
    for k, v in net.params.items():
        assert np.array_equal(v, before[k])


def test_train_step_waits_for_full_batch():
    net = toy_net()
    buf = ReplayBuffer(8, 1)
    buf.push(Transition(np.array([1.0]), 0, np.array([1.0]), True, r=1.0))
    assert train_step(net, net.copy(), buf, 2, 0.1) is None


def test_single_transition_converges_monotonically():
    net = QNetwork(3, 6, 2, seed=3)
    net.b1[:] = 0.1
    tgt = net.copy()
    buf = ReplayBuffer(4, 3)
    tr = Transition(np.array([0.2, 0.5, 0.1]), 1, np.zeros(3), True, r=1.0)
    buf.push(tr)
    prev = abs(td_error(net, tgt, tr))
    for _ in range(2000):
        train_step(net, tgt, buf, 1, 1e-2)
        cur = abs(td_error(net, tgt, tr))
        assert cur <= prev + 1e-12
        prev = cur
    assert prev < 1e-3


def test_sync_target():
    a, b = QNetwork(10, 16, 12, seed=0), QNetwork(10, 16, 12, seed=1)
    s = np.linspace(0, 1, 10)
    assert not np.allclose(a.forward(s), b.forward(s))
    tr = Transition(s, 3, s[::-1].copy(), False, r=1.0)
    sync_target(a, b)
    assert td_error(a, b, tr, "dqn") == td_error(a, a, tr, "dqn")
    snap = {k: v.copy() for k, v in b.params.items()}
    sync_target(a, b)
    assert all(np.array_equal(snap[k], v) for k, v in b.params.items())
    with pytest.raises(ValueError):
        sync_target(a, QNetwork(10, 8, 12))


def test_monotone_transform_keeps_argmax():
    net = QNetwork(10, 16, 12, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = net.forward(rng.random(10))
        soft = np.exp(q - q.max()) / np.exp(q - q.max()).sum()
        assert np.argmax(q) == np.argmax(soft) == np.argmax(np.tanh(q))


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork(10, 16, 12, seed=9, n_devices=2, max_depth=5)
    path = tmp_path / "q.json"
    save_checkpoint(net, path, {"mode": "ddqn"})
    again = load_checkpoint(path, state_size=10, action_space=(2, 5))
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = rng.normal(size=10)
        assert np.array_equal(net.forward(s), again.forward(s))
    assert json.loads(path.read_text())["layers"] == [10, 16, 12]


def test_checkpoint_shape_and_action_errors(tmp_path):
    path = tmp_path / "q.json"
    save_checkpoint(QNetwork(8, 16, 12, n_devices=2, max_depth=5), path)
    with pytest.raises(CheckpointError, match="8 inputs"):
        load_checkpoint(path, state_size=10)
    with pytest.raises(CheckpointError, match="action space"):
        load_checkpoint(path, action_space=(3, 3))


def test_checkpoint_parse_error_has_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "adasched.qnet",\n "version": 1,,}')
    with pytest.raises(CheckpointError, match=r"bad.json:2:\d+"):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "adasched.qnet", "version": 1, "layers": [2, 2, 2],
                                "params": {"W1": [[0, 0]], "b1": [0, 0], "W2": [[0, 0], [0, 0]], "b2": [0, 0]}}))
    with pytest.raises(CheckpointError, match="params.W1"):
        load_checkpoint(path)


def test_buffer_eviction_keeps_order():
    buf = ReplayBuffer(3, 1)
    for i in range(5):
        buf.push(Transition(np.array([float(i)]), i, np.array([0.0]), False, r=1.0))
    assert len(buf) == 3
    assert [t.a for t in buf] == [2, 3, 4]
    with pytest.raises(IncompleteTransition):
        buf.push(Transition(np.zeros(1), 0, np.zeros(1)))


@given(st.integers(1, 50), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_buffer_sampling_distinct_in_bounds(n, seed):
    buf = ReplayBuffer(20, 1, seed=seed)
    for i in range(n):
        buf.push(Transition(np.zeros(1), 0, np.zeros(1), False, r=1.0))
    k = min(len(buf), 8)
    idx = buf.sample_indices(k)
    assert len(set(idx.tolist())) == k and idx.min() >= 0 and idx.max() < len(buf)


def test_params_stay_finite_long_run():
    net = QNetwork(4, 16, 2, seed=0)
    tgt = net.copy()
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(500, 4, seed=0)
    for _ in range(500):
        buf.push(Transition(rng.random(4), int(rng.integers(2)), rng.random(4), bool(rng.random() < 0.2),
                            r=float(rng.choice([-1.0, 1.0]))))
    for step in range(20_000):
        train_step(net, tgt, buf, 32, 1e-3)
        if step % 500 == 0:
            sync_target(net, tgt)
    assert net.all_finite()
    assert np.abs(net.forward(rng.random((100, 4)))).max() < 50
