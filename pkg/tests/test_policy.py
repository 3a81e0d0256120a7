import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cobrapp.mdp import StateVector, Transition
from cobrapp.policy import (Adam, BufferTooSmall, CorruptCheckpoint, EpsilonSchedule, QNetwork,
                            ReplayBuffer, SchemaMismatch, VersionMismatch, default_arch, forward,
                            greedy, load_checkpoint, loss_and_grads, save_checkpoint,
                            select_action, sync_target, td_targets, train_step)


def _perturbed(feature_extractor=True, seed=3):
    rng = np.random.default_rng(seed)
    net = QNetwork(default_arch(feature_extractor), seed=seed)
    for p in net.params.values():
        p += rng.normal(0.0, 0.1, p.shape)
    return net


def test_output_shape():
    net = QNetwork(seed=0)
    s = StateVector(np.random.default_rng(0).random((11, 8)), np.array([0.1, 0.5]))
    assert forward(net, s).shape == (11,)
    assert forward(net, np.zeros((7, 90))).shape == (7, 11)
    assert np.all(np.isfinite(forward(net, s)))


def test_zero_network_gives_zero_q():
    net = QNetwork(seed=0)
    for p in net.params.values():
        p[...] = 0.0
    assert np.array_equal(forward(net, np.ones(90)), np.zeros(11))


def test_non_finite_state_rejected():
    s = np.zeros(90)
    s[5] = np.nan
    with pytest.raises(ValueError):
        forward(QNetwork(seed=0), s)


@pytest.mark.parametrize("feature_extractor", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(feature_extractor, seed):
    net = _perturbed(feature_extractor, seed)
    rng = np.random.default_rng(100 + seed)
    S, A, y = rng.random((4, 90)), rng.integers(11, size=4), rng.normal(size=4)
    _, grads = loss_and_grads(net, S, A, y)
    h = 1e-5
    for name, p in net.params.items():
        for _ in range(4):
            idx = tuple(int(rng.integers(n)) for n in p.shape)
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_and_grads(net, S, A, y)
            p[idx] = old - h
            lm, _ = loss_and_grads(net, S, A, y)
            p[idx] = old
            fd, an = (lp - lm) / (2 * h), grads[name][idx]
            scale = max(abs(fd), abs(an))
            if scale > 1e-7:
                assert abs(fd - an) / scale <= 1e-4, name


def test_greedy_and_ties():
    q = np.zeros(11)
    q[7] = 1.0
    assert select_action(QNetwork(seed=0), np.zeros(90), 0.0, np.random.default_rng(0)) == greedy(
        forward(QNetwork(seed=0), np.zeros(90)))
    assert greedy(q) == 7
    assert greedy(np.zeros(11)) == 0
    assert greedy(q, allowed=[1, 2]) == 1


def test_epsilon_one_is_uniform():
    net = QNetwork(seed=0)
    rng = np.random.default_rng(42)
    draws = [select_action(net, np.zeros(90), 1.0, rng) for _ in range(11000)]
    counts = np.bincount(draws, minlength=11)
    assert stats.chisquare(counts).pvalue > 0.01


def test_epsilon_zero_does_not_touch_rng():
    rng = np.random.default_rng(5)
    before = rng.bit_generator.state
    select_action(QNetwork(seed=0), np.zeros(90), 0.0, rng)
    assert rng.bit_generator.state == before
    with pytest.raises(ValueError):
        select_action(QNetwork(seed=0), np.zeros(90), 1.5, rng)


@pytest.mark.parametrize("n, expected", [(0, 1.0), (100, 0.995 ** 100), (1000, 0.01)])
def test_epsilon_schedule(n, expected):
    sched = EpsilonSchedule()
    for _ in range(n):
        sched.step()
    assert sched.value == pytest.approx(max(0.01, 0.995 ** n), rel=1e-12)
    assert sched.value == pytest.approx(expected, rel=1e-12)


def _t(i, dim=90, terminal=False):
    return Transition(np.full(dim, float(i)), i % 11, float(i % 2), np.full(dim, i + 0.5), terminal)


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(10_000, 90)
    for i in range(10_001):
        buf.push(_t(i))
    assert len(buf) == 10_000 and buf.pushed == 10_001
    firsts = set(buf.s[:, 0].tolist())
    assert 0.0 not in firsts and 10_000.0 in firsts and 1.0 in firsts


def test_buffer_sampling():
    buf = ReplayBuffer(100, 90)
    for i in range(10):
        buf.push(_t(i))
    with pytest.raises(BufferTooSmall):
        buf.sample(32, np.random.default_rng(0))
    for i in range(10, 50):
        buf.push(_t(i))
    batch = buf.sample(32, np.random.default_rng(0))
    assert batch["s"].shape == (32, 90)
    assert len(set(batch["index"].tolist())) == 32
    assert np.all(batch["s"][:, 0] < 50)
    assert np.array_equal(batch["a"], batch["s"][:, 0].astype(int) % 11)


def test_td_targets_examples():
    net = QNetwork(seed=0)
    for p in net.params.values():
        p[...] = 0.0
    net.params["head.b3"][...] = 0.0
    net.params["head.b3"][4] = 2.0
    batch = {"r": np.array([1.0, 0.0, 1.0]), "s_next": np.zeros((3, 90)),
             "terminal": np.array([False, True, True])}
    y = td_targets(batch, net, 0.95)
    assert y == pytest.approx([2.9, 0.0, 1.0], abs=1e-12)
    assert td_targets(batch, net, 0.0) == pytest.approx(batch["r"])


def test_overfits_frozen_batch():
    net = _perturbed(seed=1)
    rng = np.random.default_rng(0)
    S, A, y = rng.random((32, 90)), rng.integers(11, size=32), rng.normal(size=32)
    opt = Adam(net.params)
    first = None
    for _ in range(200):
        loss, grads = loss_and_grads(net, S, A, y)
        first = loss if first is None else first
        opt.step(net.params, grads)
    final, _ = loss_and_grads(net, S, A, y)
    assert final <= first / 10


def test_zero_batch_leaves_zero_net():
    net = QNetwork(seed=0)
    for p in net.params.values():
        p[...] = 0.0
    loss, grads = loss_and_grads(net, np.zeros((8, 90)), np.zeros(8, dtype=int), np.zeros(8))
    assert loss == 0.0
    Adam(net.params).step(net.params, grads)
    assert all(np.all(p == 0.0) for p in net.params.values())


def test_train_step_fuzz_stays_finite():
    rng = np.random.default_rng(9)
    net = QNetwork(seed=9)
    target = net.copy()
    buf = ReplayBuffer(500, 90)
    opt = Adam(net.params)
    assert train_step(net, target, buf, opt, 0.95, 16, rng) is None
    for i in range(1000):
        buf.push(Transition(rng.random(90) * 10, int(rng.integers(11)), float(rng.integers(2)),
                            rng.random(90) * 10, bool(rng.random() < 0.05)))
        loss = train_step(net, target, buf, opt, 0.95, 16, rng)
        if loss is not None:
            assert np.isfinite(loss)
        if i % 100 == 0:
            sync_target(net, target)


def test_target_sync():
    net = _perturbed(seed=4)
    target = QNetwork(seed=99)
    init = {k: v.copy() for k, v in target.params.items()}
    assert all(np.array_equal(init[k], target.params[k]) for k in init)
    sync_target(net, target)
    S = np.random.default_rng(0).random((100, 90))
    assert np.array_equal(forward(net, S), forward(target, S))
    sync_target(net, target)
    assert np.array_equal(forward(net, S), forward(target, S))
    with pytest.raises(ValueError):
        sync_target(net, QNetwork(default_arch(False)))


def test_xavier_variance():
    for name, W in QNetwork(seed=0).params.items():
        if ".W" not in name:
            continue
        fan_in, fan_out = W.shape
        pooled = np.concatenate([QNetwork(seed=s).params[name].ravel() for s in range(10)])
        expected = 2.0 / (fan_in + fan_out)
        assert abs(pooled.var() / expected - 1.0) <= 0.2, name


@pytest.mark.parametrize("feature_extractor", [True, False])
def test_checkpoint_roundtrip(tmp_path, feature_extractor):
    net = _perturbed(feature_extractor, seed=2)
    path = tmp_path / "ck.json"
    save_checkpoint(net, {"epochs": 3}, path)
    back = load_checkpoint(path)
    S = np.random.default_rng(1).random((100, 90))
    assert np.array_equal(forward(net, S), forward(back, S))
    assert back.meta["epochs"] == 3 and back.arch == net.arch


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "ck.json"
    save_checkpoint(QNetwork(seed=0), {}, path)
    doc = json.loads(path.read_text())

    doc["feature_schema"] = "v0"
    (tmp_path / "v0.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaMismatch):
        load_checkpoint(tmp_path / "v0.json")

    doc["feature_schema"] = "v1"
    doc["version"] = 99
    (tmp_path / "ver.json").write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "ver.json")

    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "cut.json")


def test_toy_bandit_converges():
    rng = np.random.default_rng(0)
    net = QNetwork(seed=0)
    target, opt, buf = net.copy(), Adam(net.params), ReplayBuffer(10_000, 90)
    for _ in range(2000):
        a = int(rng.integers(11))
        buf.push(Transition(rng.random(90), a, float(a == 3), rng.random(90), True))
        train_step(net, target, buf, opt, 0.95, 64, rng)
    Q = forward(net, rng.random((200, 90)))
    assert np.mean(Q.argmax(axis=1) == 3) >= 0.95


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=90, max_size=90))
def test_forward_finite_on_bounded_states(values):
    assert np.all(np.isfinite(forward(QNetwork(seed=1), np.array(values))))
