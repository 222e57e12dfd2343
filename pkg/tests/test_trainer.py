import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import unit_rows
from crossview import numcore as nc
from crossview.align import initial_checkpoint
from crossview.errors import ContractError, DimensionError, ParameterError, TrainingError
from crossview.gradsuite import run_suite
from crossview.store import load_checkpoint, synth_dataset
from crossview.trainer import (
    KeyQueue,
    OptimizerState,
    TrainConfig,
    adamw_step,
    batch_loss,
    epoch_means,
    info_nce,
    lr_at_epoch,
    queue_update,
    train,
)

# info_nce


@pytest.mark.parametrize("form", ["moco", "ground_anchor"])
def test_info_nce_equal_similarities_is_ln2(form):
    s = np.array([[1.0, 0.0], [1.0, 0.0]])
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert abs(info_nce(s, g, tau=0.07, form=form) - math.log(2)) <= 1e-12
    # equal but non-trivial similarity: orthogonal everything
    s = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    g = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    assert abs(info_nce(s, g, tau=0.5, form=form) - math.log(2)) <= 1e-12


def test_info_nce_one_extra_key():
    s = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.0]])
    extra = np.array([[0.0, 1.0]])
    loss = info_nce(s, g, extra, tau=1.0)
    assert abs(loss - math.log(1 + math.exp(-1))) <= 1e-9
    assert abs(loss - 0.313262) <= 1e-6


def test_info_nce_all_equal_is_log_key_count():
    s = np.array([[1.0, 0.0, 0.0]] * 3)
    g = np.array([[0.0, 1.0, 0.0]] * 3)
    extra = np.array([[0.0, 0.0, 1.0]] * 5)
    assert abs(info_nce(s, g, extra, tau=0.2) - math.log(8)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4), st.floats(0.05, 2.0))
def test_info_nce_matches_direct_and_extra_keys_never_help(seed, m, tau):
    r = np.random.default_rng(seed)
    s, g = unit_rows(r.standard_normal((3, 5))), unit_rows(r.standard_normal((3, 5)))
    extra = unit_rows(r.standard_normal((m, 5)))
    loss = info_nce(s, g, extra, tau)
    assert loss >= 0
    direct = oracles.info_nce_direct(s.tolist(), g.tolist(), extra.tolist(), tau)
    assert abs(loss - direct) <= 1e-12 * max(1.0, abs(direct))
    more = np.concatenate([extra, unit_rows(r.standard_normal((1, 5)))])
    assert info_nce(s, g, more, tau) >= loss
    assert info_nce(s, g, extra, tau, form="ground_anchor") == info_nce(s, g, None, tau, form="ground_anchor")


def test_info_nce_decreases_as_positive_aligns():
    other = np.array([[0.0, 1.0, 0.0]])
    s = np.array([[1.0, 0.0, 0.0]])
    losses = []
    for angle in np.linspace(np.pi / 2, 0, 7):
        g = np.array([[np.cos(angle), 0.0, np.sin(angle)]])
        losses.append(info_nce(s, g, other, tau=0.3))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_info_nce_no_overflow_at_extreme_logits():
    # |sim/tau| up to 700 with unit rows: tau = 1/700
    s = np.array([[1.0, 0.0], [-1.0, 0.0]])
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    extra = np.array([[-1.0, 0.0]])
    with np.errstate(over="raise"):
        loss = info_nce(s, g, extra, tau=1 / 700)
    assert np.isfinite(loss)
    # row 1: positive logit -700, best key +700 -> loss ~ 1400 / 2 plus ln 2 / 2 terms
    assert abs(loss - (0.5 * math.log(1 + 2 * math.exp(-1400)) + 0.5 * (1400 + math.log(2 + math.exp(-1400))))) <= 1e-9


def test_info_nce_errors():
    u = np.array([[1.0, 0.0]])
    with pytest.raises(ParameterError):
        info_nce(u, u, tau=0.0)
    with pytest.raises(ContractError):
        info_nce(np.array([[2.0, 0.0]]), u)
    with pytest.raises(DimensionError):
        info_nce(u, np.array([[1.0, 0.0, 0.0]]))


# queue


def test_queue_partial_fill():
    q = KeyQueue(8, 3)
    rows = unit_rows(np.random.default_rng(0).standard_normal((4, 3)))
    queue_update(q, rows)
    assert len(q) == 4
    np.testing.assert_array_equal(q.keys(), rows)


def test_queue_evicts_oldest():
    r = np.random.default_rng(1)
    batches = [unit_rows(r.standard_normal((4, 3))) for _ in range(3)]
    q = KeyQueue(8, 3)
    for b in batches:
        queue_update(q, b)
    assert len(q) == 8
    np.testing.assert_array_equal(q.keys(), np.concatenate(batches[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 3))
def test_queue_holds_last_q_in_push_order(k, b, extra):
    r = np.random.default_rng(k * 10 + b)
    capacity = k * b
    pushed = [unit_rows(r.standard_normal((b, 4))) for _ in range(k + extra)]
    q = KeyQueue(capacity, 4)
    for batch in pushed:
        q.push(batch)
        assert len(q) <= capacity
    np.testing.assert_array_equal(q.keys(), np.concatenate(pushed)[-capacity:])


def test_queue_rejects_non_unit_and_zero_capacity_stays_empty():
    q = KeyQueue(4, 2)
    with pytest.raises(ContractError):
        q.push(np.array([[3.0, 4.0]]))
    z = KeyQueue(0, 2)
    z.push(np.array([[1.0, 0.0]]))
    assert len(z) == 0 and z.keys().shape == (0, 2)


def _digest(rows):
    return hashlib.sha256(np.ascontiguousarray(rows).tobytes()).hexdigest()


def test_queue_entries_are_never_recomputed():
    """Run real training steps and checksum every enqueued row while it stays resident."""
    ds, _, _ = synth_dataset(classes=4, per_class=8, dim=8, noise=0.2, seed=3)
    cfg = TrainConfig(batch_size=4, queue_capacity=12, pool="att", lr=1e-2).validate()
    params = {k: v.copy() for k, v in initial_checkpoint(8, seed=0, pool_mode="att").params.items()}
    quads, sat = ds.quads(), ds.sat_features()
    q = KeyQueue(cfg.queue_capacity, 8)
    state = OptimizerState()
    history = []  # (push index, digest) per row
    for step in range(8):
        idx = np.arange(step * 4, step * 4 + 4)
        tape = nc.GradTape()
        vs = {k: nc.Var(v, requires_grad=True) for k, v in params.items()}
        loss, pooled = batch_loss(vs, quads[idx], sat[idx], q.keys(), cfg, [0, 0, step], tape=tape)
        tape.backward(loss)
        adamw_step(params, {k: vs[k].grad for k in params}, state, cfg.lr, cfg.weight_decay)
        q.push(pooled.value)
        history.extend(_digest(row) for row in pooled.value)
        resident = history[-len(q):]
        assert [_digest(row) for row in q.keys()] == resident
        assert not q.keys().flags.writeable or all(not r.flags.writeable for r in q._rows)


# optimizer and schedule


def test_adamw_decay_only_step():
    p = {"p": np.array([1.0])}
    adamw_step(p, {"p": np.array([0.0])}, OptimizerState(), lr=1e-3, weight_decay=0.01)
    assert abs(p["p"][0] - 0.99999) <= 1e-15


def test_adamw_first_step_moves_by_lr():
    p = {"p": np.array([2.0, -1.0])}
    adamw_step(p, {"p": np.array([1.0, 1.0])}, OptimizerState(), lr=1e-3, weight_decay=0.0)
    np.testing.assert_allclose(p["p"], [2.0 - 1e-3, -1.0 - 1e-3], atol=1e-12)


def test_adamw_matches_scalar_oracle():
    r = np.random.default_rng(2)
    grads = r.standard_normal(5).tolist()
    p = {"p": np.array([0.7])}
    state = OptimizerState()
    got = []
    for g in grads:
        adamw_step(p, {"p": np.array([g])}, state, lr=0.01, weight_decay=0.05)
        got.append(float(p["p"][0]))
    np.testing.assert_allclose(got, oracles.adamw_scalar(0.7, grads, 0.01, 0.05), rtol=0, atol=1e-12)


def test_adamw_shape_mismatch():
    with pytest.raises(DimensionError):
        adamw_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, OptimizerState(), 1e-3, 0.0)


def test_step_schedule():
    cfg = TrainConfig(lr=1e-4)
    assert lr_at_epoch(cfg, 0) == 1e-4
    assert lr_at_epoch(cfg, 4) == 1e-4
    assert abs(lr_at_epoch(cfg, 12) - 9.025e-5) <= 1e-18
    with pytest.raises(ParameterError):
        lr_at_epoch(cfg, -1)


def test_config_validation():
    for bad in ({"tau": 0}, {"batch_size": 1}, {"queue_capacity": 33}, {"pool": "max"}, {"loss_form": "x"}):
        with pytest.raises(ParameterError):
            TrainConfig(**bad).validate()
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


# training loop


@pytest.mark.parametrize("capacity", [0, 64, 128])
def test_training_reduces_loss(synth7, capacity):
    ds = synth7[0]
    _, log = train(ds, TrainConfig(queue_capacity=capacity))
    means = epoch_means(log)
    assert len(means) == 20
    assert means[-1] < means[0]


def test_training_logs_one_record_per_full_batch(trained):
    _, log = trained["avg"]
    assert len(log) == 20 * (500 // 32)
    assert {k for rec in log for k in rec} == {"epoch", "batch", "loss", "lr"}


def test_training_is_deterministic(tmp_path):
    ds, _, _ = synth_dataset(classes=4, per_class=16, dim=8, noise=0.2, seed=5)
    cfg = TrainConfig(epochs=3, batch_size=8, queue_capacity=16, pool="att")
    train(ds, cfg, tmp_path / "a", tmp_path / "a.jsonl")
    train(ds, cfg, tmp_path / "b", tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ck = load_checkpoint(tmp_path / "a")
    assert ck.epoch == 3 and ck.pool_mode == "att" and ck.opt_step == 3 * 8


def test_zero_epochs_returns_initial_params(tmp_path):
    ds, _, _ = synth_dataset(classes=2, per_class=4, dim=6, noise=0.1, seed=0)
    ck, log = train(ds, TrainConfig(epochs=0, batch_size=4, queue_capacity=0, seed=3), tmp_path)
    assert log == []
    init = initial_checkpoint(6, seed=3)
    for k, v in init.params.items():
        np.testing.assert_array_equal(ck.params[k], v)
    assert load_checkpoint(tmp_path).epoch == 0


def test_training_error_reports_batch(monkeypatch):
    ds, _, _ = synth_dataset(classes=2, per_class=8, dim=6, noise=0.1, seed=0)
    import crossview.trainer as tr

    calls = {"n": 0}
    real = tr.batch_loss

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise ContractError("boom")
        return real(*a, **k)

    monkeypatch.setattr(tr, "batch_loss", flaky)
    with pytest.raises(TrainingError) as info:
        train(ds, TrainConfig(epochs=1, batch_size=4, queue_capacity=0))
    assert info.value.batch_index == 2


def test_composite_gradients_pass_grad_check():
    cases = run_suite(n_configs=20, seed=11)
    assert all(c.report.passed for c in cases), [c.report for c in cases if not c.report.passed]
    assert {c.loss_form for c in cases} == {"moco", "ground_anchor"}
