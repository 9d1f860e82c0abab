import logging
import math
import struct

import numpy as np
import pytest

from seqflow.model import NULL_LABEL
from seqflow.numerics import Tensor
from seqflow.trainer import (
    AdamW,
    CheckpointError,
    TrainConfig,
    TrainState,
    adam_update,
    batch_indices,
    checkpoint_bytes,
    drop_condition,
    evaluate,
    first_frame_dropout,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
    trainable,
)

from conftest import randomize, tiny_config


def toy_data(n=12, seed=0):
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, cfg.n_frames, cfg.frame_size, cfg.channels)), rng.integers(0, cfg.n_classes, n)


def fresh(**kw) -> TrainState:
    base = dict(batch_size=4, lr=1e-3, total_steps=20, eval_every=5, eval_samples=4)
    base.update(kw)
    return TrainState.fresh(tiny_config(), TrainConfig(**base))


def snapshot(state: TrainState) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in trainable(state.flow, state.denoiser).items()}


@pytest.mark.parametrize(
    "kw",
    [dict(lr=0), dict(sigma=-1), dict(batch_size=0), dict(beta1=1.0), dict(schedule="linear"), dict(lambda_den=-0.1)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_adam_matches_hand_computation():
    cfg = TrainConfig(lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW()
    g1, g2 = np.array([0.5, -0.1]), np.array([-0.2, 0.3])
    p.grad = g1
    opt.update({"p": p}, cfg, 0.1)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-14)
    p.grad = g2
    opt.update({"p": p}, cfg, 0.05)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.95 * 0.05 * g1**2 + 0.05 * g2**2
    expect = expect * (1 - 0.05 * 0.01) - 0.05 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.95**2)) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-14)
    assert opt.t == 2


def test_zero_gradients_leave_parameters_unchanged():
    cfg = TrainConfig(weight_decay=0.0)
    p, q = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0]))
    p.grad = np.zeros(2)
    adam_update({"p": p, "q": q}, AdamW(), cfg)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(q.data, [3.0])


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr=1e-3, min_lr=1e-5, total_steps=101)
    assert learning_rate(cfg, 0) == pytest.approx(1e-3, rel=1e-15)
    assert learning_rate(cfg, 100) == pytest.approx(1e-5, rel=1e-12)
    assert learning_rate(cfg, 50) == pytest.approx(0.5 * (1e-3 + 1e-5), rel=1e-12)
    assert learning_rate(cfg, 500) == learning_rate(cfg, 100)
    rates = [learning_rate(cfg, s) for s in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert learning_rate(TrainConfig(schedule="constant", lr=2e-3), 77) == 2e-3


def test_first_frame_dropout_cases(caplog):
    x, y = toy_data(4)
    rng = np.random.default_rng(0)
    out, labels = first_frame_dropout((x, y), 0.0, rng)
    assert out is x
    out, _ = first_frame_dropout((x, y), 1.0, rng)
    np.testing.assert_array_equal(out, x[:, 1:])
    out, _ = first_frame_dropout((x, y), 0.5, np.random.default_rng(3))
    assert isinstance(out, list) and sorted({a.shape[0] for a in out}) == [2, 3]
    for a, full in zip(out, x):
        np.testing.assert_array_equal(a, full[-a.shape[0] :])
    with caplog.at_level(logging.WARNING):
        single, _ = first_frame_dropout((x[:, :1], y), 1.0, rng)
    assert single.shape[1] == 1 and "single frame" in caplog.text


def test_first_frame_dropout_rate_is_binomial():
    n, p = 10_000, 0.3
    x = np.zeros((n, 2, 1, 1))
    x[:, 0] = 1.0
    out, _ = first_frame_dropout((x, np.zeros(n, int)), p, np.random.default_rng(11))
    dropped = sum(a.shape[0] == 1 for a in out)
    assert abs(dropped - n * p) < 4 * math.sqrt(n * p * (1 - p))


def test_drop_condition():
    labels = np.arange(1000) % 3
    out = drop_condition(labels, 0.1, np.random.default_rng(0))
    changed = out != labels
    assert (out[changed] == NULL_LABEL).all()
    assert 50 < changed.sum() < 150
    np.testing.assert_array_equal(drop_condition(labels, 0.0, np.random.default_rng(0)), labels)


def test_batch_indices_cover_each_epoch_once():
    seen = np.concatenate([batch_indices(10, 5, 3, s) for s in range(2)])
    assert sorted(seen) == list(range(10))
    np.testing.assert_array_equal(batch_indices(10, 5, 3, 1), batch_indices(10, 5, 3, 1))
    wrap = batch_indices(10, 4, 3, 2)  # positions 8..11 straddle two epochs
    assert wrap.shape == (4,)


def _one_step(lambda_den, with_denoiser):
    state = fresh(lambda_den=lambda_den, grad_skip_warmup=0, grad_skip_threshold=1e9, cond_dropout_prob=0.0)
    randomize(state.flow, 1, 0.2)
    randomize(state.denoiser, 2, 0.2)
    x, y = toy_data(4)
    losses, skipped = train_step((x, y), state.flow, state.denoiser if with_denoiser else None, state.train_config,
                                 state.opt, np.random.default_rng(5))
    return losses, snapshot(state)


def test_zero_lambda_matches_pure_likelihood_training():
    joint, p_joint = _one_step(0.0, True)
    alone, p_alone = _one_step(0.0, False)
    assert joint["nll"] == alone["nll"]
    for k, v in p_alone.items():
        if k.startswith("flow."):
            np.testing.assert_array_equal(p_joint[k], v)


def scale_to(target):
    """Grad hook rescaling the global gradient norm to ``target``."""

    def hook(params):
        grads = [p for p in params.values() if p.grad is not None]
        norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in grads))
        for p in grads:
            p.grad = p.grad * (target / norm)

    return hook


def test_spike_after_warmup_is_skipped():
    state = fresh(grad_skip_warmup=100)
    x, y = toy_data(4)
    state.opt.calls = 150
    # one ordinary update first so the moments are non-trivial
    train_step((x, y), state.flow, state.denoiser, state.train_config, state.opt, np.random.default_rng(0),
               grad_hook=scale_to(0.5))
    before = snapshot(state)
    moments = {k: (state.opt.m[k].copy(), state.opt.v[k].copy()) for k in state.opt.m}
    t = state.opt.t
    losses, skipped = train_step((x, y), state.flow, state.denoiser, state.train_config, state.opt,
                                 np.random.default_rng(1), grad_hook=scale_to(1.5))
    assert skipped and losses["grad_norm"] == pytest.approx(1.5)
    assert state.opt.t == t and state.opt.skipped == 1 and state.opt.calls == 152
    for k, v in snapshot(state).items():
        np.testing.assert_array_equal(v, before[k])
    for k, (m, v) in moments.items():
        np.testing.assert_array_equal(state.opt.m[k], m)
        np.testing.assert_array_equal(state.opt.v[k], v)


def test_spike_during_warmup_is_applied():
    state = fresh(grad_skip_warmup=100)
    x, y = toy_data(4)
    state.opt.calls = 50

    def spike(params):
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * 1e3

    _, skipped = train_step((x, y), state.flow, state.denoiser, state.train_config, state.opt,
                            np.random.default_rng(0), grad_hook=spike)
    assert not skipped and state.opt.t == 1


def test_non_finite_gradient_is_counted_and_skipped():
    state = fresh()
    x, y = toy_data(4)
    before = snapshot(state)

    def poison(params):
        next(iter(params.values())).grad = np.full_like(next(iter(params.values())).data, np.nan)

    losses, skipped = train_step((x, y), state.flow, state.denoiser, state.train_config, state.opt,
                                 np.random.default_rng(0), grad_hook=poison)
    assert skipped and math.isnan(losses["grad_norm"])
    assert state.opt.nonfinite == 1 and state.opt.skipped == 1 and state.opt.t == 0
    for k, v in snapshot(state).items():
        np.testing.assert_array_equal(v, before[k])


def test_training_reduces_nll_on_toy_data():
    state = fresh(total_steps=30, lr=5e-3, grad_skip_threshold=1e9)
    x, y = toy_data(32)
    rows, evals = train(state, x, y, heldout=(x[:8], y[:8]), eval_steps=[1, 30])
    assert len(rows) == 30 and [e["step"] for e in evals] == [1, 30]
    assert evals[-1]["nll"] < evals[0]["nll"]


def test_training_is_deterministic():
    x, y = toy_data(16)
    a, b = fresh(), fresh()
    ra, _ = train(a, x, y, steps=4)
    rb, _ = train(b, x, y, steps=4)
    assert ra == rb
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_evaluate_is_deterministic():
    state = fresh()
    x, y = toy_data(6)
    assert evaluate(state.flow, state.denoiser, x, y, 0.1) == evaluate(state.flow, state.denoiser, x, y, 0.1)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    x, y = toy_data(16)
    state = fresh()
    train(state, x, y, steps=3)
    path = tmp_path / "a.sflw"
    save_checkpoint(state, path)
    again = load_checkpoint(path, expect=tiny_config())
    assert checkpoint_bytes(again) == path.read_bytes()
    assert again.step == 3 and again.train_config == state.train_config


def test_checkpoint_single_precision(tmp_path):
    state = fresh()
    randomize(state.flow, 0, 0.3)
    save_checkpoint(state, tmp_path / "f4", precision="f4")
    save_checkpoint(state, tmp_path / "f8")
    loaded = load_checkpoint(tmp_path / "f4")
    assert (tmp_path / "f4").stat().st_size < (tmp_path / "f8").stat().st_size
    for k, v in snapshot(loaded).items():
        np.testing.assert_allclose(v, snapshot(state)[k], rtol=1e-6, atol=1e-7)
    with pytest.raises(ValueError):
        checkpoint_bytes(state, "f2")


def test_checkpoint_errors(tmp_path):
    state = fresh()
    blob = checkpoint_bytes(state)
    cases = {
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + struct.pack("<I", 99) + blob[8:],
        "truncated": blob[:-10],
        "trailing": blob + b"\0" * 8,
        "short": blob[:6],
    }
    for name, raw in cases.items():
        path = tmp_path / name
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    good = tmp_path / "good"
    good.write_bytes(blob)
    with pytest.raises(CheckpointError, match="geometry"):
        load_checkpoint(good, expect=tiny_config(grid=3))


def test_resume_matches_uninterrupted_run(tmp_path):
    x, y = toy_data(16)
    straight = fresh()
    rows_a, _ = train(straight, x, y, steps=10)
    part = fresh()
    rows_b, _ = train(part, x, y, steps=5)
    save_checkpoint(part, tmp_path / "mid.sflw")
    resumed = load_checkpoint(tmp_path / "mid.sflw")
    rows_c, _ = train(resumed, x, y, steps=5)
    assert rows_b + rows_c == rows_a
    assert checkpoint_bytes(resumed) == checkpoint_bytes(straight)
