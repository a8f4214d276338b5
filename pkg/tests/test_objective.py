import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_grads, randomize, tiny_config
from dtrnet import tensor as T
from dtrnet.data import SyntheticTask
from dtrnet.errors import ConfigError, NonFiniteLossError
from dtrnet.model import ModelConfig, build_model
from dtrnet.objective import (
    AdamState,
    CsvSink,
    JsonlSink,
    MemorySink,
    TrainConfig,
    adamw_step,
    batch_loss,
    clip_gradients,
    evaluate,
    lr_at,
    metrics_header,
    no_decay_names,
    routing_penalty,
    train,
)
from dtrnet.routing import RoutingDecision
from dtrnet.tensor import Tensor


def decision(g_attn, mask, lengths=None, layer=1):
    g = np.asarray(g_attn, dtype=float)
    scores = Tensor(np.stack([g, 1 - g], axis=1), requires_grad=True)
    lengths = lengths or (len(g),)
    return RoutingDecision(layer=layer, soft_scores=scores, hard_mask=np.asarray(mask, bool), lengths=lengths)


# -- penalty ------------------------------------------------------------------------


def test_penalty_all_routed_unit_gate():
    assert routing_penalty([decision(np.ones(5), np.ones(5))], 1e-3).item() == pytest.approx(5e-3, rel=1e-15)


def test_penalty_zero_cases():
    d = decision([0.7, 0.2], [1, 0])
    assert routing_penalty([d], 0.0).item() == 0.0
    assert routing_penalty([decision([0.4, 0.3], [0, 0])], 1.0).item() == 0.0
    assert routing_penalty([], 1.0).item() == 0.0


def test_penalty_alpha_weights():
    # loads 1 and 3 -> alpha = 1/4, 3/4
    a = decision([0.6, 0.2, 0.2, 0.2], [1, 0, 0, 0], layer=1)
    b = decision([0.9, 0.8, 0.7, 0.1], [1, 1, 1, 0], layer=2)
    expected = 0.5 * (0.25 * 1.2 + 0.75 * 2.5)
    assert routing_penalty([a, b], 0.5).item() == pytest.approx(expected, abs=1e-15)


def test_penalty_averages_over_sequences():
    one = routing_penalty([decision([0.8, 0.6], [1, 1])], 1.0).item()
    two = routing_penalty([decision([0.8, 0.6, 0.8, 0.6], [1, 1, 1, 1], lengths=(2, 2))], 1.0).item()
    assert two == pytest.approx(one, abs=1e-15)


def test_penalty_gradient_is_alpha_times_lambda():
    a = decision([0.6, 0.2], [1, 0], layer=1)
    b = decision([0.9, 0.8], [1, 1], layer=2)
    with T.Tape() as tape:
        loss = routing_penalty([a, b], 2.0)
    tape.backward(loss)
    np.testing.assert_allclose(a.soft_scores.grad[:, 0], 2.0 / 3.0)
    np.testing.assert_allclose(b.soft_scores.grad[:, 0], 4.0 / 3.0)
    np.testing.assert_array_equal(a.soft_scores.grad[:, 1], 0.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(0, 1)),
    arrays(np.bool_, 6),
    st.integers(0, 5),
    st.floats(0, 0.5),
)
def test_penalty_monotone_in_gate(g, mask, idx, bump):
    lam = 0.1
    base = routing_penalty([decision(g, mask)], lam).item()
    g2 = g.copy()
    g2[idx] = min(1.0, g2[idx] + bump)
    assert routing_penalty([decision(g2, mask)], lam).item() >= base - 1e-15
    assert base >= 0.0


def test_penalty_rejects_negative_lambda():
    with pytest.raises(ValueError):
        routing_penalty([decision([0.5], [1])], -1.0)


def test_total_loss_gradients_reach_routers(rng):
    model = randomize(build_model(tiny_config()), rng)
    examples = SyntheticTask("copy", seq_len=7, alphabet=4).fixed(2, 0)
    for e in examples:
        e.tokens %= 11
        e.targets %= 11

    def loss():
        return batch_loss(model, examples, lam=1e-3)[0]

    tensors = [model.params[k] for k in ("layers.1.router.w1", "layers.2.router.w2", "layers.0.attn.wq", "embed")]
    assert check_grads(loss, tensors) < 1e-5


# -- optimiser ---------------------------------------------------------------------------


def scalar(value):
    return {"p": Tensor(np.array([value]), requires_grad=True)}


def test_adamw_scalar_first_step():
    params = scalar(1.0)
    adamw_step(params, {"p": np.array([1.0])}, AdamState(), lr=0.1, weight_decay=0.0)
    # bias-corrected m = v = 1, so the step is lr / (1 + eps)
    assert params["p"].data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert params["p"].data[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.5, 2.0, -0.1]
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.95, 1e-8
    params = scalar(0.7)
    state = AdamState()
    p, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adamw_step(params, {"p": np.array([g])}, state, lr, wd, b1, b2, eps)
        p *= 1 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert params["p"].data[0] == pytest.approx(p, abs=1e-15)


def test_adamw_zero_grad_zero_decay_is_identity():
    params = scalar(0.37)
    adamw_step(params, {"p": np.zeros(1)}, AdamState(), lr=0.5, weight_decay=0.0)
    assert params["p"].data[0] == 0.37


def test_adamw_decay_only():
    params = scalar(2.0)
    state = AdamState()
    for _ in range(3):
        adamw_step(params, {"p": np.zeros(1)}, state, lr=0.1, weight_decay=0.5)
    assert params["p"].data[0] == pytest.approx(2.0 * 0.95**3, abs=1e-15)


def test_adamw_no_decay_names(tiny_model):
    skip = no_decay_names(tiny_model)
    assert "layers.0.norm1" in skip and "norm_f" in skip and "embed" not in skip
    params = {"gain": Tensor(np.ones(3), requires_grad=True)}
    adamw_step(params, {"gain": np.zeros(3)}, AdamState(), lr=0.1, weight_decay=1.0, no_decay={"gain"})
    np.testing.assert_array_equal(params["gain"].data, 1.0)


# -- schedule and clipping ---------------------------------------------------------------


def test_lr_schedule_examples():
    cfg = TrainConfig(peak_lr=1e-3, total_steps=100, warmup_ratio=0.1)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(55, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(101, cfg)


def test_lr_without_warmup_starts_at_peak():
    assert lr_at(0, TrainConfig(peak_lr=0.2, total_steps=10, warmup_ratio=0.0)) == 0.2


def test_lr_is_monotone_after_warmup():
    cfg = TrainConfig(total_steps=200)
    lrs = [lr_at(s, cfg) for s in range(20, 201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_examples():
    grads, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 0.1)
    assert norm == 5.0
    np.testing.assert_allclose(grads["a"], [0.06, 0.08], rtol=1e-14)
    small = {"a": np.array([0.03, 0.04])}
    assert clip_gradients(small, 0.1)[0]["a"] is small["a"]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-100, 100)), st.floats(1e-3, 10))
def test_clip_bounds_global_norm(g, max_norm):
    grads, _ = clip_gradients({"a": g[:3], "b": g[3:]}, max_norm)
    assert T.global_norm(list(grads.values())) <= max_norm * (1 + 1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(peak_lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})


# -- training loop ---------------------------------------------------------------------------


def small_run(tmp_path=None, steps=30, **train_overrides):
    model = build_model(ModelConfig(n_layers=4, d_model=16, d_ff=32, n_heads=2, max_seq_len=64), seed=0)
    task = SyntheticTask("copy", seq_len=9, alphabet=4)
    cfg = TrainConfig(total_steps=steps, batch_size=4, seq_len=9, peak_lr=3e-3, clip_norm=1.0, **train_overrides)
    sinks = []
    if tmp_path is not None:
        sinks = [JsonlSink(tmp_path / "m.jsonl"), CsvSink(tmp_path / "m.csv", model.dtr_layers)]
    model, records = train(model, task, cfg, sinks)
    for s in sinks:
        s.close()
    return model, records


def test_training_reduces_loss():
    _, records = small_run(steps=150)
    first = records[0].ce_loss
    assert np.mean([r.ce_loss for r in records[-10:]]) < first


def test_metrics_invariants(tmp_path):
    _, records = small_run(tmp_path, steps=12)
    assert [r.step for r in records] == list(range(1, 13))
    for r in records:
        assert r.total_loss == pytest.approx(r.ce_loss + r.routing_penalty, abs=1e-9)
        assert set(r.attention_fractions) == {1, 2}
        assert r.tokens_per_sec > 0
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 12 and json.loads(lines[0])["step"] == 1
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(metrics_header([1, 2])) == "step,ce,penalty,total,lr,load_1,load_2"


def test_training_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ma, _ = small_run(a, steps=8)
    mb, _ = small_run(b, steps=8)
    for name in ("m.jsonl", "m.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for k in ma.params:
        np.testing.assert_array_equal(ma.params[k].data, mb.params[k].data)


def test_non_finite_loss_aborts_with_snapshot():
    model = build_model(ModelConfig(n_layers=4, d_model=16, d_ff=32, n_heads=2, max_seq_len=64), seed=0)
    model.params["head"].data[0, 0] = np.nan
    task = SyntheticTask("copy", seq_len=9, alphabet=4)
    with pytest.raises(NonFiniteLossError) as info:
        train(model, task, TrainConfig(total_steps=3, batch_size=2, seq_len=9))
    snap = info.value.snapshot
    assert snap["step"] == 1 and set(snap["attention_fractions"]) == {1, 2} and "lr" in snap


def test_memory_sink_and_checkpoint_callback(tmp_path):
    model = build_model(ModelConfig(n_layers=4, d_model=16, d_ff=32, n_heads=2, max_seq_len=64), seed=0)
    sink = MemorySink()
    saved = []
    cfg = TrainConfig(total_steps=4, batch_size=2, seq_len=9, checkpoint_every=2)
    train(model, SyntheticTask("copy", 9, 4), cfg, [sink], tmp_path, lambda m, p: saved.append(p.name))
    assert len(sink.records) == 4 and saved == ["step000002", "step000004"]


def test_evaluate_matches_batch_loss():
    model = build_model(ModelConfig(n_layers=4, d_model=16, d_ff=32, n_heads=2, max_seq_len=64), seed=1)
    examples = SyntheticTask("copy", 9, 4).fixed(10, 3)
    ce, decisions = evaluate(model, examples, batch_size=3)
    with T.no_tape():
        _, direct, _, _ = batch_loss(model, examples, 0.0)
    assert ce == pytest.approx(direct.item(), rel=1e-5)
    assert len(decisions) == 2 * 4  # two DTR layers per batch, four batches
