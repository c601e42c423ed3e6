import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sira.experts import ExpertBank, FrozenProjection, init_bank
from sira.gating import GateNetwork
from sira.layer import MODES, SiraConfig, SiraLayer, count_trainable_params, static_route
from sira.numerics import RngState, grad_check


def make_layer(seed=0, d=6, **kw):
    g = np.random.default_rng(seed)
    cfg = SiraConfig(d_in=d, d_out=d, **kw)
    layer = SiraLayer.init(cfg, FrozenProjection(g.standard_normal((d, d))), RngState(seed))
    layer.bank.a[...] = g.standard_normal(layer.bank.a.shape)
    layer.bank.b[...] = g.standard_normal(layer.bank.b.shape)
    if layer.gate is not None:
        layer.gate.theta_g[...] = g.standard_normal(layer.gate.theta_g.shape)
    return layer


def scalar_mixture(layer, out, x):
    """Token-by-token, entry-by-entry recomputation of the layer output."""
    w0, a, b, scale = layer.frozen.w0, layer.bank.a, layer.bank.b, layer.bank.scale
    d_out, d_in = w0.shape
    accepted = np.vstack([p.accepted for p in out.plans])
    y = np.zeros((d_out, x.shape[1]))
    for s in range(x.shape[1]):
        for i in range(d_out):
            y[i, s] = sum(w0[i, j] * x[j, s] for j in range(d_in))
        for e in range(accepted.shape[1]):
            if not accepted[s, e]:
                continue
            ax = [sum(a[e][r, j] * x[j, s] for j in range(d_in)) for r in range(a.shape[1])]
            for i in range(d_out):
                delta = sum(b[e][i, r] * ax[r] for r in range(len(ax)))
                y[i, s] += out.decision.gate_values[s, e] * scale * delta
    return y


def test_fresh_layer_is_frozen_projection():
    g = np.random.default_rng(0)
    w0 = g.standard_normal((5, 5))
    layer = SiraLayer.init(SiraConfig(5, 5, num_experts=4, top_k=2), FrozenProjection(w0), RngState(0))
    x = g.standard_normal((5, 9))
    out = layer.forward(x, RngState(1), training=True)
    np.testing.assert_array_equal(out.y, w0 @ x)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("training", [False, True])
def test_output_matches_scalar_recomputation(seed, training):
    layer = make_layer(seed, d=4, rank=2, num_experts=3, top_k=2, capacity=2, expert_dropout_rate=0.3)
    x = np.random.default_rng(seed + 10).standard_normal((4, 5))
    out = layer.forward(x, RngState(seed), training=training)
    np.testing.assert_allclose(out.y, scalar_mixture(layer, out, x), atol=1e-12, rtol=0)


def test_dropped_tokens_fall_back_bitwise():
    layer = make_layer(1, d=4, rank=2, num_experts=2, top_k=1, capacity=1, expert_dropout_rate=0.0)
    layer.gate.theta_g[...] = 0.0
    layer.gate.theta_g[0, 0] = 50.0
    x = np.abs(np.random.default_rng(2).standard_normal((4, 3))) + 1.0
    out = layer.forward(x)
    plan = out.plans[0]
    assert sorted(plan.dropped_pairs) == [(1, 0), (2, 0)]
    np.testing.assert_array_equal(out.y[:, 1:], layer.frozen.w0 @ x[:, 1:])
    assert not np.array_equal(out.y[:, 0], (layer.frozen.w0 @ x)[:, 0])


@pytest.mark.parametrize("seed", range(5))
def test_single_expert_sira_equals_dense(seed):
    sira = make_layer(seed, d=5, rank=3, num_experts=1, top_k=1, capacity=8, expert_dropout_rate=0.0)
    cfg = dataclasses.replace(sira.cfg, mode="dense_lora")
    dense = SiraLayer(cfg, sira.frozen, ExpertBank(sira.bank.a.copy(), sira.bank.b.copy(), sira.bank.scale))
    x = np.random.default_rng(seed).standard_normal((5, 8))
    assert np.abs(sira.forward(x).y - dense.forward(x).y).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_full_k_sira_equals_full_moe(seed):
    sira = make_layer(seed, d=5, rank=2, num_experts=3, top_k=3, capacity=8, expert_dropout_rate=0.0)
    cfg = dataclasses.replace(sira.cfg, mode="full_moe")
    moe = SiraLayer(cfg, sira.frozen, sira.bank, sira.gate)
    x = np.random.default_rng(seed).standard_normal((5, 8))
    assert np.abs(sira.forward(x, RngState(0), True).y - moe.forward(x, RngState(0), True).y).max() < 1e-12


@pytest.mark.parametrize("mode", ["sira", "dense_lora", "full_moe", "static_routing"])
def test_inference_ignores_rng(mode):
    layer = make_layer(3, d=4, rank=2, num_experts=4, top_k=2, capacity=2, mode=mode)
    x = np.random.default_rng(0).standard_normal((4, 6))
    np.testing.assert_array_equal(layer.forward(x, RngState(1)).y, layer.forward(x, RngState(77)).y)


def test_random_expert_modes():
    layer = make_layer(4, d=4, rank=2, num_experts=3, top_k=1, mode="random_expert")
    x = np.random.default_rng(0).standard_normal((4, 5))
    w0x = layer.frozen.w0 @ x
    deltas = [layer.bank.scale * layer.bank.b[e] @ layer.bank.a[e] @ x for e in range(3)]
    out = layer.forward(x)
    np.testing.assert_allclose(out.y, w0x + sum(deltas) / 3, atol=1e-12)
    out = layer.forward(x, RngState(5), training=True)
    assert any(np.allclose(out.y, w0x + dl, atol=1e-12) for dl in deltas)
    assert out.aux == 0.0


def test_static_route_hash():
    chosen = static_route(6, 4, 2)
    for s in range(6):
        first = (s * 2654435761 & 0xFFFFFFFF) % 4
        assert chosen[s].tolist() == [first, (first + 1) % 4]
    np.testing.assert_array_equal(static_route(6, 4, 2, group_size=3)[3:], static_route(3, 4, 2))


def test_backward_zero_upstream():
    layer = make_layer(5, d=4, rank=2, num_experts=3, top_k=2, aux_weight=0.0, expert_dropout_rate=0.0)
    x = np.random.default_rng(0).standard_normal((4, 5))
    out = layer.forward(x)
    g = layer.backward(out, np.zeros_like(out.y))
    assert not g.a.any() and not g.b.any() and not g.theta_g.any()

    layer = make_layer(5, d=4, rank=2, num_experts=3, top_k=2, aux_weight=0.1, expert_dropout_rate=0.0)
    out = layer.forward(x, RngState(0), training=True)
    assert np.abs(layer.backward(out, np.zeros_like(out.y)).theta_g).max() > 0


def test_backward_rejects_foreign_cache():
    a, b = make_layer(0, d=4, num_experts=2, top_k=1), make_layer(1, d=4, num_experts=2, top_k=1)
    out = a.forward(np.ones((4, 2)))
    with pytest.raises(ValueError):
        b.backward(out, np.zeros_like(out.y))


def _margin(layer, x):
    p = np.exp(x.T @ layer.gate.theta_g)
    p /= p.sum(axis=1, keepdims=True)
    s = np.sort(p, axis=1)[:, ::-1]
    k = layer.cfg.top_k
    return np.inf if k >= s.shape[1] else float((s[:, k - 1] - s[:, k]).min())


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("capacity", [1, 8])
def test_layer_gradients(seed, capacity):
    g = np.random.default_rng(100 + seed)
    while True:
        layer = make_layer(int(g.integers(1 << 30)), d=6, rank=2, num_experts=3, top_k=2, capacity=capacity,
                           expert_dropout_rate=0.0, aux_weight=0.3)
        x = g.standard_normal((6, 4))
        if _margin(layer, x) > 1e-4:
            break
    up = g.standard_normal((6, 4))
    params = layer.parameters()
    names = list(params)

    def f(ps):
        for n, p in zip(names, ps):
            params[n][...] = p
        out = layer.forward(ps[-1], training=True, group_size=2)
        grads = layer.backward(out, up)
        d = grads.as_dict()
        return float((out.y * up).sum() + out.aux), [d[n] for n in names] + [grads.x]

    assert grad_check(f, [params[n].copy() for n in names] + [x]) < 1e-5


def test_count_trainable_params():
    dense = SiraConfig(64, 64, rank=4, mode="dense_lora")
    assert count_trainable_params(dense) == 512
    sira = SiraConfig(64, 64, rank=4, num_experts=16)
    assert count_trainable_params(sira) == 16 * 512 + 64 * 16
    rnd = dataclasses.replace(sira, mode="random_expert")
    assert count_trainable_params(rnd) == count_trainable_params(sira) - 64 * 16
    for mode in MODES:
        cfg = SiraConfig(6, 5, rank=2, num_experts=3, top_k=2, mode=mode)
        layer = SiraLayer.init(cfg, FrozenProjection(np.zeros((5, 6))), RngState(0))
        assert layer.num_trainable() == count_trainable_params(cfg)


@pytest.mark.parametrize("bad", [dict(mode="nope"), dict(top_k=0), dict(top_k=5), dict(capacity=0),
                                 dict(expert_dropout_rate=1.0), dict(aux_weight=-1.0), dict(group="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SiraConfig(4, 4, num_experts=4, **bad)


def test_layer_rejects_mismatched_parts():
    cfg = SiraConfig(4, 4, rank=2, num_experts=3, top_k=1)
    bank = init_bank(3, 4, 4, 2, RngState(0))
    with pytest.raises(ValueError):
        SiraLayer(cfg, FrozenProjection(np.zeros((4, 4))), bank, None)
    with pytest.raises(ValueError):
        SiraLayer(cfg, FrozenProjection(np.zeros((4, 4))), init_bank(2, 4, 4, 2, RngState(0)),
                  GateNetwork(np.zeros((4, 3))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 4), c=st.integers(1, 6), rate=st.sampled_from([0.0, 0.5]))
def test_sparsity_and_fallback_property(seed, k, c, rate):
    layer = make_layer(seed % 1000, d=3, rank=1, num_experts=4, top_k=k, capacity=c, expert_dropout_rate=rate)
    x = np.random.default_rng(seed).standard_normal((3, 6))
    out = layer.forward(x, RngState(seed), training=True)
    assert np.all((out.decision.gate_values != 0).sum(axis=1) <= k)
    accepted = np.vstack([p.accepted for p in out.plans])
    idle = ~accepted.any(axis=1) | ~(np.where(accepted, out.decision.gate_values, 0) != 0).any(axis=1)
    np.testing.assert_array_equal(out.y[:, idle], (layer.frozen.w0 @ x)[:, idle])
