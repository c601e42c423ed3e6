import numpy as np
import pytest

from sira.experts import (
    ExpertBank,
    FrozenProjection,
    LoraExpert,
    expert_backward,
    expert_forward,
    frozen_forward,
    init_bank,
    init_expert,
)
from sira.numerics import RngState, ShapeError, grad_check


def test_fresh_expert_contributes_zero():
    e = init_expert(8, 8, 4, RngState(0))
    x = np.random.default_rng(0).standard_normal((8, 5))
    out = expert_forward(e, x)
    assert np.all(out == 0.0)
    assert np.all(e.b == 0)


def test_param_count_per_expert():
    e = init_expert(8, 8, 4, RngState(0))
    assert e.num_params() == 4 * 8 + 8 * 4 == 64


def test_zero_std_gives_zero_a():
    e = init_expert(3, 5, 2, RngState(0), init_std=0.0)
    assert np.all(e.a == 0)


def test_init_rejects_zero_dims():
    with pytest.raises(ValueError):
        init_expert(0, 4, 2, RngState(0))
    with pytest.raises(ValueError):
        init_expert(4, 4, 0, RngState(0))


def test_init_is_deterministic():
    a = init_bank(3, 4, 5, 2, RngState(11))
    b = init_bank(3, 4, 5, 2, RngState(11))
    np.testing.assert_array_equal(a.a, b.a)


def test_expert_forward_hand_example():
    e = LoraExpert(a=np.array([[1.0, 0.0]]), b=np.array([[2.0], [0.0]]), scale=1.0)
    np.testing.assert_array_equal(expert_forward(e, [3.0, 5.0]), [[6.0], [0.0]])


def test_expert_scale_is_linear():
    g = np.random.default_rng(1)
    a, b, x = g.standard_normal((2, 4)), g.standard_normal((3, 2)), g.standard_normal((4, 1))
    full = expert_forward(LoraExpert(a, b, 1.0), x)
    half = expert_forward(LoraExpert(a, b, 0.5), x)
    np.testing.assert_array_equal(half, 0.5 * full)


def test_expert_linearity_in_input():
    g = np.random.default_rng(2)
    e = LoraExpert(g.standard_normal((3, 6)), g.standard_normal((5, 3)))
    x, y = g.standard_normal((6, 1)), g.standard_normal((6, 1))
    lhs = expert_forward(e, 2.5 * x - 0.75 * y)
    rhs = 2.5 * expert_forward(e, x) - 0.75 * expert_forward(e, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_expert_shape_mismatch():
    e = init_expert(4, 4, 2, RngState(0))
    with pytest.raises(ShapeError):
        expert_forward(e, np.ones((3, 1)))


def test_frozen_forward_cases():
    x = np.random.default_rng(3).standard_normal((3, 1))
    np.testing.assert_array_equal(frozen_forward(FrozenProjection(np.eye(3)), x), x)
    assert np.all(frozen_forward(FrozenProjection(np.zeros((2, 3))), x) == 0)
    w = np.random.default_rng(4).standard_normal((3, 3))
    expected = np.array([[sum(w[i, k] * x[k, 0] for k in range(3))] for i in range(3)])
    np.testing.assert_allclose(frozen_forward(FrozenProjection(w), x), expected, rtol=1e-14)


def test_frozen_projection_is_read_only():
    p = FrozenProjection(np.eye(2))
    with pytest.raises(ValueError):
        p.w0[0, 0] = 5.0


def test_expert_backward_zero_upstream():
    g = np.random.default_rng(5)
    e = LoraExpert(g.standard_normal((2, 4)), g.standard_normal((4, 2)))
    ga, gb, gx = expert_backward(e, g.standard_normal((4, 3)), np.zeros((4, 3)))
    assert not ga.any() and not gb.any() and not gx.any()


def test_expert_backward_zero_b():
    g = np.random.default_rng(6)
    e = LoraExpert(g.standard_normal((2, 4)), np.zeros((4, 2)))
    ga, gb, _ = expert_backward(e, g.standard_normal((4, 3)), g.standard_normal((4, 3)))
    assert not ga.any()
    assert gb.any()


def test_expert_backward_finite_differences():
    g = np.random.default_rng(7)
    e = LoraExpert(g.standard_normal((2, 4)), g.standard_normal((4, 2)), scale=0.7)
    x, up = g.standard_normal((4, 3)), g.standard_normal((4, 3))

    def f(params):
        ga, gb, gx = expert_backward(e, params[2], up)
        return float((expert_forward(e, params[2]) * up).sum()), [ga, gb, gx]

    assert grad_check(f, [e.a, e.b, x]) < 1e-6


def test_bank_views_and_validation():
    bank = init_bank(3, 4, 5, 2, RngState(0))
    assert (len(bank), bank.d_in, bank.d_out, bank.rank) == (3, 4, 5, 2)
    bank.b[1] += 1.0
    assert np.all(bank[1].b == 1.0)
    assert len(bank.experts) == 3
    with pytest.raises(ValueError):
        ExpertBank.from_experts([init_expert(4, 5, 2, RngState(0)), init_expert(4, 5, 3, RngState(1))])
    with pytest.raises(ShapeError):
        ExpertBank(np.zeros((2, 2, 4)), np.zeros((3, 5, 2)))
