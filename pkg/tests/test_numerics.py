import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from r2a.numerics import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    concat,
    cosine_similarity,
    cross_entropy,
    dropout,
    finite_difference_check,
    gather_positions,
    log_softmax,
    no_grad,
    parameter,
    soft_margin_cosine_distance,
    softmax,
    stack,
    take_rows,
    where,
)

# -- backward ---------------------------------------------------------------

def test_sum_gradient_is_ones():
    p = parameter(np.array([0.3, -1.0, 2.0]))
    p.sum().backward()
    assert np.array_equal(p.grad, [1.0, 1.0, 1.0])


def test_dot_gradient():
    p = parameter(np.array([1.0, 2.0]))
    (p * p).sum().backward()
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar_root():
    p = parameter(np.ones(3))
    with pytest.raises(ValueError):
        (p * 2).backward()


def test_repeated_backward_accumulates():
    p = parameter(np.array([1.0, 2.0]))
    (p * p).sum().backward()
    (p * p).sum().backward()
    assert np.array_equal(p.grad, [4.0, 8.0])


def test_unreachable_parameter_gradient_is_zero():
    p, q = parameter(np.ones(2)), parameter(np.ones(4))
    (p * 3).sum().backward()
    assert np.array_equal(q.grad, np.zeros(4))
    assert q.grad.shape == q.shape


def test_two_layer_tanh_network_matches_finite_differences():
    rng = np.random.default_rng(3)
    W1, b1 = parameter(rng.normal(size=(4, 5))), parameter(rng.normal(size=5))
    W2 = parameter(rng.normal(size=(5, 2)))
    x = Tensor(rng.normal(size=(3, 4)))

    def f():
        return ((x @ W1 + b1).tanh() @ W2).sum() ** 2

    assert finite_difference_check(f, [W1, b1, W2]) < 1e-4


@pytest.mark.parametrize("op", ["exp", "log", "sigmoid", "sqrt", "tanh", "abs", "relu"])
def test_unary_op_gradients(op):
    rng = np.random.default_rng(0)
    # keep away from 0 so abs/relu/sqrt/log are smooth at every probe point
    p = parameter(rng.uniform(0.2, 2.0, size=6) * rng.choice([-1, 1], size=6))
    if op in ("log", "sqrt"):
        p.data[...] = np.abs(p.data)

    def f():
        return (getattr(p, op)() * np.arange(1, 7)).sum()

    assert finite_difference_check(f, [p]) < 1e-6


def test_structural_op_gradients():
    rng = np.random.default_rng(1)
    a, b = parameter(rng.normal(size=(2, 3))), parameter(rng.normal(size=(2, 3)))
    table = parameter(rng.normal(size=(5, 3)))
    ids = np.array([[0, 4, 4], [2, 1, 0]])
    idx = np.array([[2, 1, 0], [0, 0, 1]])
    cond = rng.random((2, 3)) > 0.5
    weights = rng.normal(size=(2, 3, 3))

    def f():
        parts = [
            (concat([a, b], axis=0) ** 2).sum(),
            (stack([a, b], axis=0).max(axis=0) * 1.5).sum(),
            (where(cond, a, b) / (b * b + 1.0)).sum(),
            (take_rows(table, ids) * weights).sum(),
            (gather_positions(a, idx) * a).sum(),
            (a.transpose(1, 0) @ b).mean(),
            a[1, 1:].sum() * 2 - b.reshape(6)[::2].sum(),
        ]
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    assert finite_difference_check(f, [a, b, table]) < 1e-6


def test_no_grad_builds_no_graph():
    p = parameter(np.ones(3))
    with no_grad():
        y = (p * 2).sum()
    y.backward()
    assert np.array_equal(p.grad, np.zeros(3))


# -- softmax -------------------------------------------------------------

def test_softmax_uniform():
    out = softmax(Tensor(np.full(4, 1.7))).data
    assert np.allclose(out, 0.25, atol=1e-15)


def test_softmax_hand_values():
    out = softmax(Tensor(np.array([math.log(1), math.log(3)]))).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_mask():
    out = softmax(Tensor(np.zeros(3)), mask=np.array([True, False, True])).data
    assert np.array_equal(out, [0.5, 0.0, 0.5])


def test_softmax_all_masked_raises():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros(3)), mask=np.zeros(3, dtype=bool))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_is_distribution_and_shift_invariant(scores, c):
    p = softmax(Tensor(scores)).data
    assert (p >= 0).all() and abs(p.sum() - 1) < 1e-9
    assert np.allclose(softmax(Tensor(scores + c)).data, p, atol=1e-9)


def test_softmax_and_log_softmax_gradients():
    rng = np.random.default_rng(2)
    s = parameter(rng.normal(size=(3, 5)))
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    w = rng.normal(size=(3, 5))

    def f():
        return (softmax(s, mask) * w).sum() + (log_softmax(s) * w).sum()

    assert finite_difference_check(f, [s]) < 1e-6


def test_cross_entropy_of_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((4, 7)))
    assert cross_entropy(logits, np.array([0, 1, 2, 6])).item() == pytest.approx(math.log(7))


# -- soft-margin cosine distance -----------------------------------------

def d(a, b):
    return soft_margin_cosine_distance(Tensor(np.asarray(a, float)),
                                       Tensor(np.asarray(b, float))).item()


def test_distance_identical_is_zero():
    assert d([0.2, 0.5, 0.3], [0.2, 0.5, 0.3]) == 0.0


def test_distance_orthogonal_is_point_nine():
    assert d([1, 0, 0], [0, 0, 2]) == pytest.approx(0.9, abs=1e-15)


def test_distance_hand_value():
    assert d([1, 0], [1, 1]) == pytest.approx(1 - 1 / math.sqrt(2) - 0.1, abs=1e-12)
    assert d([1, 0], [1, 1]) == pytest.approx(0.19289, abs=1e-5)


def test_distance_zero_vector_raises():
    with pytest.raises(ValueError):
        d([0, 0], [1, 1])


vectors = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, st.floats(0.01, 100), st.floats(0.01, 100))
def test_distance_scale_invariance_and_range(a, b, c, k):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    v = d(a, b)
    assert 0.0 <= v <= 1.9 + 1e-12
    assert d(c * a, k * b) == pytest.approx(v, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, st.integers(-20, 20), st.integers(-20, 20))
def test_distance_exact_under_power_of_two_scaling(a, b, i, j):
    if np.abs(a).max() < 1e-3 or np.abs(b).max() < 1e-3:
        return
    # keep clear of subnormals, where halving stops being exact
    a, b = np.where(np.abs(a) < 1e-200, 0.0, a), np.where(np.abs(b) < 1e-200, 0.0, b)
    assert d(a * 2.0**i, b * 2.0**j) == d(a, b)


def test_distance_gradient_away_from_hinge():
    rng = np.random.default_rng(5)
    b = Tensor(rng.normal(size=8))
    checked = 0
    for _ in range(40):
        a = parameter(rng.normal(size=8))
        cos = cosine_similarity(Tensor(a.data), b).item()
        if abs(0.9 - cos) < 1e-3:
            continue
        assert finite_difference_check(lambda: soft_margin_cosine_distance(a, b), [a]) < 1e-4
        checked += 1
    assert checked >= 10


# -- Adam ------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    p = np.array([1.0, -2.0, 3.0])
    before = p.copy()
    adam_step([p], [np.zeros(3)], AdamState())
    assert np.array_equal(p, before)


def test_adam_first_step_moves_by_lr():
    p = np.zeros(1)
    state = AdamState(learning_rate=0.001)
    adam_step([p], [np.ones(1)], state)
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + 1e-8)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.step_count == 1


def test_adam_step_counter():
    p, state = np.zeros(2), AdamState()
    adam_step([p], [np.ones(2)], state)
    adam_step([p], [np.ones(2)], state)
    assert state.step_count == 2
    assert state.first_moment[0].shape == p.shape


def test_adam_rejects_non_finite_gradient_by_name():
    with pytest.raises(FloatingPointError, match="enc.Wx"):
        adam_step([np.zeros(2)], [np.array([0.0, np.nan])], AdamState(), names=["enc.Wx"])


def test_adam_optimizer_minimises_quadratic():
    p = parameter(np.array([3.0, -4.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
    assert np.abs(p.data).max() < 0.05


# -- dropout and finite differences -----------------------------------------

def test_dropout_inverted_and_off_at_inference():
    x = Tensor(np.ones((200, 50)))
    rng = np.random.default_rng(0)
    y = dropout(x, 0.1, rng, training=True).data
    kept = y[y != 0]
    assert np.allclose(kept, 1 / 0.9)
    assert abs((y == 0).mean() - 0.1) < 0.01
    assert dropout(x, 0.1, rng, training=False) is x


def test_finite_difference_check_quadratic():
    x = parameter(np.array([3.0]))
    assert finite_difference_check(lambda: (x * x).sum(), [x]) < 1e-8


def test_finite_difference_check_constant():
    x = parameter(np.array([3.0, 1.0]))
    assert finite_difference_check(lambda: (x * 0).sum() + 4.0, [x]) == 0.0


def test_finite_difference_check_rejects_non_finite():
    x = parameter(np.array([-1.0]))
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        finite_difference_check(lambda: x.log().sum(), [x])
