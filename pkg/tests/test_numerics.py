import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from prom3e import numerics as nx
from prom3e.numerics import GradCheckError, ShapeError, Tensor


def _p(rng, *shape, name=None, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return nx.parameter(data, name)


def _weighted(out: Tensor, rng) -> Tensor:
    # contract with fixed random weights so every output entry matters
    w = nx.constant(rng.normal(size=out.shape))
    return nx.sum(out * w)


def _case(op, rng, b, r, c):
    """Build (loss_fn, tensors) exercising ``op`` on shapes drawn from (b, r, c)."""
    if op == "matmul":
        a, m = _p(rng, b, r, c), _p(rng, c, r)
        return lambda: _weighted(nx.matmul(a, m), np.random.default_rng(0)), [a, m]
    if op in ("add", "sub", "mul"):
        a, row = _p(rng, b, r, c), _p(rng, c)
        f = {"add": nx.add, "sub": nx.sub, "mul": nx.mul}[op]
        return lambda: _weighted(f(a, row), np.random.default_rng(0)), [a, row]
    if op == "neg":
        a = _p(rng, r, c)
        return lambda: _weighted(nx.neg(a), np.random.default_rng(0)), [a]
    if op == "scale":
        a = _p(rng, r, c)
        return lambda: _weighted(nx.scale(a, -1.7), np.random.default_rng(0)), [a]
    if op in ("gelu", "exp", "expm1"):
        a = _p(rng, b, r, c)
        f = getattr(nx, op)
        return lambda: _weighted(f(a), np.random.default_rng(0)), [a]
    if op in ("log", "sqrt"):
        a = _p(rng, r, c, positive=True)
        f = getattr(nx, op)
        return lambda: _weighted(f(a), np.random.default_rng(0)), [a]
    if op == "layer_norm":
        x, g, bb = _p(rng, b, r, c + 1), _p(rng, c + 1), _p(rng, c + 1)
        return lambda: _weighted(nx.layer_norm(x, g, bb), np.random.default_rng(0)), [x, g, bb]
    if op == "softmax":
        x = _p(rng, b, r, c)
        return lambda: _weighted(nx.softmax(x, axis=-1), np.random.default_rng(0)), [x]
    if op == "logsumexp":
        x = _p(rng, r, c)
        return lambda: _weighted(nx.logsumexp(x, axis=1), np.random.default_rng(0)), [x]
    if op == "l2_normalize":
        x = _p(rng, r, c + 1)
        return lambda: _weighted(nx.l2_normalize(x, axis=-1), np.random.default_rng(0)), [x]
    if op == "pairwise_distance":
        x = _p(rng, r, c)
        y = nx.constant(rng.normal(size=(r, c)))
        return lambda: _weighted(nx.pairwise_distance(x, y), np.random.default_rng(0)), [x]
    if op in ("sum", "mean"):
        x = _p(rng, b, r, c)
        f = getattr(nx, op)
        return lambda: _weighted(f(x, axis=1), np.random.default_rng(0)), [x]
    if op == "concat":
        x, y = _p(rng, b, r, c), _p(rng, b, 1, c)
        return lambda: _weighted(nx.concat([x, y], axis=1), np.random.default_rng(0)), [x, y]
    if op == "take":
        x = _p(rng, b, r + 1, c)
        return lambda: _weighted(nx.take(x, [0, r], axis=1), np.random.default_rng(0)), [x]
    if op == "reshape":
        x = _p(rng, b, r, c)
        return lambda: _weighted(nx.reshape(x, (b, r * c)), np.random.default_rng(0)), [x]
    if op == "transpose":
        x = _p(rng, b, r, c)
        return lambda: _weighted(nx.transpose(x, (0, 2, 1)), np.random.default_rng(0)), [x]
    if op == "broadcast_to":
        x = _p(rng, 1, c)
        return lambda: _weighted(nx.broadcast_to(x, (r, c)), np.random.default_rng(0)), [x]
    if op == "self_attention":
        E = 4
        x = _p(rng, b, r, E)
        ws = [_p(rng, E, E) if i % 2 == 0 else _p(rng, E) for i in range(8)]
        heads = 2 if c % 2 == 0 else 1
        return lambda: _weighted(nx.self_attention(x, *ws, heads=heads), np.random.default_rng(0)), [x, *ws]
    raise AssertionError(op)


@pytest.mark.parametrize("op", nx.OP_SET)
@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), b=st.integers(1, 3), r=st.integers(1, 4), c=st.integers(1, 4))
def test_op_gradients_match_central_differences(op, seed, b, r, c):
    rng = np.random.default_rng(seed)
    loss_fn, tensors = _case(op, rng, b, r, c)
    err, where = nx.grad_check(loss_fn, tensors, step=1e-5)
    assert err < 1e-4, (op, where, err)


# examples ----------------------------------------------------------------------------


def test_gelu_at_zero():
    assert nx.gelu(nx.constant([0.0])).data[0] == 0.0


@given(st.floats(-1e6, 1e6))
def test_softmax_of_constant_row_is_uniform(c):
    out = nx.softmax(nx.constant([[c, c, c]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_l2_normalize_three_four_five():
    np.testing.assert_allclose(nx.l2_normalize(nx.constant([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_backward_quadratic():
    x = nx.parameter([1.0, 2.0])
    nx.backward(nx.sum(x * x), [x])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_loss_gives_zero_gradients():
    x = nx.parameter([1.0, 2.0])
    loss = nx.sum(nx.constant([3.0, 4.0]))
    nx.backward(loss, [x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_unreachable_parameter_gets_zero_gradient():
    x, y = nx.parameter([1.0, 2.0]), nx.parameter([5.0])
    nx.backward(nx.sum(x), [x, y])
    np.testing.assert_array_equal(y.grad, [0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        nx.backward(nx.parameter([1.0, 2.0]) * 2.0)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((4, 5))))


def test_fan_out_accumulates_additively():
    x = nx.parameter([3.0])
    y = x * x
    loss = nx.sum(y + y + x)
    nx.backward(loss, [x])
    assert x.grad[0] == pytest.approx(4 * 3.0 + 1)


def test_backward_recomputes_rather_than_accumulates():
    x = nx.parameter([1.0, 2.0])
    for _ in range(3):
        nx.backward(nx.sum(x * x), [x])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_visits_nodes_in_reverse_execution_order():
    order = []
    x = nx.parameter([0.5, -0.2])
    a = nx.exp(x)
    b = nx.mul(a, a)
    c = nx.sum(nx.add(b, a))
    for t, tag in ((a, "a"), (b, "b"), (c, "c")):
        inner = t._backward

        def wrapped(g, inner=inner, tag=tag):
            order.append(tag)
            return inner(g)

        t._backward = wrapped
    nx.backward(c, [x])
    assert order == ["c", "b", "a"]


# invariants --------------------------------------------------------------------------------


@given(seed=st.integers(0, 2**31 - 1), r=st.integers(1, 6), c=st.integers(1, 9), scale=st.floats(1e-3, 50))
def test_softmax_rows_sum_to_one(seed, r, c, scale):
    x = np.random.default_rng(seed).normal(size=(r, c)) * scale
    s = nx.softmax(nx.constant(x)).data.sum(axis=-1)
    assert np.max(np.abs(s - 1.0)) <= 1e-12


@given(seed=st.integers(0, 2**31 - 1), r=st.integers(1, 6), c=st.integers(2, 64), scale=st.floats(1e-2, 100))
def test_layer_norm_standardizes_each_token(seed, r, c, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(r, c)) * scale + rng.normal(size=(r, 1)) * scale
    # the epsilon (1e-10) shifts the variance by eps / var, so nearly constant tokens are excluded
    assume(x.var(axis=-1).min() >= 1e-2)
    y = nx.layer_norm(nx.constant(x), nx.constant(np.ones(c)), nx.constant(np.zeros(c))).data
    assert np.max(np.abs(y.mean(axis=-1))) < 1e-10
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) <= 1e-8


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = nx.parameter(rng.normal(size=(2, 3, 8)))
        ws = [nx.parameter(rng.normal(size=(8, 8)) if i % 2 == 0 else rng.normal(size=8)) for i in range(8)]
        loss = nx.sum(nx.gelu(nx.self_attention(x, *ws, heads=2)))
        nx.backward(loss, [x, *ws])
        return loss.data.copy(), x.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_finite_outputs_on_bounded_inputs():
    x = nx.constant(np.linspace(-30, 30, 24).reshape(2, 3, 4))
    for out in (nx.gelu(x), nx.softmax(x), nx.exp(x), nx.l2_normalize(x), nx.logsumexp(x)):
        assert np.all(np.isfinite(out.data))


def test_pairwise_distance_exact_match_is_zero():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    b[2] = a[1]
    d = nx.pairwise_distance(nx.constant(a), nx.constant(b)).data
    assert d[1, 2] == 0.0


# grad_check -------------------------------------------------------------------------


def test_grad_check_rejects_bad_step():
    x = nx.parameter([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.sum(x * x), [x], step=1e-2)


def test_grad_check_reports_non_finite_with_parameter_index():
    x = nx.parameter([1.0, 1e-6], name="x")
    with np.errstate(invalid="ignore"), pytest.raises(GradCheckError, match=r"x\[1\]"):
        nx.grad_check(lambda: nx.sum(nx.log(x)), [x], step=1e-5)


def test_grad_check_detects_wrong_gradient():
    x = nx.parameter([0.3, -1.2])

    def loss_fn():
        out = nx.exp(x)
        out._backward = lambda g: [g * out.data * 2.0]  # deliberately wrong
        return nx.sum(out)

    err, _ = nx.grad_check(loss_fn, [x])
    assert math.isfinite(err) and err > 0.1
