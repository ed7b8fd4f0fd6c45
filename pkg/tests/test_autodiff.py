import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdhybrid import autodiff as ad
from pdhybrid.autodiff import ShapeError, Tape, TapeError, Tensor
from pdhybrid.gradcheck import OP_ATOL, OP_RTOL, check_function, op_checks
from pdhybrid.optim import OptimizerState, optimizer_step


def grads_of(fn, *arrays):
    ts = [Tensor(np.asarray(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    ad.backward(out, tape)
    return [t.grad for t in ts]


def loop_conv(x, w, b, stride, padding):
    B, cin, L = x.shape
    cout, _, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    lout = (L + 2 * padding - K) // stride + 1
    y = np.zeros((B, cout, lout))
    for n in range(B):
        for o in range(cout):
            for t in range(lout):
                acc = b[o]
                for c in range(cin):
                    for k in range(K):
                        acc += w[o, c, k] * xp[n, c, t * stride + k]
                y[n, o, t] = acc
    return y


# ---------------------------------------------------------------- conv1d

def test_conv1d_hand_counted_overlap():
    y = ad.conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 3))), Tensor(np.zeros(1)), 1, 1)
    assert y.data.tolist() == [[[2.0, 3.0, 3.0, 2.0]]]


def test_conv1d_zero_kernel(rng):
    y = ad.conv1d(Tensor(rng.standard_normal((2, 3, 9))), Tensor(np.zeros((4, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert np.all(y.data == 0)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (3, 2)])
def test_conv1d_matches_loop_oracle(rng, stride, padding):
    x, w, b = rng.standard_normal((2, 3, 16)), rng.standard_normal((5, 3, 3)), rng.standard_normal(5)
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(y.data, loop_conv(x, w, b, stride, padding), atol=1e-12, rtol=0)


def test_conv1d_shape_errors_name_dimension():
    with pytest.raises(ShapeError, match="in_channels"):
        ad.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(ShapeError, match="kernel_size"):
        ad.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))))


def test_conv1d_skips_input_gradient_for_constants(rng):
    x = Tensor(rng.standard_normal((2, 3, 8)))
    w = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.conv1d(x, w, None, 1, 1))
    ad.backward(loss, tape)
    assert x.grad is None and w.grad is not None


# ---------------------------------------------------------------- maxpool

def test_maxpool_example():
    y = ad.maxpool1d(Tensor(np.array([[[1.0, 3, 2, 4]]])), 2, 2)
    assert y.data.tolist() == [[[3.0, 4.0]]]


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (3, 3)])
def test_maxpool_ties_route_to_first_element(window, stride):
    (g,) = grads_of(lambda x: ad.sum_all(ad.maxpool1d(x, window, stride)), np.full((1, 1, 9), 2.0))
    lout = (9 - window) // stride + 1
    expected = np.zeros(9)
    for t in range(lout):
        expected[t * stride] += 1
    np.testing.assert_array_equal(g[0, 0], expected)


def test_five_pools_take_512_to_16():
    x = Tensor(np.zeros((1, 2, 512)))
    for _ in range(5):
        x = ad.maxpool1d(x, 2, 2)
    assert x.shape == (1, 2, 16)


# ---------------------------------------------------------------- linear

def test_linear_identity_and_bias_broadcast(rng):
    x = rng.standard_normal((3, 5))
    assert np.array_equal(ad.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x)
    b = rng.standard_normal(4)
    y = ad.linear(Tensor(x), Tensor(np.zeros((4, 5))), Tensor(b)).data
    assert np.array_equal(y, np.broadcast_to(b, (3, 4)))


def test_linear_matches_double_loop(rng):
    x, w, b = rng.standard_normal((4, 250)), rng.standard_normal((7, 250)), rng.standard_normal(7)
    ref = np.zeros((4, 7))
    for i in range(4):
        for j in range(7):
            ref[i, j] = b[j] + sum(x[i, k] * w[j, k] for k in range(250))
    np.testing.assert_allclose(ad.linear(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- activations, softmax

def test_activation_fixed_points():
    assert ad.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    assert ad.tanh(Tensor(np.array([0.0]))).data[0] == 0.0
    assert np.all(ad.relu(Tensor(-np.array([0.1, 1.0, 5.0]))).data == 0)
    with pytest.raises(ValueError):
        ad.activation(Tensor(np.zeros(2)), "gelu")


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_activation_gradient_within_1e6_absolute(kind, rng):
    x = rng.uniform(-3, 3, size=(5, 7))
    x[np.abs(x) < 1e-3] = 0.5
    res = check_function(kind, lambda t: ad.sum_all(ad.mul(ad.activation(t, kind), np.cos(np.arange(7)))),
                         [x], rtol=0.0, atol=1e-6)
    assert res.passed, res.line()


def test_softmax_examples():
    u = ad.softmax(Tensor(np.zeros(16))).data
    assert np.all(u == 1 / 16)
    np.testing.assert_allclose(ad.softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75], atol=1e-15)
    big = ad.softmax(Tensor(np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 20)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-30, 30)))
def test_sigmoid_strictly_inside_unit_interval(x):
    y = ad.sigmoid(Tensor(x)).data
    assert np.all((y > 0) & (y < 1))


# ---------------------------------------------------------------- dropout

def test_dropout_identities(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert ad.dropout(x, 0.5, False, rng).data is x.data
    assert ad.dropout(x, 0.0, True, rng).data is x.data
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)


def test_dropout_survivor_fraction():
    y = ad.dropout(Tensor(np.ones(10 ** 6)), 0.5, True, np.random.default_rng(5)).data
    frac = np.mean(y != 0)
    assert abs(frac - 0.5) <= 0.002
    assert np.all((y == 0) | (y == 2.0))


# ---------------------------------------------------------------- recurrent cells

def test_gru_zero_weights():
    H, D = 4, 3
    p = ad.GruParams(Tensor(np.zeros((3 * H, D))), Tensor(np.zeros((3 * H, H))), Tensor(np.zeros(3 * H)))
    x = Tensor(np.ones((2, D)))
    assert np.all(ad.gru_cell(x, Tensor(np.zeros((2, H))), p).data == 0)
    v = np.arange(8.0).reshape(2, H)
    np.testing.assert_array_equal(ad.gru_cell(x, Tensor(v), p).data, 0.5 * v)


def test_gru_matches_reference_equations(rng):
    H, D = 3, 2
    wx, wh, b = rng.standard_normal((3 * H, D)), rng.standard_normal((3 * H, H)), rng.standard_normal(3 * H)
    x, h = rng.standard_normal((1, D)), rng.standard_normal((1, H))
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    z = sig(wx[:H] @ x[0] + wh[:H] @ h[0] + b[:H])
    r = sig(wx[H:2 * H] @ x[0] + wh[H:2 * H] @ h[0] + b[H:2 * H])
    n = np.tanh(wx[2 * H:] @ x[0] + b[2 * H:] + r * (wh[2 * H:] @ h[0]))
    ref = (1 - z) * n + z * h[0]
    out = ad.gru_cell(Tensor(x), Tensor(h), ad.GruParams(Tensor(wx), Tensor(wh), Tensor(b))).data[0]
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_lstm_zero_and_saturated_gates():
    H, D = 3, 2
    zeros = ad.LstmParams(Tensor(np.zeros((4 * H, D))), Tensor(np.zeros((4 * H, H))), Tensor(np.zeros(4 * H)))
    h, c = ad.lstm_cell(Tensor(np.zeros((1, D))), Tensor(np.zeros((1, H))), Tensor(np.zeros((1, H))), zeros)
    assert np.all(h.data == 0) and np.all(c.data == 0)
    b = np.zeros(4 * H)
    b[:H] = -1e3        # input gate closed
    b[H:2 * H] = 1e3    # forget gate open
    sat = ad.LstmParams(Tensor(np.zeros((4 * H, D))), Tensor(np.zeros((4 * H, H))), Tensor(b))
    c0 = np.array([[0.3, -1.2, 2.0]])
    _, c1 = ad.lstm_cell(Tensor(np.ones((1, D))), Tensor(np.ones((1, H))), Tensor(c0), sat)
    np.testing.assert_array_equal(c1.data, c0)


# ---------------------------------------------------------------- loss

def test_bce_examples():
    one = ad.bce_loss(Tensor(np.array([1 - 1e-7])), np.array([1.0])).data
    assert one < 2e-7
    half = ad.bce_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0])).data
    assert abs(float(half) - math.log(2)) <= 1e-12
    with pytest.raises(ValueError):
        ad.bce_loss(Tensor(np.zeros(0)), np.zeros(0))


def test_bce_matches_direct_summation(rng):
    for _ in range(100):
        n = int(rng.integers(1, 40))
        p = rng.uniform(1e-3, 1 - 1e-3, n)
        y = rng.integers(0, 2, n).astype(float)
        direct = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / n
        assert abs(float(ad.bce_loss(Tensor(p), y).data) - direct) <= 1e-12


# ---------------------------------------------------------------- tape semantics

def test_sum_gives_unit_gradient_and_reuse_accumulates(rng):
    x = rng.standard_normal((3, 4))
    (g,) = grads_of(ad.sum_all, x)
    assert np.all(g == 1)
    (g2,) = grads_of(lambda t: ad.sum_all(ad.add(t, t)), x)
    assert np.all(g2 == 2)


def test_double_backward_errors_cleanly():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(w, w))
    ad.backward(loss, tape)
    with pytest.raises(TapeError):
        ad.backward(loss, tape)
    with pytest.raises(TapeError):
        with tape:
            ad.mul(w, 2.0)


def test_backward_rejects_non_scalar_and_foreign_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(w, 2.0)
    with pytest.raises(TapeError):
        ad.backward(y, tape)
    with Tape() as other:
        loss = ad.sum_all(w)
    with pytest.raises(TapeError):
        ad.backward(loss, tape)
    ad.backward(loss, other)


def test_ops_outside_tape_do_not_record():
    w = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(w, 2.0)
    assert not y.requires_grad and y.tape_id is None


def test_gradients_bitwise_deterministic(rng):
    x, w = rng.standard_normal((2, 3, 10)), rng.standard_normal((4, 3, 3))

    def f(a, b):
        return ad.sum_all(ad.tanh(ad.maxpool1d(ad.conv1d(a, b, None, 1, 1), 2, 2)))
    g1, g2 = grads_of(f, x, w), grads_of(f, x, w)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_backward_linear_in_node_count():
    import time

    def timed(n):
        w = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            h = w
            for _ in range(n):
                h = ad.mul(h, 1.0)
            loss = ad.sum_all(h)
        t = time.perf_counter()
        ad.backward(loss, tape)
        return time.perf_counter() - t

    timed(500)
    small, large = min(timed(2000) for _ in range(3)), min(timed(8000) for _ in range(3))
    assert large < 12 * small


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(ad.add(x, 1.0), 0.5))
    ad.backward(loss, tape)
    assert loss.data.dtype == np.float32 and x.grad.dtype == np.float32


# ---------------------------------------------------------------- finite differences

@pytest.mark.parametrize("result", op_checks(seed=0), ids=lambda r: r.name)
def test_every_op_passes_finite_differences(result):
    assert result.passed, result.line()


@given(st.integers(0, 2 ** 31 - 1))
def test_conv_gradient_random_instances(seed):
    r = np.random.default_rng(seed)
    B, cin, cout, L = (int(v) for v in r.integers(1, 4, 4))
    L += 4
    res = check_function("conv", lambda x, w, b: ad.sum_all(ad.mul(ad.conv1d(x, w, b, 1, 1),
                                                                   np.sin(np.arange(L)))),
                         [r.standard_normal((B, cin, L)), r.standard_normal((cout, cin, 3)),
                          r.standard_normal(cout)], OP_RTOL, OP_ATOL, max_entries=20, seed=seed)
    assert res.passed, res.line()


# ---------------------------------------------------------------- optimizers

def test_adam_zero_gradient_leaves_parameters():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    st_ = OptimizerState("adam", 0.1)
    for _ in range(3):
        optimizer_step([w], st_)
    assert w.data.tolist() == [1.0, -2.0]


def test_adam_solves_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimizerState("adam", 0.1)
    for _ in range(500):
        with Tape() as tape:
            d = ad.sub(w, 3.0)
            loss = ad.sum_all(ad.mul(d, d))
        ad.backward(loss, tape)
        optimizer_step([w], state)
    assert abs(w.data[0] - 3.0) < 1e-2


def test_sgd_single_step_exact(rng):
    w0, g = rng.standard_normal(5), rng.standard_normal(5)
    w = Tensor(w0.copy(), requires_grad=True)
    w.grad = g.copy()
    optimizer_step([w], OptimizerState("sgd", 0.03))
    assert np.array_equal(w.data, w0 - 0.03 * g)
    assert np.all(w.grad == 0)


def test_optimizer_rejects_missing_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        optimizer_step([w], OptimizerState())
