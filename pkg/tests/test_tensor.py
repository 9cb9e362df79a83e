"""Tape engine unit tests: graph mechanics plus per-primitive gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmjepa import tensor as T
from mmjepa.gradcheck import grad_check
from mmjepa.tensor import GraphError, Parameter, Tensor, backward, tensor, zero_grads


def param(arr, name="p"):
    return Parameter(np.asarray(arr, dtype=np.float64), name=name, dtype=np.float64)


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# construction and graph mechanics
# ---------------------------------------------------------------------------

def test_tensor_rejects_nan():
    with pytest.raises(ValueError):
        tensor(np.array([1.0, np.nan]))


def test_tensor_rejects_inf():
    with pytest.raises(ValueError):
        tensor(np.array([np.inf]))


def test_tensor_rejects_integer_dtype_request():
    with pytest.raises(GraphError):
        tensor(np.array([1, 2]), dtype=np.int64)


def test_backward_requires_scalar():
    p = param([[1.0, 2.0]])
    with pytest.raises(GraphError):
        backward(T.mul(p, p))


def test_backward_accumulates_additively():
    p = param([3.0])
    backward(T.mean(T.mul(p, p)))
    first = p.grad.copy()
    backward(T.mean(T.mul(p, p)))
    np.testing.assert_allclose(p.grad, 2 * first)


def test_zero_grads():
    p = param([2.0])
    backward(T.mean(T.mul(p, p)))
    assert p.grad[0] != 0
    zero_grads([p])
    assert p.grad[0] == 0


def test_diamond_graph_gradient():
    # y = x*x + x*x reuses the same node twice; dy/dx = 4x
    p = param([5.0])
    sq = T.mul(p, p)
    backward(T.mean(T.add(sq, sq)))
    np.testing.assert_allclose(p.grad, [20.0])


def test_no_grad_builds_no_graph():
    p = param([1.0, 2.0])
    with T.no_grad():
        out = T.mul(p, p)
    assert out._parents == ()
    backward(T.mean(out))  # constant loss: documented no-op
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_constant_loss_backward_is_noop():
    c = tensor(np.array(3.0), dtype=np.float64)
    backward(c)  # no parameters anywhere; must simply return


def test_operator_sugar_matches_functions():
    rng = np.random.default_rng(0)
    a = param(rand(rng, 3, 2))
    b = param(rand(rng, 3, 2))
    np.testing.assert_array_equal((a + b).data, T.add(a, b).data)
    np.testing.assert_array_equal((a - b).data, T.sub(a, b).data)
    np.testing.assert_array_equal((a * b).data, T.mul(a, b).data)
    np.testing.assert_array_equal((-a).data, T.neg(a).data)


# ---------------------------------------------------------------------------
# per-primitive gradient checks (f64, central differences)
# ---------------------------------------------------------------------------

TOL = 1e-6


def check(loss_fn, params, tol=TOL):
    err = grad_check(loss_fn, params)
    assert err <= tol, f"gradient error {err:.3e} > {tol}"


def test_grad_add_broadcast():
    rng = np.random.default_rng(1)
    a = param(rand(rng, 4, 3))
    b = param(rand(rng, 3))
    check(lambda: T.mean(T.add(a, b)), [a, b])


def test_grad_sub_broadcast():
    rng = np.random.default_rng(2)
    a = param(rand(rng, 2, 5))
    b = param(rand(rng, 1, 5))
    check(lambda: T.mean(T.sub(a, b)), [a, b])


def test_grad_mul():
    rng = np.random.default_rng(3)
    a = param(rand(rng, 4, 4))
    b = param(rand(rng, 4, 4))
    check(lambda: T.mean(T.mul(a, b)), [a, b])


def test_grad_matmul_batched():
    rng = np.random.default_rng(4)
    a = param(rand(rng, 2, 3, 4))
    b = param(rand(rng, 2, 4, 5))
    check(lambda: T.mean(T.matmul(a, b)), [a, b])


def test_grad_relu():
    rng = np.random.default_rng(5)
    a = param(rand(rng, 6, 6) + 0.05)  # keep clear of the kink
    check(lambda: T.mean(T.relu(a)), [a])


def test_grad_gelu():
    rng = np.random.default_rng(6)
    a = param(rand(rng, 5, 5))
    check(lambda: T.mean(T.gelu(a)), [a])


def test_grad_sigmoid():
    rng = np.random.default_rng(7)
    a = param(rand(rng, 4, 4) * 3)
    check(lambda: T.mean(T.sigmoid(a)), [a])


def test_grad_softmax():
    rng = np.random.default_rng(8)
    a = param(rand(rng, 3, 7))
    w = np.random.default_rng(9).standard_normal((3, 7))
    check(lambda: T.mean(T.mul(T.softmax(a), T.constant(w, np.float64))), [a])


def test_grad_layer_norm():
    rng = np.random.default_rng(10)
    x = param(rand(rng, 4, 8))
    gain = param(rand(rng, 8) + 1.0)
    bias = param(rand(rng, 8))
    w = np.random.default_rng(11).standard_normal((4, 8))
    check(lambda: T.mean(T.mul(T.layer_norm(x, gain, bias), T.constant(w, np.float64))), [x, gain, bias], tol=1e-5)


def test_grad_bce_with_logits():
    rng = np.random.default_rng(12)
    logits = param(rand(rng, 10) * 2)
    targets = (np.random.default_rng(13).random(10) > 0.5).astype(np.float64)
    check(lambda: T.mean(T.bce_with_logits(logits, targets)), [logits])


def test_bce_extreme_logits_stable():
    logits = param([60.0, -60.0])
    targets = np.array([1.0, 0.0])
    loss = T.mean(T.bce_with_logits(logits, targets))
    assert np.isfinite(loss.data)
    assert loss.data >= 0


def test_grad_mean_axis_keepdims():
    rng = np.random.default_rng(14)
    a = param(rand(rng, 3, 4, 5))
    w = np.random.default_rng(15).standard_normal((3, 1, 5))
    check(lambda: T.mean(T.mul(T.mean(a, axis=1, keepdims=True), T.constant(w, np.float64))), [a])


def test_grad_sum_multi_axis():
    rng = np.random.default_rng(16)
    a = param(rand(rng, 2, 3, 4))
    check(lambda: T.mean(T.sum_(a, axis=(0, 2))), [a])


def test_grad_mse():
    rng = np.random.default_rng(17)
    a = param(rand(rng, 5, 3))
    tgt = np.random.default_rng(18).standard_normal((5, 3))
    check(lambda: T.mse(a, tgt), [a])


def test_grad_reshape_transpose():
    rng = np.random.default_rng(19)
    a = param(rand(rng, 4, 6))
    w = np.random.default_rng(20).standard_normal((3, 2, 4))
    check(
        lambda: T.mean(T.mul(T.transpose(T.reshape(a, (4, 3, 2)), (1, 2, 0)), T.constant(w, np.float64))),
        [a],
    )


def test_grad_concat_narrow():
    rng = np.random.default_rng(21)
    a = param(rand(rng, 2, 3))
    b = param(rand(rng, 2, 5))
    check(lambda: T.mean(T.narrow(T.concat([a, b], axis=1), 1, 2, 4)), [a, b])


def test_grad_gather_rows():
    rng = np.random.default_rng(22)
    a = param(rand(rng, 2, 6, 3))
    idx = np.array([[0, 5, 5], [1, 2, 4]])
    check(lambda: T.mean(T.gather_rows(a, idx)), [a])


def test_grad_take_rows_embedding():
    rng = np.random.default_rng(23)
    table = param(rand(rng, 4, 5))
    idx = np.array([[0, 3], [3, 3]])
    check(lambda: T.mean(T.take_rows(table, idx)), [table])


def test_grad_take1d():
    rng = np.random.default_rng(24)
    a = param(rand(rng, 9))
    idx = np.array([8, 0, 0, 4])
    check(lambda: T.mean(T.take1d(a, idx)), [a])


def test_grad_conv2d_stride2_padded():
    rng = np.random.default_rng(25)
    x = param(rand(rng, 2, 3, 8, 8))
    w = param(rand(rng, 4, 3, 3, 3) * 0.5)
    b = param(rand(rng, 4))
    check(lambda: T.mean(T.conv2d(x, w, b, stride=2, padding=1)), [x, w, b], tol=1e-5)


def test_conv2d_channel_mismatch_raises():
    x = tensor(np.zeros((1, 2, 8, 8)), dtype=np.float64)
    w = tensor(np.zeros((4, 3, 3, 3)), dtype=np.float64)
    with pytest.raises(GraphError):
        T.conv2d(x, w)


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(26)
    x = rand(rng, 1, 1, 5, 5)
    w = rand(rng, 1, 1, 3, 3)
    out = T.conv2d(tensor(x, np.float64), tensor(w, np.float64), stride=1, padding=0)
    expect = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expect[i, j] = np.sum(x[0, 0, i:i + 3, j:j + 3] * w[0, 0])
    np.testing.assert_allclose(out.data[0, 0], expect, atol=1e-12)


def test_global_norm():
    a = param([3.0])
    b = param([4.0])
    backward(T.mean(T.add(T.mul(a, T.constant(np.array([1.0]), np.float64)),
                          T.mul(b, T.constant(np.array([1.0]), np.float64)))))
    # grads are both 0.5 after the mean over one element... mean of scalar sum
    n = T.global_norm([a, b])
    np.testing.assert_allclose(n, np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2))


# ---------------------------------------------------------------------------
# randomized composite graphs (hypothesis)
# ---------------------------------------------------------------------------

def _perceptron_setup(seed):
    rng = np.random.default_rng(seed)
    x = T.constant(rand(rng, 4, 6), np.float64)
    w1 = param(rand(rng, 6, 5) * 0.7, "w1")
    b1 = param(rand(rng, 5) * 0.1, "b1")
    w2 = param(rand(rng, 5, 2) * 0.7, "w2")
    b2 = param(rand(rng, 2) * 0.1, "b2")
    tgt = rand(rng, 4, 2)

    def loss_fn():
        h = T.gelu(T.add(T.matmul(x, w1), b1))
        out = T.add(T.matmul(h, w2), b2)
        return T.mse(out, tgt)

    return loss_fn, [w1, b1, w2, b2]


def test_two_layer_perceptron_grad_fixed_seed():
    loss_fn, params = _perceptron_setup(0)
    assert grad_check(loss_fn, params, h=1e-5) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_two_layer_perceptron_grad_randomized(seed):
    # near-zero gradient coordinates turn FD truncation noise into relative
    # error around 1e-5, so the randomized sweep uses the suite-wide bar
    loss_fn, params = _perceptron_setup(seed)
    assert grad_check(loss_fn, params) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_broadcast_unreduction_roundtrip(seed):
    rng = np.random.default_rng(seed)
    full = rand(rng, 3, 4, 5)
    shapes = [(1,), (5,), (4, 1), (1, 5), (3, 1, 1), (1, 4, 5)]
    shape = shapes[seed % len(shapes)]
    small = param(rand(rng, *shape))
    check(lambda: T.mean(T.mul(T.constant(full, np.float64), T.add(small, small))), [small])
