import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usrlab.nn import (
    AdamState,
    Net,
    ParamVector,
    ShapeError,
    adam_step,
    grad_check,
    relative_error,
    sgd_step,
    softmax,
)


def sq_loss(target):
    def fn(y):
        diff = y - target
        return float(np.sum(diff**2)), 2 * diff

    return fn


def test_identity_affine_passes_input_through():
    net = Net([("affine", 3, 3)])
    net.params.block("0.W")[...] = np.eye(3)
    net.params.block("0.b")[...] = 0
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(net.forward(x), x)


def test_softmax_of_equal_logits_is_uniform():
    net = Net([("softmax",)])
    np.testing.assert_allclose(net.forward(np.full(4, 3.7)), [0.25] * 4)


def test_relu():
    np.testing.assert_array_equal(Net([("relu",)]).forward(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_forward_rejects_bad_input():
    net = Net([("affine", 3, 2)])
    with pytest.raises(ShapeError):
        net.forward(np.zeros(4))
    with pytest.raises(ValueError):
        net.forward(np.array([0.0, np.nan, 1.0]))


def test_layer_chain_validation():
    with pytest.raises(ShapeError):
        Net([("affine", 3, 4), ("relu",), ("affine", 5, 2)])
    with pytest.raises(ShapeError):
        Net([("affine", 3, 4), ("softmax",), ("affine", 4, 2)])
    with pytest.raises(ValueError):
        Net([("conv", 3)])


def test_zero_upstream_gives_zero_gradient():
    net = Net([("affine", 5, 4), ("tanh",), ("affine", 4, 3)], seed=3)
    net.forward(np.random.default_rng(0).normal(size=5))
    grad, dx = net.backward(np.zeros(3))
    assert not grad.values.any()
    assert not dx.any()


def test_affine_bias_gradient_equals_upstream():
    net = Net([("affine", 4, 3)], seed=1)
    net.forward(np.ones(4))
    up = np.array([0.3, -2.0, 1.5])
    grad, _ = net.backward(up)
    np.testing.assert_array_equal(grad.block("0.b"), up)


def test_backward_rejects_wrong_upstream_shape():
    net = Net([("affine", 4, 3)])
    net.forward(np.ones(4))
    with pytest.raises(ShapeError):
        net.backward(np.ones(4))


LAYER_MENU = [
    [("affine", 6, 5)],
    [("affine", 6, 5), ("relu",), ("affine", 5, 3)],
    [("affine", 6, 5), ("tanh",), ("affine", 5, 3)],
    [("affine", 6, 5), ("tanh",), ("affine", 5, 4), ("softmax",)],
    [("affine", 6, 8), ("relu",), ("affine", 8, 8), ("relu",), ("affine", 8, 2)],
]


@pytest.mark.parametrize("layers", LAYER_MENU, ids=lambda l: "-".join(e[0] for e in l))
def test_grad_check_random_nets(layers):
    rng = np.random.default_rng(42)
    for trial in range(50):
        net = Net(layers, seed=trial)
        batch = (3,) if trial % 2 else ()
        x = rng.normal(size=batch + (6,))
        target = rng.normal(size=net.forward(x).shape)
        report = grad_check(net, sq_loss(target), x, tolerance=1e-4)
        assert report.passed, (trial, report.errors)


def test_grad_check_one_hot_inputs():
    # the sparse-column fast path in Affine must agree with finite differences
    net = Net([("affine", 20, 7), ("relu",), ("affine", 7, 3)], seed=5)
    x = np.zeros(20)
    x[[2, 13]] = 1.0
    report = grad_check(net, sq_loss(np.arange(3.0)), x)
    assert report.passed, report.errors


def test_grad_check_catches_sign_flipped_bias():
    class Broken(Net):
        def backward(self, upstream, need_input_grad=True):
            grad, dx = super().backward(upstream, need_input_grad)
            grad.block("2.b")[...] *= -1
            return grad, dx

    net = Broken([("affine", 4, 5), ("tanh",), ("affine", 5, 2)], seed=0)
    report = grad_check(net, sq_loss(np.array([3.0, -3.0])), np.ones(4))
    assert not report.passed
    assert report.errors["2.b"] > 1e-4


def test_grad_check_zero_parameter_net_passes():
    net = Net([("relu",)])
    report = grad_check(net, sq_loss(np.zeros(3)), np.array([0.5, -0.2, 1.0]))
    assert report.passed


def test_adam_zero_gradient_leaves_params():
    net = Net([("affine", 3, 2)], seed=0)
    before = net.params.values.copy()
    state = AdamState.for_params(net.params)
    adam_step(net.params, net.params.zeros_like(), state, lr=0.1)
    np.testing.assert_array_equal(net.params.values, before)


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = ParamVector(np.array([1.0, -2.0, 0.5]), [("x", (3,))])
    g = ParamVector(np.array([3.0, -0.01, 100.0]), [("x", (3,))])
    state = AdamState.for_params(p)
    adam_step(p, g, state, lr=0.01)
    np.testing.assert_allclose(p.values - [1.0, -2.0, 0.5], -0.01 * np.sign(g.values), rtol=1e-5)


def test_adam_minimizes_parabola():
    p = ParamVector(np.array([1.0]), [("p", (1,))])
    state = AdamState.for_params(p)
    for _ in range(2000):
        adam_step(p, ParamVector(2 * p.values, [("p", (1,))]), state, lr=0.01)
    assert abs(p.values[0]) < 1e-3


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = ParamVector(rng.normal(size=50), [("a", (50,))])
    ref = p.values.copy()
    m = np.zeros(50)
    v = np.zeros(50)
    state = AdamState.for_params(p)
    for t in range(1, 30):
        g = rng.normal(size=50)
        adam_step(p, ParamVector(g, [("a", (50,))]), state, lr=0.003)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.003 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.values, ref, rtol=1e-12, atol=1e-14)


def test_adam_is_deterministic():
    rng = np.random.default_rng(1)
    g = ParamVector(rng.normal(size=10), [("a", (10,))])
    outs = []
    for _ in range(2):
        p = ParamVector(np.linspace(0, 1, 10), [("a", (10,))])
        state = AdamState.for_params(p)
        for _ in range(5):
            adam_step(p, g, state, 0.01)
        outs.append(p.values.tobytes())
    assert outs[0] == outs[1]


def test_optimizer_errors():
    p = ParamVector(np.zeros(2), [("a", (2,))])
    with pytest.raises(ShapeError):
        adam_step(p, ParamVector(np.zeros(2), [("b", (2,))]), AdamState.for_params(p), 0.1)
    with pytest.raises(FloatingPointError):
        adam_step(p, ParamVector(np.array([1.0, np.inf]), [("a", (2,))]), AdamState.for_params(p), 0.1)
    with pytest.raises(ValueError):
        sgd_step(p, p.zeros_like(), None, 0.0)


def test_sgd_step():
    p = ParamVector(np.array([1.0, 2.0]), [("a", (2,))])
    sgd_step(p, ParamVector(np.array([1.0, -1.0]), [("a", (2,))]), None, 0.5)
    np.testing.assert_array_equal(p.values, [0.5, 2.5])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    p = softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12


def test_forward_is_pure():
    net = Net(LAYER_MENU[3], seed=9)
    x = np.linspace(-1, 1, 6)
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] < 1e-2
