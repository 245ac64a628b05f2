import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msdyn import autodiff as ad
from msdyn.autodiff import GradientError, OptimizerState, ShapeError, Tape, finite_difference, optimizer_step

from conftest import rel_err


def grad_and_fd(fn, x):
    tape = Tape()
    t = tape.leaf(x, "x")
    out = fn(t)
    g = tape.backward(out)["x"]
    fd = finite_difference(lambda v: float(fn(ad.Tensor(v)).value), x)
    return g, fd


def test_sigmoid_zero():
    assert ad.sigmoid(0.0).value == 0.5


def test_matmul_identity():
    x = np.array([0.3, -1.7])
    assert np.array_equal(ad.matmul(np.eye(2), x).value, x)


def test_sigmoid_derivative_at_zero():
    g, fd = grad_and_fd(lambda t: ad.sigmoid(t), np.array(0.0))
    assert abs(g - 0.25) < 1e-15
    assert abs(fd - 0.25) < 1e-8


def test_quadratic_gradient():
    tape = Tape()
    th = tape.leaf([1.0, 2.0], "theta")
    g = tape.backward(ad.tsum(th * th))["theta"]
    assert np.array_equal(g, [2.0, 4.0])


def test_two_step_composition_gradient():
    def loss(th):
        return ad.square(th * th * 1.0 - 0.3)

    g, fd = grad_and_fd(loss, np.array(0.5))
    assert abs(g - (-0.1)) < 1e-12
    assert abs(fd - (-0.1)) < 1e-9


def test_detached_gradient_differs():
    # composed: d/dth (th * th * s - o)^2 ; detached: inner prediction treated as data
    th0, s, o = 0.5, 1.0, 0.3
    tape = Tape()
    th = tape.leaf(th0, "th")
    composed = tape.backward(ad.square(th * (th * s) - o))["th"]
    tape = Tape()
    th = tape.leaf(th0, "th")
    detached = tape.backward(ad.square(th * ad.detach(th * s) - o))["th"]
    assert composed == pytest.approx(2 * (th0 ** 2 * s - o) * 2 * th0 * s)
    assert detached == pytest.approx(2 * (th0 ** 2 * s - o) * th0 * s)
    assert composed != detached


def test_non_scalar_root():
    tape = Tape()
    x = tape.leaf([1.0, 2.0], "x")
    with pytest.raises(GradientError):
        tape.backward(x * 2.0)


def test_shape_error_names_shapes():
    with pytest.raises(ShapeError) as e:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(e.value)
    with pytest.raises(ShapeError):
        ad.add(np.ones(3), np.ones(4))


def test_sgd_step():
    p = {"w": np.array(1.0)}
    optimizer_step(OptimizerState("sgd", lr=0.1), p, {"w": np.array(2.0)})
    assert p["w"] == pytest.approx(0.8)


def test_adam_first_step():
    p = {"w": np.array(1.0)}
    optimizer_step(OptimizerState("adam", lr=0.001), p, {"w": np.array(1.0)})
    assert p["w"] == pytest.approx(0.999, abs=1e-8)


def test_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    for kind in ("sgd", "adam"):
        optimizer_step(OptimizerState(kind), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_nonfinite_gradient_names_parameter():
    with pytest.raises(GradientError, match="bias"):
        optimizer_step(OptimizerState("adam"), {"bias": np.zeros(1)}, {"bias": np.array([np.nan])})


def test_tape_topological_order():
    tape = Tape()
    x = tape.leaf(np.ones(3), "x")
    y = ad.tsum(ad.tanh(x) * x)
    tape.backward(y)
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_gaussian_sample_reparametrized():
    tape = Tape()
    mu = tape.leaf(np.zeros(4), "mu")
    sig = tape.leaf(np.full(4, 2.0), "sig")
    rng = np.random.default_rng(0)
    y = ad.gaussian_sample(mu, sig, rng)
    xi = np.random.default_rng(0).standard_normal(4)
    g = tape.backward(ad.tsum(y))
    assert np.allclose(y.value, 2.0 * xi)
    assert np.array_equal(g["mu"], np.ones(4))
    assert np.allclose(g["sig"], xi)


def test_dropout_seeded_and_eval_identity():
    x = np.arange(10.0)
    a = ad.dropout(x, 0.5, np.random.default_rng(3)).value
    b = ad.dropout(x, 0.5, np.random.default_rng(3)).value
    assert np.array_equal(a, b)
    assert np.array_equal(ad.dropout(x, 0.5, None, training=False).value, x)


UNARY = {
    "tanh": ad.tanh, "sigmoid": ad.sigmoid, "square": ad.square, "exp": ad.exp,
    "log": lambda t: ad.log(ad.square(t) + 0.5), "sqrt": lambda t: ad.sqrt(ad.square(t) + 0.5),
    "sum": lambda t: ad.tsum(t * t, axis=0), "mean": lambda t: ad.mean(ad.tanh(t), axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    w = rng.uniform(0.5, 2, size=(3, 4))
    for _ in range(20):
        x = rng.uniform(-2, 2, size=(3, 4))
        g, fd = grad_and_fd(lambda t: ad.tsum(UNARY[name](t) * w[:, 0].sum()), x)
        assert rel_err(g, fd) < 1e-5


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul"])
def test_binary_ops_match_finite_differences(op, rng):
    for _ in range(20):
        a = rng.uniform(-2, 2, size=(3, 4))
        b = rng.uniform(-2, 2, size=(4, 2)) if op == "matmul" else rng.uniform(0.5, 2, size=(4,))
        f = getattr(ad, op)
        for which in (0, 1):
            def fn(t):
                out = f(t, b) if which == 0 else f(a, t)
                return ad.tsum(ad.tanh(out))
            x = a if which == 0 else b
            g, fd = grad_and_fd(fn, x)
            assert rel_err(g, fd) < 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-2, 2)))
def test_deterministic_evaluation(x):
    def run():
        tape = Tape()
        t = tape.leaf(x, "x")
        y = ad.tsum(ad.sigmoid(t) * ad.tanh(t))
        return y.value, tape.backward(y)["x"]

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and np.array_equal(g1, g2)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.1, 2.0), st.integers(1, 3))
def test_recursive_chain_rule(theta, s, k):
    # f_k(theta) = theta^k * s, so d/dtheta = k theta^(k-1) s
    tape = Tape()
    th = tape.leaf(theta, "th")
    x = ad.as_tensor(s)
    for _ in range(k):
        x = th * x
    g = tape.backward(x)["th"]
    assert g == pytest.approx(k * theta ** (k - 1) * s, rel=1e-12, abs=1e-14)
