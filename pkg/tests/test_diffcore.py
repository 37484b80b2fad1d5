import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zol import diffcore as dc
from zol.diffcore import AdamState, Graph, Mlp, adam_step, clip_grad_norm, eval_scalar
from zol.errors import NumericError, ShapeError

from .oracles import central_difference, random_composite


def test_softplus_zero():
    value, _ = eval_scalar(Graph(), lambda g: dc.softplus(g.const(0.0)))
    assert value == pytest.approx(math.log(2.0), abs=1e-15)


def test_dot():
    value, _ = eval_scalar(Graph(), lambda g: dc.dot(g.const([1.0, 2.0]), g.const([3.0, 4.0])))
    assert value == 11.0


def test_mean_square():
    value, _ = eval_scalar(Graph(), lambda g: dc.mean(dc.square(g.const([1.0, -1.0, 3.0]))))
    assert value == pytest.approx(11.0 / 3.0, abs=1e-15)


def test_square_gradient():
    g = Graph()
    x = g.param(3.0)
    assert g.backward(dc.square(x))[0] == pytest.approx(6.0)


def test_softplus_gradient_at_zero():
    g = Graph()
    x = g.param(0.0)
    assert g.backward(dc.softplus(x))[0] == pytest.approx(0.5)


def test_backward_rejects_non_scalar():
    g = Graph()
    x = g.param([1.0, 2.0])
    with pytest.raises(ShapeError):
        g.backward(x * 2.0)


def test_eval_scalar_rejects_vector():
    with pytest.raises(ShapeError):
        eval_scalar(Graph(), lambda g: g.const([1.0, 2.0]))


def test_division_by_zero():
    g = Graph()
    with pytest.raises(NumericError):
        dc.div(g.param(1.0), 0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate():
    g = Graph()
    x = g.param(1e308)
    with pytest.raises(NumericError):
        x * 10.0


def test_topological_order_and_adjoints():
    g = Graph()
    x = g.param([0.5, -1.0])
    loss = dc.mean(dc.tanh(x * x))
    for i, parents in enumerate(g.parents):
        assert all(p < i for p in parents)
    assert all(a is None for a in g.adjoints)
    g.backward(loss)
    assert all(a is not None and a.shape == v.shape for a, v in zip(g.adjoints, g.values))


PRIMITIVES = {
    "add": lambda x, y: dc.vsum(x + y),
    "sub": lambda x, y: dc.vsum(x - y),
    "mul": lambda x, y: dc.vsum(x * y),
    "div": lambda x, y: dc.vsum(x / (y * y + 1.0)),
    "dot": lambda x, y: dc.dot(x, y),
    "matvec": lambda x, y: dc.dot(dc.matvec(_MAT, x), y),
    "concat": lambda x, y: dc.dot(dc.concat([x, y]), np.arange(8.0)),
    "matmul": lambda x, y: dc.vsum(dc.tanh(dc.matmul(np.ones((3, 1)) * x, _MAT.T))),
    "tanh": lambda x, y: dc.vsum(dc.tanh(x) * y),
    "relu": lambda x, y: dc.vsum(dc.relu(x) * y),
    "softplus": lambda x, y: dc.vsum(dc.softplus(x) * y),
    "square": lambda x, y: dc.vsum(dc.square(x) * y),
    "mean": lambda x, y: dc.mean(x * y),
    "min": lambda x, y: dc.vsum(dc.minimum(x, 0.3) * y),
    "l2norm": lambda x, y: dc.l2norm(x) * dc.vsum(y),
}


_MAT = np.random.default_rng(7).normal(size=(4, 4))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=4)
        if name in ("relu", "min"):
            x0 = np.where(np.abs(x0 - (0.3 if name == "min" else 0.0)) < 1e-3, 0.7, x0)
        y0 = rng.normal(size=4)

        def f(flat):
            g = Graph()
            return float(op(g.const(flat[:4]), g.const(flat[4:])).value)

        g = Graph()
        x, y = g.param(x0), g.param(y0)
        grads = g.backward(op(x, y))
        analytic = np.concatenate(grads)
        numeric = central_difference(f, np.concatenate([x0, y0]), 1e-5)
        err = np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric)))
        worst = max(worst, err)
    assert worst < 1e-4


def test_random_composites_match_finite_differences():
    for seed in range(50):
        build, x0 = random_composite(np.random.default_rng(seed), n_params=5)
        g = Graph()
        params = [g.param(v) for v in x0]
        analytic = np.array([float(a) for a in g.backward(build(params))])

        def f(flat):
            gg = Graph()
            return float(build([gg.const(v) for v in flat]).value)

        numeric = central_difference(f, x0, 1e-5)
        rel = np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric)))
        assert rel < 1e-4, seed


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_is_linear_in_the_loss(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=3)

    def grads(ca, cb):
        g = Graph()
        x = g.param(x0)
        l1 = dc.vsum(dc.tanh(x) * x)
        l2 = dc.mean(dc.softplus(x * 2.0))
        return g.backward(l1 * ca + l2 * cb)[0]

    combined = grads(a, b)
    assert np.allclose(combined, a * grads(1.0, 0.0) + b * grads(0.0, 1.0), atol=1e-10, rtol=0)


def test_mlp_build_matches_numpy_forward():
    rng = np.random.default_rng(0)
    for out_act in ("identity", "l2-normalize"):
        net = Mlp.init([3, 8, 4], rng, "tanh", out_act)
        x = rng.normal(size=(5, 3))
        g = Graph()
        assert np.allclose(net.build(g, x).value, net(x), atol=1e-14)


def test_mlp_parameter_gradients():
    rng = np.random.default_rng(1)
    net = Mlp.init([3, 6, 2], rng, "tanh", "l2-normalize")
    x = rng.normal(size=(4, 3))
    g = Graph()
    params = [g.param(p) for p in net.parameters()]
    loss = dc.vsum(dc.square(net.build(g, x, params)) * np.arange(8.0).reshape(4, 2))
    analytic = np.concatenate([a.ravel() for a in g.backward(loss)])

    def f(flat):
        m = net.copy()
        m.set_flat(flat)
        return float(np.sum(m(x) ** 2 * np.arange(8.0).reshape(4, 2)))

    numeric = central_difference(f, net.get_flat(), 1e-5)
    assert np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric))) < 1e-4


def test_mlp_init_bounds_and_shapes():
    rng = np.random.default_rng(2)
    net = Mlp.init([10, 20, 5], rng)
    for w in net.weights:
        bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= bound)
    assert all(np.all(b == 0) for b in net.biases)
    flat = net.get_flat()
    other = net.copy()
    other.set_flat(flat)
    assert np.array_equal(other.get_flat(), flat)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(adam_step(p, np.zeros(3), AdamState.zeros(3), 0.1), p)


def test_adam_first_step_moves_by_lr():
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    new = adam_step(p, g, AdamState.zeros(3), 0.01)
    assert np.allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_step_count_and_determinism():
    state_a, state_b = AdamState.zeros(2), AdamState.zeros(2)
    p = np.array([1.0, 2.0])
    g = np.array([0.3, -0.1])
    assert np.array_equal(adam_step(p, g, state_a, 0.1), adam_step(p, g, state_b, 0.1))
    assert state_a.step_count == 1


def test_adam_minimizes_quadratic():
    x = np.zeros(1)
    state = AdamState.zeros(1)
    for _ in range(100):
        x = adam_step(x, 2.0 * (x - 2.0), state, 0.1)
    assert abs(x[0] - 2.0) < 0.05
    assert state.step_count == 100


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2), 0.1)


@pytest.mark.parametrize("grad,expected", [
    ([0.3, 0.4], [0.3, 0.4]),
    ([3.0, 4.0], [0.6, 0.8]),
    ([0.0, 0.0], [0.0, 0.0]),
])
def test_clip_grad_norm(grad, expected):
    assert np.allclose(clip_grad_norm(np.array(grad), 1.0), expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 10.0))
def test_clip_grad_norm_bound(grad, c):
    out = clip_grad_norm(np.array(grad), c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
