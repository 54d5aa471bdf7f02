import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calo_opt import autodiff as ad
from calo_opt.harness.validate import random_mlp_graph


def _grad(fn, **point):
    g = ad.Graph(fn, wrt=point)
    out = g.forward(point)
    return out.item(), g.backward()


def test_square_value_and_gradient():
    value, grads = _grad(lambda x: ad.square(x), x=np.array(3.0))
    assert value == 9.0
    assert grads["x"] == pytest.approx(6.0)


def test_elu_negative_branch():
    value, grads = _grad(lambda x: ad.elu(x), x=np.array(-1.0))
    assert value == pytest.approx(np.exp(-1) - 1, abs=1e-12)
    assert grads["x"] == pytest.approx(np.exp(-1), abs=1e-12)


def test_logsumexp_and_softmax_gradient():
    value, grads = _grad(lambda x: ad.logsumexp(x), x=np.zeros(2))
    assert value == pytest.approx(np.log(2))
    np.testing.assert_allclose(grads["x"], [0.5, 0.5])


def test_shape_error_names_node():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_non_finite_output_is_numeric_error():
    with pytest.raises(ad.NumericError, match="log"):
        ad.log(ad.Tensor(np.array([-1.0]), requires_grad=True))


def test_backward_before_forward():
    with pytest.raises(ad.StateError):
        ad.Graph(lambda x: x).backward()


def test_backward_requires_scalar_root():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.exp(x))


def test_grad_check_square():
    assert ad.grad_check(lambda x: ad.square(x), {"x": np.array(3.0)}) < 1e-6


def test_grad_check_constant_graph():
    assert ad.grad_check(lambda x: ad.Tensor(np.array(2.0)), {"x": np.array([1.0, 2.0])}) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.grad_check(lambda x: x, {"x": np.array(1.0)}, step=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_random_mlp(seed):
    fn, point = random_mlp_graph(np.random.default_rng(seed))
    assert ad.grad_check(fn, point) < 1e-4


UNARY = {
    "elu": ad.elu,
    "exp": ad.exp,
    "square": ad.square,
    "softmax": lambda x: ad.mul(ad.softmax(x), ad.Tensor(np.arange(1.0, 5.0))),
    "logsumexp": ad.logsumexp,
    "normal_logpdf": ad.normal_logpdf,
    "affine": lambda x: ad.affine(x, 2.5, -1.0),
    "mean": lambda x: ad.mean(ad.square(x)),
    "ndtr": ad.ndtr,
    "cumsum": lambda x: ad.mul(ad.cumsum(x), ad.Tensor(np.arange(1.0, 5.0))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(1)
    op = UNARY[name]
    for _ in range(100):
        x = rng.uniform(-2, 2, size=4)
        assert ad.grad_check(lambda x: ad.sum(op(x)), {"x": x}) < 1e-4


def test_log_and_binary_primitives():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = rng.uniform(-2, 2, size=(2, 3))
        b = rng.uniform(-2, 2, size=(3, 2))
        c = rng.uniform(-2, 2, size=3)
        p = rng.uniform(0.1, 2, size=3)
        assert ad.grad_check(lambda a, b: ad.sum(ad.matmul(a, b)), {"a": a, "b": b}) < 1e-4
        assert ad.grad_check(lambda a, c: ad.sum(ad.mul(ad.add(a, c), a)), {"a": a, "c": c}) < 1e-4
        assert ad.grad_check(lambda p: ad.sum(ad.log(p)), {"p": p}) < 1e-4
        assert ad.grad_check(lambda a, p: ad.sum(ad.div(a, p)), {"a": a, "p": p}) < 1e-4


def test_broadcast_add_reduces_gradient():
    _, grads = _grad(lambda a, b: ad.sum(ad.add(a, b)), a=np.ones((4, 3)), b=np.ones(3))
    np.testing.assert_array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_batched_matmul_stacks_networks():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(2, 3, 4))
    out = ad.matmul(ad.Tensor(x), ad.Tensor(w))
    np.testing.assert_allclose(out.data[1], x @ w[1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=6))
def test_linearity_of_backward(values):
    x = np.array(values)
    f = lambda x: ad.sum(ad.elu(x))
    g = lambda x: ad.sum(ad.square(x))
    _, gf = _grad(f, x=x)
    _, gg = _grad(g, x=x)
    _, gs = _grad(lambda x: ad.add(f(x), g(x)), x=x)
    np.testing.assert_allclose(gs["x"], gf["x"] + gg["x"], rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_backward_is_deterministic(seed):
    fn, point = random_mlp_graph(np.random.default_rng(seed))
    _, first = _grad(fn, **point)
    _, second = _grad(fn, **point)
    for k in first:
        assert first[k].tobytes() == second[k].tobytes()


def test_paramset_flat_buffer_is_shared():
    params = ad.ParamSet({"a": np.zeros(2), "b": np.ones((2, 2))})
    buf = params.flat()
    buf += 1.0
    np.testing.assert_array_equal(params["b"].data, 2 * np.ones((2, 2)))
    assert params.count() == 6
    assert params.copy().equal(params)
