import numpy as np
import pytest

from ibpcl import autodiff as ad
from ibpcl.autodiff import NumericError, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_hand_example():
    out = ad.constant([[1.0, 2.0], [3.0, 4.0]]) @ ad.constant([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_sigmoid_and_softplus_values():
    assert ad.sigmoid(ad.constant(0.0)).item() == 0.5
    # reference from a 50-digit log1p(exp(-50))
    assert ad.softplus(ad.constant(-50.0)).item() == pytest.approx(1.928749847963917783e-22, rel=1e-14)
    assert ad.softplus(ad.constant(800.0)).item() == 800.0


def test_square_gradient():
    x = leaf(3.0)
    ad.backward(x * x)
    assert x.grad == 6.0


def test_chain_rule_through_sigmoid():
    w = leaf(0.0)
    ad.backward(ad.sigmoid(w * 2.0))
    assert w.grad == pytest.approx(0.5)


def test_fan_out_accumulates():
    x = leaf(2.0)
    y = x * 3.0
    ad.backward(y + y * x)  # 3x + 3x^2 -> 3 + 6x
    assert x.grad == pytest.approx(15.0)


def test_loss_gradient_is_one_and_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    loss = ad.sum(x)
    ad.backward(loss)
    assert loss.grad == 1.0
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="add"):
        ad.constant(np.ones((2, 3))) + ad.constant(np.ones((3, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.constant(np.ones((2, 3))) @ ad.constant(np.ones((2, 3)))


def test_non_finite_raises():
    with pytest.raises(NumericError):
        ad.log(ad.constant(-1.0))
    with pytest.raises(NumericError):
        ad.exp(ad.constant(1000.0))


def test_parents_precede_children():
    x = leaf(1.0)
    y = ad.exp(x)
    z = y * x
    assert x.id < y.id < z.id


UNARY = [ad.exp, ad.sigmoid, ad.softplus, ad.log_sigmoid, lambda t: t * t, ad.neg, lambda t: ad.power(t, 2.0)]
BINARY = [ad.add, ad.sub, ad.mul, lambda a, b: a / (ad.softplus(b) + 0.5)]


def _random_graph(rng):
    """A random expression of at most 5 ops over two 2x3 inputs."""
    def build(a, b):
        t = a
        for _ in range(rng.integers(1, 5)):
            if rng.random() < 0.5:
                t = UNARY[rng.integers(len(UNARY))](t)
            else:
                t = BINARY[rng.integers(len(BINARY))](t, b)
        return ad.sum(t)
    return build


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        ops_rng = np.random.default_rng(rng.integers(1 << 30))
        xa, xb = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))
        seed = ops_rng.integers(1 << 30)

        def f(a, b):
            return _random_graph(np.random.default_rng(seed))(a, b)

        a, b = leaf(xa), leaf(xb)
        ga, gb = ad.grad(f(a, b), [a, b])
        na = ad.numeric_grad(lambda: f(ad.constant(xa), ad.constant(xb)).item(), xa)
        nb = ad.numeric_grad(lambda: f(ad.constant(xa), ad.constant(xb)).item(), xb)
        worst = max(worst, ad.relative_error(ga, na, 1e-6), ad.relative_error(gb, nb, 1e-6))
    assert worst < 1e-4


def test_linearity_of_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-2, 2, 4)
    f = lambda t: ad.sum(ad.exp(t) * t)  # noqa: E731
    g = lambda t: ad.sum(ad.sigmoid(t * 3.0))  # noqa: E731
    x = leaf(x0)
    (combined,) = ad.grad(f(x) * 2.5 + g(x) * -0.7, [x])
    y, z = leaf(x0), leaf(x0)
    (gf,) = ad.grad(f(y), [y])
    (gg,) = ad.grad(g(z), [z])
    np.testing.assert_allclose(combined, 2.5 * gf - 0.7 * gg, rtol=1e-13, atol=1e-15)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(3, 3))

    def run():
        x = leaf(x0)
        ad.backward(ad.sum(ad.softplus(x @ x) * ad.sigmoid(x)))
        return x.grad

    assert np.array_equal(run(), run())


def test_scalar_broadcast_gradient_sums():
    s = leaf(2.0)
    ad.backward(ad.sum(ad.constant(np.ones((2, 3))) * s))
    assert s.grad == 6.0


def test_colmax_routes_gradient_to_argmax():
    x = leaf([[0.1, 0.9], [0.7, 0.2]])
    ad.backward(ad.sum(ad.colmax(x)))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_categorical_loglik_matches_log_softmax():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    y = np.array([1, 2])
    expected = sum(logits[i, y[i]] - np.log(np.exp(logits[i]).sum()) for i in range(2))
    assert ad.categorical_loglik(ad.constant(logits), y).item() == pytest.approx(expected, rel=1e-14)


def test_gradcheck_suites_pass():
    from ibpcl import gradcheck

    summary = gradcheck.summarize(gradcheck.primitive_checks())
    for err, tol in summary.values():
        assert err < tol
