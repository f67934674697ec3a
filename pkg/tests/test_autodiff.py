import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatlab.autodiff import (AutodiffError, Graph, NonFiniteError, ShapeError, Tensor, backward, finite_diff_check,
                             finite_diff_errors, forward, rowwise_matmul, value_and_grad)
from fatlab.models import ModelSpec, init_params, model_forward

import oracles


def square_graph():
    g = Graph()
    x = g.input("x")
    g.set_output("y", g.sum(x * x))
    return g


def test_square_forward_and_backward():
    g = square_graph()
    assert forward(g, {"x": 3.0})["y"].item() == 9.0
    assert backward(g, "y")["x"].item() == 6.0


def test_uniform_softmax_ce_is_ln2():
    g = Graph()
    g.set_output("ce", g.sum(g.softmax_ce(g.input("z"), g.input("y"))))
    out = forward(g, {"z": np.zeros((1, 2)), "y": np.array([0])})
    assert out["ce"].item() == pytest.approx(math.log(2), abs=1e-15)


def test_matmul_by_hand():
    g = Graph()
    g.set_output("c", g.matmul(g.input("a"), g.input("b")))
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
    c = forward(g, {"a": a, "b": b})["c"].data
    assert c.tolist() == [[58.0, 64.0], [139.0, 154.0]]


def test_softmax_ce_gradient_closed_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    g = Graph()
    g.set_output("ce", g.sum(g.softmax_ce(g.input("z"), g.input("y"))))
    forward(g, {"z": z, "y": y})
    expected = oracles.softmax_rows(z)
    expected[np.arange(5), y] -= 1.0
    np.testing.assert_allclose(backward(g, "ce", ["z"])["z"].data, expected, rtol=0, atol=1e-15)


def test_backward_before_forward_rejected():
    with pytest.raises(AutodiffError, match="before forward"):
        backward(square_graph(), "y")


def test_non_scalar_output_rejected():
    g = Graph()
    x = g.input("x")
    g.set_output("y", x * x)
    forward(g, {"x": np.ones(3)})
    with pytest.raises(AutodiffError, match="not scalar"):
        backward(g, "y")


def test_shape_mismatch_names_node():
    g = Graph()
    g.set_output("c", g.matmul(g.input("a"), g.input("b")))
    with pytest.raises(ShapeError) as info:
        forward(g, {"a": np.ones((2, 3)), "b": np.ones((2, 2))})
    assert "node" in str(info.value)


def test_non_finite_intermediate_aborts():
    g = Graph()
    x = g.input("x")
    g.set_output("y", g.sum(x * x))
    with pytest.raises(NonFiniteError):
        forward(g, {"x": np.array([1e200])})


def test_unbound_input_rejected():
    with pytest.raises(AutodiffError, match="unbound"):
        forward(square_graph(), {})


def test_sign_of_zero_is_zero_and_has_no_gradient():
    g = Graph()
    x = g.input("x")
    s = g.sign(x)
    g.set_output("s", s)
    g.set_output("t", g.sum(g.mul(s, x)))
    out = forward(g, {"x": np.array([-2.0, 0.0, 3.0])})
    assert out["s"].data.tolist() == [-1.0, 0.0, 1.0]
    # d/dx sum(sign(x) * x) with sign held constant
    assert backward(g, "t")["x"].data.tolist() == [-1.0, 0.0, 1.0]


def test_relu_kink_uses_zero_subgradient():
    g = Graph()
    g.set_output("y", g.sum(g.relu(g.input("x"))))
    forward(g, {"x": np.array([0.0])})
    assert backward(g, "y")["x"].item() == 0.0


def test_finite_difference_on_square():
    def f(x):
        return float(np.sum(x * x)), 2 * x
    assert finite_diff_check(f, np.array([3.0])) <= 1e-9


def test_finite_difference_reports_kink():
    # ReLU at 0: analytic subgradient 0, central difference 0.5
    def f(x):
        g = Graph()
        g.set_output("y", g.sum(g.relu(g.input("x"))))
        v, grads = value_and_grad(g, {"x": x}, "y")
        return v, grads["x"]
    assert finite_diff_check(f, np.array([0.0])) == pytest.approx(0.5)


def test_finite_difference_flags_non_finite(caplog):
    def f(x):
        return float(np.log(x[0])) if x[0] > 0 else float("nan"), np.array([1.0 / x[0]])
    errs = finite_diff_errors(f, np.array([1e-7]), step=1e-6)
    assert np.isinf(errs[0])


@pytest.mark.parametrize("seed", range(5))
def test_mlp_parameter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(4, (5, 3), 3)
    params = init_params(spec, seed)
    x = rng.uniform(size=(6, 4))
    y = rng.integers(0, 3, 6)
    from fatlab.models import mlp
    g = Graph()
    logits, _ = mlp(g, spec, g.input("x"))
    g.set_output("loss", g.mean(g.softmax_ce(logits, g.input("y"))))
    names = spec.param_names()
    arrays = list(params)
    for k, name in enumerate(names):
        def f(p, k=k):
            binds = {"x": x, "y": y, **dict(zip(names, arrays[:k] + [p] + arrays[k + 1:]))}
            v, grads = value_and_grad(g, binds, "loss", [names[k]])
            return v, grads[names[k]]
        assert finite_diff_check(f, arrays[k]) <= 1e-5, name


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=4)

    def grad_of(a, b):
        g = Graph()
        x = g.input("x")
        f1 = g.sum(x * x)
        f2 = g.sum(g.relu(x))
        g.set_output("o", g.add(g.scale(f1, a), g.scale(f2, b)))
        forward(g, {"x": x0})
        return backward(g, "o")["x"].data

    np.testing.assert_array_equal(grad_of(2.0, 3.0), 2.0 * grad_of(1.0, 0.0) + 3.0 * grad_of(0.0, 1.0))


def test_repeated_runs_are_bit_identical():
    rng = np.random.default_rng(2)
    spec = ModelSpec(6, (7,), 3)
    params = init_params(spec, 0)
    x = rng.uniform(size=(9, 6))
    a = model_forward(params, x)[0].data
    b = model_forward(params, x)[0].data
    assert a.tobytes() == b.tobytes()


def test_tensor_grad_slot_filled():
    t = Tensor(np.array([1.0, -2.0]))
    g = square_graph()
    forward(g, {"x": t})
    backward(g, "y")
    assert t.grad.tolist() == [2.0, -4.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 39), st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2**31 - 1))
def test_rowwise_matmul_rows_do_not_depend_on_the_batch(m, row, dtype, seed):
    row = row % m
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, 33)).astype(dtype)
    b = rng.normal(size=(33, 17)).astype(dtype)
    full = rowwise_matmul(a, b)
    alone = rowwise_matmul(a[row:row + 1], b)
    assert full.dtype == dtype
    assert full[row].tobytes() == alone[0].tobytes()


def test_float32_inputs_keep_float32():
    spec = ModelSpec(5, (4,), 2)
    params = init_params(spec, 0, np.float32)
    logits = model_forward(params, np.full((3, 5), 0.5, np.float32))[0]
    assert logits.data.dtype == np.float32
