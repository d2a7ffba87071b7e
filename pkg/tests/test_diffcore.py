"""Autodiff engine: forward values, shape rules, gradients against central differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bida import diffcore as dc
from bida.diffcore import Tensor
from bida.errors import ContractError, NumericError, OracleError


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# (name, builder(rng) -> (inputs, call)) ; call maps the input leaves to an output tensor
def _cases():
    def pos(rng, shape):
        return rng.uniform(0.5, 2.0, shape)

    return {
        "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: dc.add(a, b)),
        "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))], lambda a, b: dc.sub(a, b)),
        "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: dc.mul(a, b)),
        "div": (lambda r: [r.normal(size=(2, 3)), pos(r, (2, 3))], lambda a, b: dc.div(a, b)),
        "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], lambda a, b: dc.matmul(a, b)),
        "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: dc.transpose(a, (2, 0, 1))),
        "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: dc.reshape(a, (3, 4))),
        "concat": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: dc.concat([a, b], axis=1)),
        "split": (lambda r: [r.normal(size=(5, 2))], lambda a: dc.split(a, [2, 3], axis=0)[1]),
        "slice": (lambda r: [r.normal(size=(4, 5))], lambda a: dc.slice_(a, (slice(1, 3), 2))),
        "sum": (lambda r: [r.normal(size=(3, 4))], lambda a: dc.sum_(a, axis=1)),
        "mean": (lambda r: [r.normal(size=(3, 4))], lambda a: dc.mean(a, axis=0, keepdims=True)),
        "max": (lambda r: [r.normal(size=(3, 5))], lambda a: dc.max_(a, axis=1)),
        "exp": (lambda r: [r.normal(size=(3, 3))], dc.exp),
        "log": (lambda r: [pos(r, (3, 3))], dc.log),
        "sqrt": (lambda r: [pos(r, (3, 3))], dc.sqrt),
        "relu": (lambda r: [r.normal(size=(4, 4))], dc.relu),
        "gelu": (lambda r: [r.normal(size=(4, 4))], dc.gelu),
        "softmax": (lambda r: [r.normal(size=(3, 4))], lambda a: dc.softmax(a, axis=1)),
        "log_softmax": (lambda r: [r.normal(size=(3, 4))], lambda a: dc.log_softmax(a, axis=0)),
        "layer_norm": (lambda r: [r.normal(size=(3, 5))], lambda a: dc.layer_norm(a, axis=-1)),
        "conv2d": (lambda r: [r.normal(size=(2, 5, 5, 3)), r.normal(size=(3, 3, 3, 2))], dc.conv2d),
        "conv3d": (lambda r: [r.normal(size=(1, 4, 4, 6, 2)), r.normal(size=(3, 3, 3, 2, 2))], dc.conv3d),
        "maxpool2d": (lambda r: [r.normal(size=(2, 5, 5, 2))], dc.maxpool2d),
    }


CASES = _cases()


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_central_differences(name, seed):
    build, call = CASES[name]
    rng = np.random.default_rng(seed)
    leaves = [leaf(a) for a in build(rng)]
    probe = rng.normal(size=call(*leaves).shape)

    def f():
        return dc.sum_(dc.mul(call(*leaves), probe))

    errs = dc.gradient_errors(f, {str(i): x for i, x in enumerate(leaves)})
    assert max(errs.values()) < 1e-4, errs


def test_every_listed_primitive_is_dispatchable():
    listed = ["add", "sub", "mul", "matmul", "transpose", "reshape", "concat", "split", "slice", "sum", "mean",
              "max", "exp", "log", "sqrt", "relu", "gelu", "softmax", "layer_norm", "conv2d", "conv3d", "maxpool2d"]
    assert set(listed) <= set(dc.PRIMITIVES)
    out = dc.apply_primitive("matmul", [np.eye(2, 3), np.ones((3, 2))])
    assert out.shape == (2, 2)
    with pytest.raises(ContractError):
        dc.apply_primitive("fft", [np.ones(2)])


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(dc.softmax(np.zeros(3)).data, np.full(3, 1 / 3), atol=1e-15)


def test_gelu_fixes_origin():
    assert dc.gelu(np.zeros(1)).data[0] == 0.0


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ContractError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_non_finite_output_is_numeric_error():
    with pytest.raises(NumericError):
        dc.log(np.array([0.0, 1.0]))
    with pytest.raises(NumericError):
        dc.exp(np.array([1000.0]))


def test_backward_of_sum_and_square():
    x = leaf([0.0, 0.0, 0.0])
    dc.backward(dc.sum_(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = leaf([1.0, 2.0])
    dc.backward(dc.sum_(dc.mul(y, y)))
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_accumulates_and_clears_graph():
    x = leaf([1.0, 2.0])
    loss = dc.sum_(dc.mul(x, 3.0))
    dc.backward(loss)
    dc.backward(dc.sum_(dc.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6, 6])
    assert loss._parents == ()


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        dc.backward(dc.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = dc.mul(x, x)
    loss = dc.sum_(dc.add(y, y))  # d/dx 2x^2 = 4x
    dc.backward(loss)
    np.testing.assert_allclose(x.grad, [12.0])


def test_mean_softmax_onehot_against_oracle():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(4, 5)))
    onehot = np.eye(5)[[0, 3, 1, 4]]
    assert dc.finite_difference_check(lambda: dc.mean(dc.mul(dc.softmax(x, axis=1), onehot)), x) < 1e-4


def test_oracle_examples():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=7))
    assert dc.finite_difference_check(lambda: dc.sum_(dc.mul(x, x)), x, 1e-5) < 1e-7
    c = leaf(rng.normal(size=3))
    assert dc.finite_difference_check(lambda: dc.add(dc.mul(dc.sum_(c), 0.0), 2.0), c) == 0.0


def test_oracle_rejects_nondeterministic_function():
    x = leaf([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(OracleError):
        dc.finite_difference_check(lambda: dc.sum_(dc.mul(x, rng.normal())), x)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with dc.no_grad():
        y = dc.mul(x, 2.0)
    assert not y.requires_grad


def test_maxpool_tie_routes_to_first_maximum():
    x = leaf(np.zeros((1, 3, 3, 1)))
    out = dc.maxpool2d(x)
    assert out.shape == x.shape
    dc.backward(dc.slice_(dc.reshape(out, (9,)), 4))  # centre output: window covers all nine inputs
    g = x.grad.reshape(3, 3)
    assert g[0, 0] == 1.0 and g.sum() == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_distributions(a):
    p = dc.softmax(a, axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_standardizes(a):
    if np.any(a.std(axis=-1) < 1e-3):
        return  # near-constant rows are dominated by eps
    y = dc.layer_norm(a).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-7)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1))
def test_concat_then_split_is_identity(sizes, axis):
    rng = np.random.default_rng(len(sizes))
    parts = [rng.normal(size=(s, 3)) if axis == 0 else rng.normal(size=(3, s)) for s in sizes]
    back = dc.split(dc.concat(parts, axis=axis), sizes, axis=axis)
    for a, b in zip(parts, back):
        np.testing.assert_array_equal(a, b.data)
