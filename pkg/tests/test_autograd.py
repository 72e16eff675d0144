from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pause_lab import autograd as ag
from pause_lab.autograd import (
    ComputeGraph,
    DegenerateMaskError,
    DimensionError,
    NonFiniteError,
    RankError,
    Tensor,
    backward,
    grad_check,
)


@pytest.fixture(autouse=True)
def f64():
    with ag.precision("float64"):
        yield


def leaf(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def test_matmul_and_sum_gradient_matches_closed_form():
    a, b = leaf((3, 4), 1), leaf((4, 2), 2)
    backward(ag.tsum(ag.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_reused_leaf_accumulates():
    x = leaf((3,))
    backward(ag.tsum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar():
    with pytest.raises(RankError):
        backward(leaf((2, 2)) * 2.0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(leaf((2, 3)), leaf((2, 3)))


def test_fully_masked_row_is_rejected():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(DegenerateMaskError):
        ag.softmax_rows(leaf((2, 2)), mask)


def test_masked_softmax_zeroes_disallowed_entries():
    mask = np.tril(np.ones((3, 3), dtype=bool))
    p = ag.softmax_rows(leaf((3, 3)), mask).data
    assert np.all(p[~mask] == 0)
    np.testing.assert_allclose(p.sum(-1), 1.0)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        ag.cross_entropy(leaf((2, 3)), np.array([0, 3]))


def test_cross_entropy_value():
    z = leaf((2, 3))
    t = np.array([2, 0])
    expect = sum(np.log(np.exp(z.data[i]).sum()) - z.data[i, t[i]] for i in range(2))
    assert ag.cross_entropy(z, t).item() == pytest.approx(expect, rel=1e-12)


def test_layer_norm_uses_population_variance():
    x = leaf((2, 5))
    y = ag.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-9)


def test_no_grad_builds_no_graph():
    x = leaf((2,))
    with ag.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.parents == ()


def test_trace_lists_each_node_once():
    x = leaf((2,))
    y = x * x
    z = ag.tsum(y + y)
    graph = ComputeGraph.trace(z)
    ids = [id(t) for t in graph.tensors]
    assert len(ids) == len(set(ids))
    assert ids[-1] == id(z)
    for i, node in enumerate(graph.nodes):
        assert all(j < i for j in node.inputs)


def test_non_finite_check_reports_op():
    x = Tensor(np.array([1.0, 1e300]), requires_grad=True)
    with ag.finite_checks(True), pytest.raises(NonFiniteError) as err, np.errstate(over="ignore"):
        x * 1e300
    assert "mul" in str(err.value)
    assert err.value.diagnostics["n_inf"] == 1
    assert err.value.diagnostics["first_bad_index"] == [1]


def test_precision_switch():
    with ag.precision("float32"):
        assert Tensor([0.0, 1.0]).data.dtype == np.float32
    assert Tensor([0.0, 1.0]).data.dtype == np.float64


def test_grad_check_needs_float64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: ag.tsum(x * x), {"x": x})


def test_grad_check_flags_a_wrong_gradient():
    x = leaf((3,))
    bad = {"x": np.zeros(3)}
    report = grad_check(lambda: ag.tsum(x * x), {"x": x}, grads=bad)
    assert not report.passed and report.worst_param[0] == "x"


COMPOSITES = {
    "gelu": lambda a, b: ag.tsum(ag.gelu(a) * b),
    "relu": lambda a, b: ag.tsum(ag.relu(a + 0.3) * b),
    "softmax": lambda a, b: ag.tsum(ag.softmax_rows(a, np.tril(np.ones((3, 3), bool))) * b),
    "layer_norm": lambda a, b: ag.tsum(ag.layer_norm(a, ag.mean(b, axis=0), ag.tsum(b, axis=0)) * a),
    "matmul_t": lambda a, b: ag.tsum(ag.matmul(a, ag.transpose(b)) * ag.matmul(a, ag.transpose(b))),
    "ce": lambda a, b: ag.cross_entropy(ag.matmul(a, b), np.array([0, 2, 1])),
    "take_mean": lambda a, b: ag.mean(ag.take(a, np.array([0, 0, 2])) * b),
}


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients(name):
    a, b = leaf((3, 3), 3), leaf((3, 3), 4)
    report = grad_check(lambda: COMPOSITES[name](a, b), {"a": a, "b": b})
    assert report.passed, report


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
def test_broadcast_add_mul_gradients(seed, n, m):
    a, b = leaf((n, m), seed), leaf((m,), seed + 1)
    report = grad_check(lambda: ag.tsum((a + b) * (a * b)), {"a": a, "b": b})
    assert report.passed


def test_backward_twice_doubles_grads():
    a, b = leaf((2, 3), 5), leaf((3,), 6)
    loss = ag.tsum(ag.gelu(a) * b)
    backward(loss)
    once = a.grad.copy(), b.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(a.grad, 2 * once[0])
    np.testing.assert_array_equal(b.grad, 2 * once[1])


def test_ops_are_pure():
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, size=(4, 4)))
    mask = np.tril(np.ones((4, 4), bool))
    for _ in range(2):
        outs = [
            ag.softmax_rows(x, mask).data,
            ag.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data,
            ag.gelu(x).data,
            ag.matmul(x, x).data,
        ]
        if _ == 0:
            first = [o.tobytes() for o in outs]
    assert first == [o.tobytes() for o in outs]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-30, 30, size=(5, 7)))
    mask = rng.random((5, 7)) < 0.6
    mask[:, 0] = True
    p = ag.softmax_rows(x, mask).data
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)
    assert np.all(p[~mask] == 0)


UNARY = {
    "gelu": ag.gelu,
    "relu": lambda a: ag.relu(a + 0.05),  # keep away from the kink
    "neg": ag.neg,
    "transpose": ag.transpose,
    "reshape": lambda a: ag.reshape(a, (a.shape[1], a.shape[0])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_unary_gradients_uniform_inputs(name, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, size=UNARY[name](a).shape))
    report = grad_check(lambda: ag.tsum(UNARY[name](a) * w), {"a": a})
    assert report.passed, report
