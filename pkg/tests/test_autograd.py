import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoguide import autograd as ag
from geoguide.autograd import ComputationGraph, ShapeError, backward, tensor, tensor_op
from geoguide.gradcheck import NonDeterministicError, finite_difference_check


def test_saturating_ops_keep_open_range():
    x = tensor([-800.0, -40.0, 40.0, 800.0])
    s, t = ag.sigmoid(x).data, ag.tanh(x).data
    assert np.all((s > 0) & (s < 1)) and np.all((t > -1) & (t < 1))
    assert s[2] == np.nextafter(1.0, 0.0) and t[0] == -np.nextafter(1.0, 0.0)


def test_sigmoid_tanh_at_zero():
    assert ag.sigmoid(tensor([0.0])).data.tolist() == [0.5]
    assert ag.tanh(tensor([0.0])).data.tolist() == [0.0]


def test_matmul_of_ones():
    out = tensor_op("matmul", [tensor(np.ones((2, 3))), tensor(np.ones((3, 2)))])
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_sum_of_squares_gradient():
    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ag.sum_(ag.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_tanh_gradient_at_zero():
    a = tensor([0.0], requires_grad=True)
    backward(ag.tanh(a))
    assert a.grad[0] == 1.0


def test_backward_accumulates_without_reset():
    x = tensor([1.0, -2.0], requires_grad=True)
    backward(ag.sum_(ag.scalar_mul(x, 3.0)))
    backward(ag.sum_(ag.scalar_mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    x = tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(ag.scalar_mul(x, 2.0))


@pytest.mark.parametrize("kind,shapes", [
    ("add", [(2, 3), (3, 2)]),
    ("sub", [(2,), (3,)]),
    ("mul_elementwise", [(4,), (2, 2)]),
    ("matmul", [(2, 3), (2, 3)]),
])
def test_shape_mismatch_names_op_and_extents(kind, shapes):
    args = [tensor(np.ones(s)) for s in shapes]
    with pytest.raises(ShapeError) as err:
        tensor_op(kind, args)
    assert kind in str(err.value)
    for s in shapes:
        assert str(s) in str(err.value)


def test_concat_mismatch_reports_extents():
    with pytest.raises(ShapeError, match=r"concat_last_axis.*\(2, 3\).*\(3, 3\)"):
        ag.concat_last_axis([tensor(np.ones((2, 3))), tensor(np.ones((3, 3)))])


def test_non_finite_values_propagate():
    x = tensor([np.inf, np.nan, 1.0])
    out = ag.add(x, tensor([1.0, 1.0, 1.0]))
    assert np.isinf(out.data[0]) and np.isnan(out.data[1])
    with np.errstate(invalid="ignore"):
        assert np.isnan(ag.tanh(tensor([np.nan])).data[0])


def test_no_broadcast_except_scalar_mul():
    with pytest.raises(ShapeError):
        ag.add(tensor(np.ones((2, 3))), tensor(np.ones(3)))
    out = ag.scalar_mul(tensor(np.ones((2, 3))), tensor([2.0]))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 2.0))


# --------------------------------------------------------------- fd per op

def _away_from_zero(rng, shape, low=0.05):
    x = rng.uniform(low, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng):
    s = lambda *shape: rng.normal(size=shape)
    return {
        "add": ([s(3, 4), s(3, 4)], lambda a, b: ag.add(a, b)),
        "sub": ([s(2, 3), s(2, 3)], lambda a, b: ag.sub(a, b)),
        "mul_elementwise": ([s(4, 4), s(4, 4)], lambda a, b: ag.mul(a, b)),
        "matmul": ([s(3, 4), s(4, 2)], lambda a, b: ag.matmul(a, b)),
        "matmul_batched": ([s(2, 3, 4), s(2, 4, 3)], lambda a, b: ag.matmul(a, b)),
        "matmul_shared": ([s(2, 3, 4), s(4, 2)], lambda a, b: ag.matmul(a, b)),
        "concat_last_axis": ([s(2, 3), s(2, 1)], lambda a, b: ag.concat_last_axis([a, b])),
        "concat_axis0": ([s(2, 3), s(1, 3)], lambda a, b: ag.concat([a, b], axis=0)),
        "reshape": ([s(2, 6)], lambda a: ag.reshape(a, (3, 4))),
        "slice": ([s(4, 4)], lambda a: ag.slice_(a, (slice(1, 3), slice(0, 4, 2)))),
        "transpose": ([s(2, 3, 4)], lambda a: ag.transpose(a, (2, 0, 1))),
        "sigmoid": ([s(3, 4) * 3], ag.sigmoid),
        "tanh": ([s(3, 4)], ag.tanh),
        "relu": ([_away_from_zero(rng, (4, 4))], ag.relu),
        "log": ([rng.uniform(0.5, 2.0, size=(3, 3))], ag.log),
        "layernorm": ([s(3, 4), rng.uniform(0.5, 1.5, 4), s(4)], lambda x, g, b: ag.layernorm(x, g, b)),
        "softmax_last_axis": ([s(3, 4)], ag.softmax),
        "log_softmax_last_axis": ([s(3, 4)], ag.log_softmax),
        "mean": ([s(4, 4)], ag.mean),
        "sum": ([s(4, 3)], ag.sum_),
        "scalar_mul": ([s(3, 4), s(1)], lambda a, b: ag.scalar_mul(a, b)),
    }


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients_match_central_differences(kind, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = _op_cases(rng)[kind]
    params = [tensor(a, requires_grad=True, name=f"in{i}") for i, a in enumerate(arrays)]
    probe = fn(*params)
    weights = ag.constant(rng.normal(size=probe.shape))

    def f():
        return ag.sum_(ag.mul(fn(*params), weights))

    report = finite_difference_check(f, params, epsilon=1e-5, tolerance=1e-6)
    assert report.passed, "\n".join(report.lines())


def test_fd_check_scalar_square():
    x = tensor([2.0], requires_grad=True)
    report = finite_difference_check(lambda: ag.mul(x, x), [x], 1e-5, 1e-6)
    assert report.passed
    assert report.params[0].analytic == 4.0
    assert abs(report.params[0].numeric - 4.0) < 1e-9


def test_fd_check_tanh():
    a = tensor([0.3], requires_grad=True)
    report = finite_difference_check(lambda: ag.tanh(a), [a], 1e-5, 1e-6)
    assert report.passed
    assert abs(report.params[0].numeric - (1 - np.tanh(0.3) ** 2)) < 1e-9


def test_fd_check_detects_nondeterminism():
    x = tensor([1.0], requires_grad=True)
    noise = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_difference_check(lambda: ag.scalar_mul(x, float(noise.normal())), [x])


def test_fd_check_flags_wrong_gradient():
    x = tensor([0.7, -0.2], requires_grad=True)

    def broken():
        out = ag.sum_(ag.mul(x, x))
        bw = out._backward
        out._backward = lambda g: bw(3.0 * g)
        return out

    assert not finite_difference_check(broken, [x]).passed


# ------------------------------------------------------------- invariants

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_layernorm_normalises_rows(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols))
    out = ag.layernorm(tensor(x), eps=0.0).data
    assert np.all(np.abs(out.mean(axis=-1)) <= 1e-10)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) <= 1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows_sum_to_one(rows, cols, seed, scale):
    x = np.random.default_rng(seed).normal(0, scale, size=(rows, cols))
    out = ag.softmax(tensor(x)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-12)


def _tiny_graph(seed):
    rng = np.random.default_rng(seed)
    w = tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = tensor(rng.normal(size=(2, 3)))
    h = ag.tanh(ag.matmul(x, w))
    loss = ag.mean(ag.mul(h, ag.sigmoid(h)))
    return w, loss


def test_determinism_bit_identical():
    w1, l1 = _tiny_graph(5)
    backward(l1)
    w2, l2 = _tiny_graph(5)
    backward(l2)
    assert l1.data.tobytes() == l2.data.tobytes()
    assert w1.grad.tobytes() == w2.grad.tobytes()


def test_graph_records_are_topological_and_unique():
    _, loss = _tiny_graph(0)
    graph = ComputationGraph.of(loss)
    outputs = [r.output for r in graph.records]
    assert len(outputs) == len(set(outputs))
    for r in graph.records:
        assert all(i < r.output for i in r.inputs)


def test_shared_node_visited_once():
    x = tensor([1.5], requires_grad=True)
    y = ag.tanh(x)
    backward(ag.add(ag.mul(y, y), y))      # y reused: d/dx = (2y + 1) * (1 - y^2)
    t = np.tanh(1.5)
    assert abs(x.grad[0] - (2 * t + 1) * (1 - t * t)) < 1e-15


def test_graphs_on_separate_threads():
    results = {}

    def work(i):
        w, loss = _tiny_graph(7)
        backward(loss)
        results[i] = w.grad.copy()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(1, 4):
        np.testing.assert_array_equal(results[0], results[i])


def test_no_grad_records_nothing():
    x = tensor([1.0], requires_grad=True)
    with ag.no_grad():
        y = ag.tanh(x)
    assert not y.requires_grad and y.parents == ()
