import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmpa import ContractViolation
from tmpa import tensor as T
from tmpa.gradcheck import grad_check
from tmpa.tensor import Tape, Tensor, backward


def direct_conv(x, k, stride, pad):
    """Loop-by-loop cross-correlation, zero outside the input."""
    b, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for m in range(kk):
                            for n in range(kk):
                                r, s = i * stride + m - pad, j * stride + n - pad
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[bi, c, r, s] * k[o, c, m, n]
                    out[bi, o, i, j] = acc
    return out


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (1, 2, 0), (3, 1, 0), (3, 2, 0)])
def test_conv2d_matches_direct_loops(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    kern = rng.standard_normal((4, 3, k, k))
    got = T.conv2d(Tensor(x), Tensor(kern), stride, pad).data
    np.testing.assert_allclose(got, direct_conv(x, kern, stride, pad), atol=1e-12)


def test_conv2d_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 4, 5, 3))
    kern = np.eye(4).reshape(4, 4, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(kern)).data, x)


def test_conv2d_all_ones_interior():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), 1, 1).data
    assert out[0, 0, 2, 2] == 9.0
    assert out[0, 0, 0, 0] == 4.0


def test_conv2d_rejects_bad_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ContractViolation):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ContractViolation):
        T.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
    with pytest.raises(ContractViolation):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=3)
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((1, 2, 3, 3))))


def test_conv_output_size_floors_odd_strided_inputs():
    assert T.conv_output_size(48, 3, 2, 1) == 24
    assert T.conv_output_size(3, 3, 2, 1) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.integers(3, 7))
def test_nine_shifted_pointwise_convs(seed, cin, cout, h, w):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cin, h, w))
    kern = rng.standard_normal((cout, cin, 3, 3))
    full = T.conv2d(Tensor(x), Tensor(kern), 1, 1).data
    assert np.max(np.abs(full - T.conv3x3_as_pointwise_sum(x, kern))) < 1e-12


def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    b = Tensor(np.array([[5.0], [6]]))
    np.testing.assert_array_equal(T.matmul(a, b).data, [[17], [39]])
    rng = np.random.default_rng(1)
    m = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(m), Tensor(np.eye(4))).data, m)
    p, q = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(p), Tensor(q)).data.T,
                               T.matmul(Tensor(q.T), Tensor(p.T)).data, atol=1e-14)
    with pytest.raises(ContractViolation):
        T.matmul(Tensor(p), Tensor(p))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor(np.full(3, 1000.0))).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(xs):
    out = T.softmax(Tensor(np.array(xs))).data
    assert abs(out.sum() - 1) < 1e-9
    assert np.all(out > 0) and np.all(out <= 1)


def test_masked_softmax_ignores_masked_entries():
    x = Tensor(np.array([[5.0, 0.0, math.log(3)]]))
    out = T.masked_softmax(x, np.array([[False, True, True]])).data
    np.testing.assert_allclose(out, [[0.0, 0.25, 0.75]], atol=1e-15)
    with pytest.raises(ContractViolation):
        T.masked_softmax(x, np.zeros((1, 3), dtype=bool))


def test_batch_norm_examples():
    out = T.batch_norm(Tensor(np.array([[1.0], [3.0]])), Tensor(np.array([2.0])), Tensor(np.array([1.0])),
                       True, T.RunningStats(1))
    np.testing.assert_allclose(out.data, [[-1], [3]], atol=1e-4)

    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 3)) * 4 + 2
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), True, T.RunningStats(3)).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)

    const = np.full((4, 1), 7.0)
    out = T.batch_norm(Tensor(const), Tensor(np.ones(1)), Tensor(np.array([0.3])), True, T.RunningStats(1))
    np.testing.assert_allclose(out.data, 0.3, atol=1e-12)


def test_batch_norm_running_stats_and_eval():
    stats = T.RunningStats(1)
    x = Tensor(np.array([[1.0], [3.0]]))
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), True, stats)
    np.testing.assert_allclose(stats.mean, [0.2])  # 0.9*0 + 0.1*2
    np.testing.assert_allclose(stats.var, [0.9 + 0.1 * 2.0])  # unbiased variance of {1,3} is 2
    out = T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), False, stats).data
    np.testing.assert_allclose(out, (x.data - 0.2) / np.sqrt(1.1 + 1e-5))


def test_batch_norm_rejects_single_sample_training():
    with pytest.raises(ContractViolation):
        T.batch_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), True, T.RunningStats(2))


def test_cross_entropy_examples():
    assert abs(float(T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).data) - math.log(4)) < 1e-12
    logits = np.array([[1000.0, 0, 0]])
    assert float(T.cross_entropy(Tensor(logits), [0]).data) < 1e-12
    got = float(T.cross_entropy(Tensor(np.array([[0.0, math.log(3)]])), [1]).data)
    assert abs(got - (-math.log(0.75))) < 1e-12
    with pytest.raises(ContractViolation):
        T.cross_entropy(Tensor(np.zeros((1, 2))), [2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4)) * 10
    assert float(T.cross_entropy(Tensor(logits), rng.integers(0, 4, 5)).data) >= 0


def test_l2_distance_examples():
    assert float(T.l2_distance(Tensor(np.array([[3.0, 4]])), Tensor(np.zeros((1, 2)))).data[0]) == 5.0
    got = T.l2_distance(Tensor(np.array([[1.0, 1, 1]])), Tensor(np.array([[2.0, 3, 4]]))).data[0]
    assert abs(got - math.sqrt(14)) < 1e-12


def test_l2_distance_subgradient_zero_at_coincidence():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.l2_distance(a, b))
    backward(loss, tape)
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(a.grad, 0)
    np.testing.assert_array_equal(b.grad, 0)


def test_pairwise_distance_properties():
    x = np.random.default_rng(2).standard_normal((6, 4))
    d = T.pairwise_distance(Tensor(x)).data
    np.testing.assert_array_equal(d, d.T)
    np.testing.assert_array_equal(np.diag(d), 0)
    np.testing.assert_allclose(d[1, 4], np.linalg.norm(x[1] - x[4]), atol=1e-14)


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x.grad = None
    with Tape() as tape:
        loss = T.tsum(x * x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_accumulates_over_fan_out():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = x * 3.0
        loss = T.tsum(y * y + y)  # 9x^2 + 3x -> 18x + 3
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [39.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractViolation):
        backward(y, tape)


def test_ops_outside_a_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad
    with Tape() as tape:
        x * 2.0
        Tensor(np.ones(2)) * 3.0  # no input needs grad
    assert len(tape) == 1


def test_tape_records_in_topological_order():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.exp(x)
        z = T.matmul(y, x)
        T.tsum(z + y)
    produced = set()
    for rec in tape.records:
        for inp in rec.inputs:
            assert not inp.requires_grad or inp is x or id(inp) in produced
        produced.add(id(rec.output))


def test_backward_is_bitwise_deterministic():
    def grads():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 6, 5)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.softplus(T.conv2d(x, k, 2, 1)))
        backward(loss, tape)
        return x.grad, k.grad

    (a1, b1), (a2, b2) = grads(), grads()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_ops_stay_finite(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 5)) * 30)
    for out in (T.softmax(x), T.log_softmax(x), T.softplus(x), T.relu(x), T.pairwise_distance(x)):
        assert np.all(np.isfinite(out.data))


def test_gradcheck_examples_from_contract():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    labels = np.array([0, 3, 1, 4])

    def ce_of_softmax(z):
        return T.cross_entropy(T.log(T.softmax(z)), labels)

    assert grad_check(ce_of_softmax, [logits], h=1e-5, tol=1e-4).passed

    x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    weights = Tensor(rng.standard_normal((1, 1, 4, 4)))
    assert grad_check(lambda a, b: T.tsum(T.conv2d(a, b, 1, 1) * weights), [x, k]).passed

    report = grad_check(lambda a: Tensor(np.array(3.0)), [x])
    assert report.passed and report.worst == 0.0
