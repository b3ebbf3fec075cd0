import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gafield import tensor as T
from gafield.gradcheck import check_gradients, numerical_grad, relative_error
from gafield.tensor import NonFiniteError, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def test_matmul_identity_and_hand_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    out = T.matmul(Tensor(a), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_column_sums_of_b():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 5)))
    T.backward(T.matmul(a, b).sum())
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    fd = numerical_grad(lambda: T.matmul(a, b).sum(), a)
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    np.testing.assert_allclose(fd, expected, rtol=1e-8)


def test_matmul_rows_independent_of_position():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(37, 13)), rng.normal(size=(13, 9))
    perm = rng.permutation(37)
    assert np.array_equal(T.matmul(Tensor(a), Tensor(b)).data[perm], T.matmul(Tensor(a[perm]), Tensor(b)).data)


def test_softmax_cases():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0, 0.0])).data, [1, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=1)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(xs, c):
    x = np.array(xs)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, T.softmax(Tensor(x)).data, atol=1e-12)


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_detached_branch_and_unused_leaf_get_zero():
    x, unused = leaf([1.0, 2.0]), leaf([3.0])
    y = (x * 3.0).sum() + (x.detach() * 100.0).sum()
    tape = T.backward(y, [x, unused])
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    np.testing.assert_array_equal(unused.grad, [0.0])
    np.testing.assert_array_equal(tape.grad(unused), [0.0])


def test_tape_is_reverse_topological():
    x = leaf([1.0])
    y = T.exp(x)
    z = (y * y + x).sum()
    tape = T.backward(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(n)] < pos[id(p)]


def test_nonfinite_is_surfaced():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1e4]))


def test_float32_selectable():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0 + 1.0).dtype == np.float32


# -- gradient checks against central differences ----------------------------------

UNARY = {
    "exp": T.exp,
    "log": lambda a: T.log(T.exp(a) + 1.0),
    "sqrt": lambda a: T.sqrt(a * a + 0.5),
    "abs": T.tabs,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "tanh": T.tanh,
    "pow": lambda a: (a * a + 1.0) ** 1.5,
    "neg": T.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grads(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = leaf(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    fn = lambda: (UNARY[name](x) * w).sum()
    assert max(check_gradients(fn, [x])) < 1e-6


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_grads(op):
    rng = np.random.default_rng(3)
    a = leaf(rng.normal(size=(4, 3)))
    b = leaf(rng.uniform(0.5, 2.0, size=(1, 3)))
    c = leaf(rng.uniform(0.5, 2.0))
    w = Tensor(rng.normal(size=(4, 3)))
    fn = lambda: (op(op(a, b), c) * w).sum()
    assert max(check_gradients(fn, [a, b, c])) < 1e-6


def test_reductions_and_shape_ops_grads():
    rng = np.random.default_rng(4)
    a = leaf(rng.normal(size=(5, 4)))
    b = leaf(rng.normal(size=(2, 4)))
    w = Tensor(rng.normal(size=(7, 2)))

    def fn():
        c = T.concat([a, b], axis=0)
        r = c.reshape(7, 2, 2).sum(axis=2)
        m = T.tmax(c, axis=1, keepdims=True)
        s = T.softmax(c, axis=1)
        return (r * w).sum() + m.sum() * 0.3 + (s * s).mean() + T.l2_norm(a) + T.l1_norm(b, axis=0).sum() + c[:, :2].T.sum()

    assert max(check_gradients(fn, [a, b])) < 1e-6


def test_index_ops_grads():
    rng = np.random.default_rng(5)
    a = leaf(rng.normal(size=(6, 3)))
    idx = np.array([0, 2, 2, 5, 1, 0, 3])
    seg = np.array([0, 1, 1, 2, 0, 2])
    w = Tensor(rng.normal(size=(7, 3)))

    def fn():
        g = T.gather(a, idx)
        s = T.scatter_add(a, seg, 3)
        mx = T.segment_max(a, seg, 3)
        sm = T.segment_softmax(a, seg, 3)
        return (g * w).sum() + (s * s).sum() + mx.sum() + (sm * a).sum()

    assert max(check_gradients(fn, [a])) < 1e-6


def test_index_errors():
    a = Tensor(np.ones((3, 2)))
    with pytest.raises(IndexError):
        T.gather(a, np.array([0, 3]))
    with pytest.raises(IndexError):
        T.scatter_add(a, np.array([0, 1, 4]), 4 - 1)


def test_segment_softmax_sums_to_one():
    rng = np.random.default_rng(6)
    seg = rng.integers(0, 5, size=40)
    seg[:5] = np.arange(5)
    out = T.segment_softmax(Tensor(rng.normal(size=(40, 3)) * 30), seg, 5)
    sums = T.scatter_add(out, seg, 5).data
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_random_shape_linear_chain_grad(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, n)))
    bias = leaf(rng.normal(size=n))
    fn = lambda: T.silu(T.matmul(a, b) + bias).sum()
    assert max(check_gradients(fn, [a, b, bias])) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_scatter_gather_adjoint(n, m, c, seed):
    # <S x, y> == <x, G y> where S scatters by idx and G gathers by idx
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, m, size=n)
    x, y = rng.normal(size=(n, c)), rng.normal(size=(m, c))
    lhs = np.sum(T.scatter_add(Tensor(x), idx, m).data * y)
    rhs = np.sum(x * T.gather(Tensor(y), idx).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] < 1e-5
    assert relative_error(np.array([1.0]), np.array([1.0001]))[0] == pytest.approx(1e-4, rel=1e-3)


def test_determinism():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(50, 4))
    seg = rng.integers(0, 7, size=50)
    runs = [T.scatter_add(Tensor(data), seg, 7).data for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs)
