import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from binens import tensor as T
from binens.tensor import Tensor, backprop, finite_diff_grad, max_relative_error


def check_grad(build, *shapes, seed=0, lo=-2.0, hi=2.0, tol=1e-3):
    """Compare backprop with central differences for every input of ``build``."""
    rng = np.random.default_rng(seed)
    with T.using_dtype(np.float64):
        xs = [Tensor(rng.uniform(lo, hi, s), requires_grad=True) for s in shapes]
        backprop(build(*xs))
        for i, x in enumerate(xs):
            def f(v, i=i):
                args = list(xs)
                args[i] = v
                return build(*args)
            num = finite_diff_grad(f, x, eps=1e-4)
            assert max_relative_error(x.grad, num) < tol, f"input {i}"


# -- worked examples ------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric_row():
    np.testing.assert_allclose(T.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((1, 5), 3.25))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_backprop_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backprop((x * x).sum())
    np.testing.assert_allclose(x.grad, [2, 4, 6])


def test_backprop_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backprop(x.mean())
    np.testing.assert_allclose(x.grad, [0.25] * 4)


def test_finite_diff_square():
    with T.using_dtype(np.float64):
        x = Tensor([3.0])
        g = finite_diff_grad(lambda v: (v * v).sum(), x, eps=1e-4)
    assert abs(g[0] - 6.0) <= 1e-7


def test_finite_diff_sin():
    with T.using_dtype(np.float64):
        g = finite_diff_grad(lambda v: T.sin(v).sum(), Tensor([0.0]), eps=1e-4)
    assert abs(g[0] - 1.0) <= 1e-8


def test_finite_diff_restores_input():
    x = Tensor([0.5, -1.5])
    before = x.data.copy()
    finite_diff_grad(lambda v: (v * v).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: v.sum(), Tensor([1.0]), eps=0)


# -- errors and tape behaviour --------------------------------------------------


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as info:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg


def test_add_shape_error():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        backprop(x * 2.0)
    T.get_tape().clear()


def test_tape_cleared_and_ops_visited_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    loss = (y + y).sum()
    assert len(T.get_tape()) == 3
    backprop(loss)
    assert len(T.get_tape()) == 0
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_tape_topological_order():
    x = Tensor([1.0], requires_grad=True)
    y = T.exp(x)
    z = y * x
    z.sum()
    recs = T.get_tape().records
    pos = {id(r.output): i for i, r in enumerate(recs)}
    for i, r in enumerate(recs):
        for inp in r.inputs:
            if id(inp) in pos:
                assert pos[id(inp)] < i
    T.get_tape().clear()


def test_unreachable_leaf_has_no_grad():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    _ = unused * 3.0
    backprop((x * 2.0).sum())
    assert unused.grad is None or not unused.grad.any()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and len(T.get_tape()) == 0


def test_backward_counter_increments():
    before = T.backward_count()
    x = Tensor([1.0], requires_grad=True)
    backprop((x * x).sum())
    assert T.backward_count() == before + 1


def test_gradients_accumulate_across_passes():
    x = Tensor([2.0], requires_grad=True)
    backprop((x * x).sum())
    backprop((x * x).sum())
    np.testing.assert_allclose(x.grad, [8.0])
    assert x.grad.dtype == x.data.dtype


def test_forward_determinism():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    o1 = T.gelu(T.matmul(Tensor(a), Tensor(b))).data
    o2 = T.gelu(T.matmul(Tensor(a), Tensor(b))).data
    assert o1.tobytes() == o2.tobytes()


def test_default_dtype_is_float32():
    assert Tensor([1.0]).data.dtype == np.float32


# -- per-primitive gradient oracles ----------------------------------------------


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: (T.matmul(a, b) * T.matmul(a, b)).sum(), [(3, 4), (4, 2)]),
    ("matmul-batched", lambda a, b: T.sin(T.matmul(a, b)).sum(), [(2, 3, 4), (4, 5)]),
    ("add-broadcast", lambda a, b: T.sin(a + b).sum(), [(3, 4), (4,)]),
    ("multiply", lambda a, b: T.sin(a * b).sum(), [(3, 4), (3, 1)]),
    ("transpose", lambda a: T.sin(T.transpose(a, (1, 0, 2))).sum(), [(2, 3, 4)]),
    ("reshape", lambda a: T.sin(T.reshape(a, (6, 2))).sum(), [(3, 4)]),
    ("sum-axis", lambda a: T.sin(T.sum_(a, axis=1)).sum(), [(3, 4)]),
    ("mean-axis", lambda a: T.sin(T.mean(a, axis=0, keepdims=True)).sum(), [(3, 4)]),
    ("softmax", lambda a: (T.softmax(a) * T.sin(a)).sum(), [(3, 5)]),
    ("log-softmax", lambda a: (T.log_softmax(a) * T.sin(a)).sum(), [(3, 5)]),
    ("layer-norm", lambda x, g, b: T.sin(T.layer_norm(x, g, b)).sum(), [(3, 6), (6,), (6,)]),
    ("gelu", lambda a: T.gelu(a).sum(), [(4, 5)]),
    ("maximum", lambda a: T.maximum(a, 0.3).sum() + (a * a).sum(), [(4, 5)]),
    ("clip", lambda a: (T.clip(a, -1.0, 1.0) * a).sum(), [(4, 5)]),
    ("exp-log", lambda a: T.log(T.exp(a) + 1.0).sum(), [(3, 3)]),
    ("concat", lambda a, b: T.sin(T.concat([a, b], axis=1)).sum(), [(2, 3), (2, 2)]),
])
def test_primitive_gradients(name, build, shapes):
    check_grad(build, *shapes)


def test_embedding_gradient():
    ids = np.array([[1, 3, 3], [0, 2, 1]])
    check_grad(lambda w: T.sin(T.embedding(w, ids)).sum(), (5, 4))


def test_mlp_gradient():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 3, size=6)
    onehot = np.eye(3)[y]

    def loss(w1, b1, w2):
        h = T.gelu(T.matmul(Tensor(x), w1) + b1)
        return -(T.log_softmax(T.matmul(h, w2)) * onehot).sum() / 6.0

    check_grad(loss, (5, 8), (8,), (8, 3))


def test_straight_through_masks_gradient():
    x = Tensor([0.5, -2.0, 0.9], requires_grad=True)
    y = T.straight_through(x, np.sign(x.data), np.abs(x.data) <= 1.0)
    np.testing.assert_array_equal(y.data, [1, -1, 1])
    backprop(y.sum())
    np.testing.assert_array_equal(x.grad, [1, 0, 1])


# -- properties -----------------------------------------------------------------


finite = st.floats(-5, 5, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(2, 7)), elements=finite))
def test_layer_norm_rows_centered(x):
    d = x.shape[1]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
