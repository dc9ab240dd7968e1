import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from binens import tensor as T
from binens.quant import (BINARY, FULL_PRECISION, TERNARY, UNIFORM4, QuantizationWarning, QuantizedParam, QuantSpec,
                          binarize, quantize_uniform4, quantize_weight, split_latents, ste_backward, ternarize,
                          ternary_weight_split)
from binens.tensor import Tensor, backprop

weights = arrays(np.float32, st.integers(1, 64), elements=st.floats(-3, 3, allow_nan=False, width=32))


# -- binarize ---------------------------------------------------------------------


def test_binarize_example():
    q, s = binarize(np.array([0.3, -0.7, 0.1, -0.5], dtype=np.float32))
    assert s == pytest.approx(0.4, abs=1e-7)
    np.testing.assert_allclose(q, [0.4, -0.4, 0.4, -0.4], atol=1e-7)


@pytest.mark.parametrize("c", [0.1, 1.0, 7.5])
def test_binarize_constant_is_fixed_point(c):
    x = np.full(3, c, dtype=np.float32)
    q, _ = binarize(x)
    np.testing.assert_array_equal(q, x)


def test_binarize_sign_zero_is_positive():
    q, s = binarize(np.array([0.0, 1.0], dtype=np.float32))
    assert q[0] == s > 0


def test_binarize_all_zero_warns():
    with pytest.warns(QuantizationWarning):
        q, s = binarize(np.zeros(4, dtype=np.float32))
    assert s == 0 and not q.any()


def test_binarize_empty_rejected():
    with pytest.raises(ValueError):
        binarize(np.zeros(0))


def test_binarize_scale_minimizes_l2_for_fixed_signs():
    # grid-search oracle: mean|w| is the least-squares scale for sign(w)
    w = np.random.default_rng(0).normal(size=1000).astype(np.float64)
    q, s = binarize(w)
    err = np.sum((w - q) ** 2)
    sign = np.where(w >= 0, 1.0, -1.0)
    for beta in np.linspace(0.0, 2 * s, 2001):
        assert err <= np.sum((w - beta * sign) ** 2) + 1e-9


@settings(max_examples=100, deadline=None)
@given(weights)
def test_binarize_value_set(w):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuantizationWarning)
        q, s = binarize(w)
    if np.abs(w).sum() > 0:
        assert s > 0
        assert set(np.unique(np.abs(q))) == {np.float32(s)}


# -- ternarize --------------------------------------------------------------------


def test_ternarize_example():
    q, s = ternarize(np.array([0.8, -0.1, 0.5, -0.9]))
    assert s == pytest.approx(0.733333, abs=1e-6)
    np.testing.assert_allclose(q, [0.733333, 0, 0.733333, -0.733333], atol=1e-6)


def test_ternarize_all_zero():
    with pytest.warns(QuantizationWarning):
        q, s = ternarize(np.zeros(5))
    assert not q.any() and s == 0


@settings(max_examples=100, deadline=None)
@given(weights)
def test_ternarize_value_set(w):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuantizationWarning)
        q, s = ternarize(w)
    vals = set(np.unique(q).tolist())
    assert len(vals) <= 3
    assert vals <= {-np.float32(s), 0.0, np.float32(s)}


# -- uniform4 ---------------------------------------------------------------------


def test_uniform4_example():
    q, s = quantize_uniform4(np.array([-1.4, 0.2, 0.7]))
    assert s == pytest.approx(0.2)
    np.testing.assert_allclose(q, [-1.4, 0.2, 0.8], atol=1e-12)


def test_uniform4_all_zero():
    q, s = quantize_uniform4(np.zeros(6, dtype=np.float32))
    assert not q.any() and s == 1.0


@settings(max_examples=100, deadline=None)
@given(weights)
def test_uniform4_lattice_and_idempotence(x):
    q, s = quantize_uniform4(x)
    k = np.round(q.astype(np.float64) / s)
    assert np.abs(k).max() <= 7
    np.testing.assert_allclose(q, k * s, rtol=1e-6, atol=1e-12)
    q2, _ = quantize_uniform4(q)
    assert q2.tobytes() == q.tobytes()


def test_uniform4_mask_excludes_entries():
    x = np.array([[1.0, 100.0]])
    q, s = quantize_uniform4(x, mask=np.array([[True, False]]))
    assert s == pytest.approx(1 / 7)


# -- STE --------------------------------------------------------------------------


def test_ste_example():
    g = ste_backward(np.ones(3), np.array([0.5, -2.0, 0.9]), QuantSpec(BINARY, ste_clip=1.0))
    np.testing.assert_array_equal(g, [1, 0, 1])


def test_ste_infinite_clip_is_identity():
    g = np.array([0.3, -1.0, 2.0])
    out = ste_backward(g, np.array([5.0, -100.0, 0.1]), QuantSpec(BINARY, ste_clip=np.inf))
    np.testing.assert_array_equal(out, g)


def test_ste_uniform4_passes_inside_range():
    x = np.array([-1.4, 0.2, 0.7])
    np.testing.assert_array_equal(ste_backward(np.ones(3), x, QuantSpec(UNIFORM4), scale=0.2), [1, 1, 1])
    np.testing.assert_array_equal(ste_backward(np.ones(3), x, QuantSpec(UNIFORM4), scale=0.1), [0, 1, 1])


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ste_backward(np.ones(2), np.ones(3), QuantSpec(BINARY))


def test_quant_spec_rejects_bad_clip():
    with pytest.raises(ValueError):
        QuantSpec(BINARY, ste_clip=0)


def test_binarized_linear_latents_get_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(8, 5)))
    w = Tensor(rng.normal(scale=0.5, size=(5, 3)), requires_grad=True)
    target = rng.normal(size=(8, 3))

    def loss_of(wt):
        out = T.matmul(x, quantize_weight(wt, QuantSpec(BINARY)))
        d = out - target
        return (d * d).mean()

    backprop(loss_of(w))
    assert np.abs(w.grad).max() > 0
    # the loss really depends on the latent through the quantizer
    with T.no_grad():
        base = loss_of(w).item()
        w2 = Tensor(w.data * 1.5)
        assert loss_of(w2).item() != base


def test_scale_recomputed_after_update():
    p = QuantizedParam(Tensor([0.2, -0.4]), QuantSpec(BINARY))
    s1 = p.scale
    p.latent.data[:] = [2.0, -4.0]
    assert p.scale == pytest.approx(10 * s1)
    np.testing.assert_allclose(p.quantized, [3.0, -3.0])


def test_ste_training_reaches_separable_accuracy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    # a direction binary weights can express exactly
    y = (X @ np.array([1.0, -1.0, 1.0, -1.0]) > 0).astype(int)
    onehot = np.eye(2)[y]
    w = Tensor(rng.normal(scale=0.1, size=(4, 2)), requires_grad=True)
    lr = 0.05
    for _ in range(200):
        logits = T.matmul(Tensor(X), quantize_weight(w, QuantSpec(BINARY))) * 4.0
        loss = -(T.log_softmax(logits) * onehot).sum() / len(X)
        backprop(loss)
        w.data -= lr * w.grad
        w.grad = None
    with T.no_grad():
        pred = T.matmul(Tensor(X), quantize_weight(w, QuantSpec(BINARY))).data.argmax(1)
    assert (pred == y).mean() >= 0.9


# -- ternary weight split ---------------------------------------------------------


def test_split_example():
    p = QuantizedParam(Tensor([0.8, 0.0, -0.8]), QuantSpec(TERNARY))
    np.testing.assert_allclose(p.quantized, [0.8, 0.0, -0.8])
    a, b = ternary_weight_split(p)
    np.testing.assert_allclose(a.quantized, [0.4, 0.4, -0.4], atol=1e-7)
    np.testing.assert_allclose(b.quantized, [0.4, -0.4, -0.4], atol=1e-7)
    assert a.spec.kind == b.spec.kind == BINARY


def test_split_rejects_non_ternary():
    with pytest.raises(ValueError):
        ternary_weight_split(QuantizedParam(Tensor([1.0, -1.0]), QuantSpec(BINARY)))


def test_split_doubles_parameters():
    p = QuantizedParam(Tensor(np.random.default_rng(2).normal(size=(6, 4))), QuantSpec(TERNARY))
    a, b = ternary_weight_split(p)
    assert a.latent.size + b.latent.size == 2 * p.latent.size


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.floats(-2, 2, allow_nan=False, width=32)))
def test_split_sum_is_exact(w):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QuantizationWarning)
        q, alpha = ternarize(w)
        # halving is exact for every normal float32 scale
        if not q.any() or alpha < 2 * np.finfo(np.float32).tiny:
            return
        a, b = split_latents(w)
        qa, _ = binarize(a)
        qb, _ = binarize(b)
    assert (qa + qb).tobytes() == q.tobytes()


def test_split_rejects_subnormal_scale():
    with pytest.raises(ValueError, match="halved exactly"):
        split_latents(np.array([1e-45], dtype=np.float32))


def test_full_precision_weight_is_identity():
    w = Tensor([1.5, -2.0], requires_grad=True)
    assert quantize_weight(w, QuantSpec(FULL_PRECISION)) is w
