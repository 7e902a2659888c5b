import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerpar.tensor import (DimensionError, SeededRng, affine, finite_diff_grad, rel_error, relu,
                             softmax_cross_entropy)


def naive_affine(x, W, b):
    out = np.zeros((x.shape[0], W.shape[1]))
    for i in range(x.shape[0]):
        for j in range(W.shape[1]):
            s = b[j]
            for m in range(x.shape[1]):
                s += x[i, m] * W[m, j]
            out[i, j] = s
    return out


def test_affine_identity_weights():
    assert np.array_equal(affine(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2)), [[1.0, 2.0]])


def test_affine_zero_weights_pass_bias():
    assert np.array_equal(affine(np.array([[1.0, 2.0]]), np.zeros((2, 2)), np.array([3.0, 4.0])), [[3.0, 4.0]])


def test_affine_matches_triple_loop():
    rng = SeededRng(1)
    x, W, b = rng.normal((2, 3)), rng.normal((3, 2)), rng.normal(2)
    assert np.allclose(affine(x, W, b), naive_affine(x, W, b), rtol=0, atol=1e-14)


def test_affine_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        affine(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))


def test_relu_cases():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0])
    assert np.array_equal(relu(x), x)
    r = SeededRng(3).normal(20)
    assert np.array_equal(relu(r), [v if v > 0 else 0.0 for v in r])


def test_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert round(loss, 7) == 1.3862944


def test_cross_entropy_grad_rows_sum_to_zero():
    logits = SeededRng(4).normal((6, 5))
    _, g = softmax_cross_entropy(logits, [0, 1, 2, 3, 4, 0])
    assert np.max(np.abs(g.sum(axis=1))) <= 1e-12


def test_cross_entropy_grad_matches_fd():
    logits = SeededRng(5).normal((3, 4))
    labels = [2, 0, 3]
    _, g = softmax_cross_entropy(logits, labels)
    fd = finite_diff_grad(lambda z: softmax_cross_entropy(z, labels)[0], logits)
    assert rel_error(g, fd) <= 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_cross_entropy_stable_for_huge_logits():
    loss, g = softmax_cross_entropy(np.array([[1e4, 0.0, -1e4]]), [0])
    assert math.isfinite(loss) and np.all(np.isfinite(g))


def test_cross_entropy_decreases_as_correct_logit_grows():
    losses = [softmax_cross_entropy(np.array([[z, 0.0, 0.0]]), [0])[0] for z in np.linspace(0, 30, 31)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert min(losses) >= 0


def test_fd_known_gradient():
    g = finite_diff_grad(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]), 1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_constant_function():
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.ones(4)), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_fd_exact_on_quadratics(x, A, c):
    def f(v):
        return float(v @ A @ v + c @ v)

    exact = (A + A.T) @ x + c
    assert np.max(np.abs(finite_diff_grad(f, x) - exact)) <= 1e-9


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)


def test_rng_reproducible_and_keyed():
    a = SeededRng(11, 2).normal(5)
    assert np.array_equal(a, SeededRng(11, 2).normal(5))
    assert not np.array_equal(a, SeededRng(11, 3).normal(5))
    assert np.array_equal(SeededRng(11).child(2).normal(5), a)


def test_ops_are_pure():
    x = SeededRng(2).normal((3, 3))
    before = x.copy()
    relu(x)
    affine(x, np.eye(3), np.zeros(3))
    assert np.array_equal(x, before)
