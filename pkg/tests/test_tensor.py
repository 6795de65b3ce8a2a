"""Compute-core tests: op examples, gradient oracles, invariants."""

import numpy as np
import pytest

import sqt.tensor as T


def matmul_oracle(a, b):
    """Reference triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += float(a[i, l]) * float(b[l, j])
            out[i, j] = acc
    return out


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    a = T.tensor(np.eye(2))
    b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.allclose(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_example():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.tensor([[5.0], [6.0]])
    expected = matmul_oracle(a.data, b.data)  # [[17], [39]]
    assert np.allclose(expected, [[17.0], [39.0]])
    assert np.allclose(T.matmul(a, b).data, expected)


def test_matmul_random_vs_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    got = T.matmul(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64)).data
    assert np.abs(got - matmul_oracle(a, b)).max() < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


# ----------------------------------------------------------------- softmax

def test_softmax_uniform_logits():
    p = T.softmax_rows(T.tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(p.data, 1.0 / 3.0, atol=1e-7)


def test_softmax_hand_example():
    p = T.softmax_rows(T.tensor([[0.0, np.log(3.0)]], dtype=np.float64))
    assert np.allclose(p.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_single_live_entry():
    p = T.softmax_rows(T.tensor([[5.0, 5.0]]), mask=np.array([[True, False]]))
    assert np.allclose(p.data, [[1.0, 0.0]])
    assert p.data[0, 1] == 0.0


def test_softmax_fully_masked_row_errors():
    with pytest.raises(ValueError):
        T.softmax_rows(T.tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=(5, 7)) * 10
        p = T.softmax_rows(T.tensor(x, dtype=np.float64))
        assert np.abs(p.data.sum(axis=1) - 1.0).max() < 1e-6
        shifted = T.softmax_rows(T.tensor(x + rng.normal(), dtype=np.float64))
        assert np.abs(p.data - shifted.data).max() < 1e-6


# --------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_collapses_to_bias():
    x = T.tensor([[3.0, 3.0, 3.0, 3.0]])
    gain = T.tensor(np.ones(4))
    bias = T.tensor(np.zeros(4))
    assert np.allclose(T.layer_norm(x, gain, bias).data, 0.0, atol=1e-3)


def test_layer_norm_standardizes():
    # row (1, -1) already has mean 0; unit variance as eps -> 0
    x = T.tensor([[1.0, -1.0]], dtype=np.float64)
    gain = T.tensor(np.ones(2), dtype=np.float64)
    bias = T.tensor(np.zeros(2), dtype=np.float64)
    y = T.layer_norm(x, gain, bias, eps=1e-12)
    assert np.allclose(y.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_zero_gain_gives_bias():
    rng = np.random.default_rng(0)
    x = T.tensor(rng.normal(size=(3, 6)))
    gain = T.tensor(np.zeros(6))
    bias = T.tensor(rng.normal(size=6).astype(np.float32))
    y = T.layer_norm(x, gain, bias)
    assert np.allclose(y.data, np.broadcast_to(bias.data, (3, 6)), atol=1e-6)


# ------------------------------------------------------------ cross entropy

def test_cross_entropy_uniform():
    p = T.tensor(np.full((3, 4), 0.25))
    loss = T.cross_entropy(p, np.array([0, 1, 3]), mode="probs")
    assert abs(loss.item() - np.log(4.0)) < 1e-6


def test_cross_entropy_hand_example():
    p = T.tensor([[0.25, 0.75]], dtype=np.float64)
    loss = T.cross_entropy(p, np.array([1]), mode="probs")
    assert abs(loss.item() - (-np.log(0.75))) < 1e-9


def test_cross_entropy_one_hot_limit():
    p = T.tensor([[1e-9, 1.0 - 1e-9]], dtype=np.float64)
    loss = T.cross_entropy(p, np.array([1]), mode="probs")
    assert loss.item() < 1e-8


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(T.tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_masked_rows_excluded():
    logits = T.tensor(np.array([[0.0, 10.0], [100.0, 0.0]]), dtype=np.float64)
    loss = T.cross_entropy(logits, np.array([1, 1]), mask=np.array([True, False]))
    assert loss.item() < 1e-4  # the terrible second row is padding


# ------------------------------------------------------------------ backward

def test_backward_quadratic():
    x = T.tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = T.tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_shared_parameter_accumulates_both_branches():
    x = T.tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    # y = sum(x*x) + sum(3*x): dy/dx = 2x + 3
    loss = T.add(T.sum_all(T.mul(x, x)), T.sum_all(T.scale(x, 3.0)))
    T.backward(loss)
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_softmax_cross_entropy_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = T.tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    targets = rng.integers(0, 6, size=4)

    def f(t):
        return T.cross_entropy(T.softmax_rows(t), targets, mode="probs")

    assert T.finite_difference_check(f, x, h=1e-5) <= 1e-3


# ------------------------------------------------- finite difference checker

def test_fd_exact_for_linear():
    x = T.tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True,
                 dtype=np.float64)
    assert T.finite_difference_check(T.sum_all, x, h=1e-3) < 1e-9


def test_fd_recovers_cubic_gradient():
    x = T.tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)

    def f(t):
        return T.sum_all(T.mul(T.mul(t, t), t))

    x.grad = None
    loss = f(x)
    T.backward(loss)
    assert np.allclose(x.grad, [3.0, 12.0])
    assert T.finite_difference_check(f, x, h=1e-3) < 1e-4


def test_fd_matmul_chain():
    rng = np.random.default_rng(5)
    x = T.tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    w1 = T.tensor(rng.normal(size=(4, 5)), dtype=np.float64)
    w2 = T.tensor(rng.normal(size=(5, 2)), dtype=np.float64)

    def f(t):
        h = T.matmul(t, w1)
        return T.sum_all(T.mul(T.matmul(h, w2), T.matmul(h, w2)))

    assert T.finite_difference_check(f, x, h=1e-4) <= 1e-3


OPS = {
    "relu": lambda t: T.sum_all(T.mul(T.relu(t), T.tensor(_W, dtype=np.float64))),
    "softmax": lambda t: T.sum_all(T.mul(T.softmax_rows(t), T.tensor(_W, dtype=np.float64))),
    "log_clamped": lambda t: T.sum_all(T.mul(
        T.log_clamped(T.softmax_rows(t)), T.tensor(_W, dtype=np.float64))),
    "normalize_rows": lambda t: T.sum_all(T.mul(
        T.normalize_rows(t), T.tensor(_W, dtype=np.float64))),
    "mean": lambda t: T.mean_all(T.mul(t, t)),
    "reshape_swap": lambda t: T.sum_all(T.mul(
        T.swapaxes(T.reshape(t, (2, 2, 5)), 0, 1),
        T.tensor(_W.reshape(2, 2, 5).swapaxes(0, 1), dtype=np.float64))),
    "concat_slice": lambda t: T.sum_all(T.mul(
        T.concat0(T.slice0(t, 0, 2), t), T.tensor(_W2, dtype=np.float64))),
}
_W = np.random.default_rng(21).normal(size=(4, 5))
_W2 = np.random.default_rng(22).normal(size=(6, 5))


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    # >= 20 random instances per differentiable op, 64-bit mode
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x = T.tensor(rng.normal(size=(4, 5)) + 0.1, requires_grad=True,
                     dtype=np.float64)
        assert T.finite_difference_check(OPS[name], x, h=1e-5) <= 1e-3


def test_batch_split_gradient_accumulation():
    # grads from two half batches sum to the whole-batch grads
    rng = np.random.default_rng(9)
    w = T.tensor(rng.normal(size=(6, 3)), requires_grad=True, dtype=np.float64)
    x = rng.normal(size=(8, 6))
    targets = rng.integers(0, 3, size=8)

    def run(rows, tg, scale):
        w.grad = None
        loss = T.scale(T.cross_entropy(T.matmul(T.tensor(rows, dtype=np.float64), w), tg), scale)
        T.backward(loss)
        return np.array(w.grad)

    whole = run(x, targets, 1.0)
    halves = run(x[:4], targets[:4], 0.5) + run(x[4:], targets[4:], 0.5)
    assert np.abs(whole - halves).max() < 1e-5


def test_straight_through_passes_gradient():
    x = T.tensor(np.array([[1.0, 2.0]]), requires_grad=True, dtype=np.float64)
    codes = np.array([[10.0, 20.0]])
    y = T.straight_through(x, codes)
    assert np.allclose(y.data, codes)
    T.backward(T.sum_all(y))
    assert np.allclose(x.grad, 1.0)


def test_dropout_scales_and_masks():
    rng = np.random.default_rng(2)
    x = T.tensor(np.ones((100, 100)), requires_grad=True)
    y = T.dropout(x, 0.5, rng)
    kept = y.data != 0
    assert 0.4 < kept.mean() < 0.6
    assert np.allclose(y.data[kept], 2.0)


def test_no_grad_skips_recording():
    x = T.tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad
