"""Tape correctness checks: hand gradients plus a central finite-difference oracle."""

import numpy as np
import pytest

from strac import autodiff as ad


def finite_difference(loss_fn, params, step=1e-6):
    """Central finite differences of a scalar loss over a list of arrays.

    Independent of the tape: evaluates `loss_fn` only, perturbing one
    coordinate at a time.
    """
    grads = [np.zeros_like(p) for p in params]
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grads


def rel_error(a, b, floor=1e-3):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def test_linear_gradient_hand_value():
    # loss = sum(W @ x) with x = [1, 1] -> dloss/dW is all ones
    w = ad.Tensor(np.array([[2.0, -1.0], [0.5, 3.0]]), requires_grad=True)
    x = ad.Tensor(np.array([[1.0], [1.0]]))
    loss = (w @ x).sum()
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((2, 2)))


def test_dead_relu_gradient_is_zero():
    w = ad.Tensor(np.array([[2.0]]), requires_grad=True)
    x = ad.Tensor(np.array([[-5.0]]))
    loss = (ad.relu(x) @ w).sum()
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros((1, 1)))


def test_backward_rejects_non_scalar():
    w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    y = w @ ad.Tensor(np.eye(2))
    with pytest.raises(ad.AutodiffUsageError):
        ad.backward(y)


def test_backward_twice_on_same_root_raises():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    loss = (w * w).sum()
    ad.backward(loss)
    with pytest.raises(ad.AutodiffUsageError):
        ad.backward(loss)


def test_two_roots_on_shared_graph_are_independent():
    w = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = w * w
    la = y.sum()
    lb = (y * 3.0).sum()
    ad.backward(la)
    ga = w.grad.copy()
    w.zero_grad()
    ad.backward(lb)
    np.testing.assert_allclose(ga, [2.0, 4.0])
    np.testing.assert_allclose(w.grad, [6.0, 12.0])


def test_no_grad_blocks_recording():
    w = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad


def test_softmax_normalized_and_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 11))
    s = ad.softmax(ad.Tensor(x)).value
    assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-12)
    s_shift = ad.softmax(ad.Tensor(x + 123.456)).value
    assert np.max(np.abs(s - s_shift)) < 1e-9


def test_mlp_gradients_match_finite_differences():
    """Random 3-layer MLP: analytic vs central differences, rel error < 1e-6."""
    rng = np.random.default_rng(7)
    sizes = [(5, 8), (8, 6), (6, 3)]
    weights = [rng.normal(scale=0.7, size=s) for s in sizes]
    biases = [rng.normal(scale=0.2, size=s[1]) for s in sizes]
    x = rng.normal(size=(4, 5))
    target = rng.normal(size=(4, 3))

    def run(params):
        ws = params[:3]
        bs = params[3:]
        h = ad.Tensor(x)
        for w, b in zip(ws[:-1], bs[:-1]):
            h = ad.relu(h @ w + b)
        out = h @ ws[-1] + bs[-1]
        diff = out - ad.Tensor(target)
        return (diff * diff).sum() * 0.5

    leaves = [ad.Tensor(a, requires_grad=True) for a in weights + biases]
    loss = run(leaves)
    ad.backward(loss)
    analytic = [leaf.grad for leaf in leaves]

    arrays = [leaf.value for leaf in leaves]
    fd = finite_difference(lambda: run([ad.Tensor(a) for a in arrays]).item(), arrays)
    for a, f in zip(analytic, fd):
        assert rel_error(a, f) < 1e-6


@pytest.mark.parametrize("op", ["softmax", "log_softmax", "max", "mean", "pick", "take_rows", "concat", "reshape3d"])
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x0 = rng.normal(size=(3, 4))

    def run(x):
        if op == "softmax":
            y = ad.softmax(x)
        elif op == "log_softmax":
            y = ad.log_softmax(x)
        elif op == "max":
            y = x.max(axis=1, keepdims=True) + x
        elif op == "mean":
            y = x.mean(axis=0) * x.sum(axis=0)
        elif op == "pick":
            y = ad.pick(x, np.array([1, 3, 0]))
        elif op == "take_rows":
            y = ad.take_rows(x, np.array([2, 0, 0, 1]))
        elif op == "concat":
            y = ad.concat([x, x * 2.0], axis=1)
        elif op == "reshape3d":
            y = (x.reshape(3, 2, 2).sum(axis=1, keepdims=True) + x.reshape(3, 2, 2)).reshape(3, 4)
        w = ad.Tensor(np.linspace(0.5, 1.5, y.value.size).reshape(y.value.shape))
        return (y * w).sum()

    leaf = ad.Tensor(x0.copy(), requires_grad=True)
    ad.backward(run(leaf))
    fd = finite_difference(lambda: run(ad.Tensor(x0)).item(), [x0])[0]
    assert rel_error(leaf.grad, fd) < 1e-6


def test_broadcast_add_unbroadcasts_gradient():
    b = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    x = ad.Tensor(np.ones((5, 3)))
    loss = (x + b).sum()
    ad.backward(loss)
    np.testing.assert_allclose(b.grad, [5.0, 5.0, 5.0])
