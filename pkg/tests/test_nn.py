"""Layer, optimizer, and checkpoint behavior."""

import numpy as np
import pytest

from strac import autodiff as ad
from strac import nn

from test_autodiff import finite_difference, rel_error


def make_layer(noisy=True, in_dim=2, out_dim=2, bias=True, seed=0):
    return nn.Dense("lyr", in_dim, out_dim, np.random.default_rng(seed), bias=bias, noisy=noisy)


def test_noise_off_identity_case():
    layer = make_layer(noisy=True)
    layer.w_mu.value = np.eye(2)
    layer.b_mu.value = np.zeros(2)
    out = layer(ad.Tensor(np.array([[3.0, -1.0]])), noise=None)
    np.testing.assert_array_equal(out.value, [[3.0, -1.0]])


def test_zero_sigma_matches_noise_off():
    layer = make_layer(noisy=True)
    layer.w_sigma.value = np.zeros((2, 2))
    layer.b_sigma.value = np.zeros(2)
    x = ad.Tensor(np.array([[0.7, 0.2]]))
    eps = layer.sample_noise(np.random.default_rng(5))
    np.testing.assert_array_equal(layer(x, noise=eps).value, layer(x, noise=None).value)


def test_hand_multiplication():
    layer = nn.Dense("l", 2, 1, np.random.default_rng(0), bias=True, noisy=False)
    layer.w_mu.value = np.array([[1.0], [2.0]])
    layer.b_mu.value = np.array([0.5])
    out = layer(ad.Tensor(np.array([[1.0, 1.0]])))
    np.testing.assert_array_equal(out.value, [[3.5]])


def test_noise_off_forward_bit_identical():
    layer = make_layer(noisy=True, seed=3)
    x = ad.Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    a = layer(x).value
    b = layer(x).value
    assert np.array_equal(a, b)


def test_noisy_forward_gradients_match_finite_differences():
    # noise frozen: gradients flow to both the mean and sigma parameters
    layer = make_layer(noisy=True, in_dim=3, out_dim=2, seed=9)
    eps = layer.sample_noise(np.random.default_rng(11))
    x = np.random.default_rng(2).normal(size=(5, 3))
    target = np.random.default_rng(3).normal(size=(5, 2))

    def loss_value():
        out = layer(ad.Tensor(x), noise=eps)
        d = out - ad.Tensor(target)
        return (d * d).sum().item()

    out = layer(ad.Tensor(x), noise=eps)
    d = out - ad.Tensor(target)
    ad.backward((d * d).sum())
    params = layer.params()
    fd = finite_difference(loss_value, [params[k].value for k in sorted(params)])
    for k, f in zip(sorted(params), fd):
        assert rel_error(params[k].grad, f) < 1e-6, k


def test_dense_shape_mismatch_raises():
    layer = make_layer()
    with pytest.raises(ad.AutodiffUsageError):
        layer(ad.Tensor(np.zeros((1, 5))))


def test_adam_zero_gradient_keeps_params():
    layer = make_layer(noisy=False)
    params = layer.params()
    opt = nn.Adam(params, lr=0.01)
    before = {k: t.value.copy() for k, t in params.items()}
    opt.step({k: np.zeros_like(t.value) for k, t in params.items()})
    for k, t in params.items():
        np.testing.assert_array_equal(t.value, before[k])
    assert opt.step_count == 1


def test_adam_single_step_hand_value():
    # fresh moments, g = 1: delta = -lr * 1 / (1 + eps)
    p = {"w": ad.Tensor(np.zeros(1), requires_grad=True)}
    opt = nn.Adam(p, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step({"w": np.ones(1)})
    expected = -1e-4 / (1.0 + 1e-8)
    assert abs(p["w"].value[0] - expected) < 1e-18


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": ad.Tensor(np.array([0.3]), requires_grad=True)}
    opt = nn.Adam(p, lr=1e-3)
    history = [p["w"].value[0]]
    for _ in range(50):
        opt.step({"w": np.array([2.5])})
        history.append(p["w"].value[0])
    diffs = np.diff(history)
    assert np.all(diffs < 0.0)


def test_adam_rejects_nan_gradient_without_mutation():
    p = {"w": ad.Tensor(np.array([1.0]), requires_grad=True)}
    opt = nn.Adam(p)
    with pytest.raises(nn.GradientError):
        opt.step({"w": np.array([np.nan])})
    assert opt.step_count == 0
    np.testing.assert_array_equal(p["w"].value, [1.0])


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = nn.clip_by_global_norm(grads, 2.5)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(np.sum(np.square(g)) for g in clipped.values()))
    assert total == pytest.approx(2.5)
    same, _ = nn.clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_checkpoint_round_trip(tmp_path):
    arrays = {"layer.w_mu": np.arange(6.0).reshape(2, 3), "layer.b_mu": np.array([1.0, 2.0, 3.0])}
    path = nn.save_checkpoint(tmp_path / "ck.npz", arrays, meta={"version": 7})
    loaded, meta = nn.load_checkpoint(path)
    assert meta["version"] == 7
    assert meta["format_version"] == nn.CHECKPOINT_FORMAT_VERSION
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)
