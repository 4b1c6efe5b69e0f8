import numpy as np
import pytest

from uidkat.tensor import (Adam, AdamState, Module, NonFiniteError,
                           ShapeError, activation, adam_step, avg_pool,
                           avg_pool_backward, check_finite, conv2d,
                           conv2d_backward, count_macs, instance_norm,
                           layer_norm, nearest_upsample,
                           nearest_upsample_backward, pixel_shuffle,
                           space_to_depth)


def brute_conv2d(x, w, b, stride, padding, pad_mode):
    mode = "reflect" if pad_mode == "reflect" else "constant"
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                mode=mode)
    bs, cin, h, wd = xp.shape
    cout, _, k, _ = w.shape
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    y = np.zeros((bs, cout, oh, ow))
    for n in range(bs):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    y[n, co, i, j] = (patch * w[co]).sum() + b[co]
    return y


@pytest.mark.parametrize("stride,padding,pad_mode", [
    (1, 0, "zero"), (1, 1, "zero"), (2, 1, "zero"), (1, 2, "reflect"),
    (2, 3, "reflect")])
def test_conv2d_matches_brute_force(rng, stride, padding, pad_mode):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = conv2d(x, w, b, stride, padding, pad_mode)
    want = brute_conv2d(x, w, b, stride, padding, pad_mode)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv2d_rejects_bad_rank(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(3, 9, 8)), rng.normal(size=(4, 3, 3, 3)))


def test_conv2d_backward_shapes(rng):
    x = rng.normal(size=(1, 3, 8, 8))
    w = rng.normal(size=(5, 3, 3, 3))
    y = conv2d(x, w, None, 2, 1)
    gx, gw, gb = conv2d_backward(x, w, np.ones_like(y), 2, 1)
    assert gx.shape == x.shape and gw.shape == w.shape and gb.shape == (5,)


def test_pixel_shuffle_space_to_depth_inverse(rng):
    x = rng.normal(size=(2, 12, 5, 6))
    np.testing.assert_array_equal(space_to_depth(pixel_shuffle(x, 2), 2), x)


def test_avg_pool_oracle(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    y = avg_pool(x, 2)
    assert y[0, 0, 0, 0] == pytest.approx(x[0, 0, :2, :2].mean())
    g = avg_pool_backward(np.ones_like(y), 2)
    np.testing.assert_allclose(g, 0.25)


def test_nearest_upsample_roundtrip(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    up = nearest_upsample(x, 2)
    assert up.shape == (1, 3, 8, 8)
    np.testing.assert_allclose(nearest_upsample_backward(up, 2), 4 * x)


def test_instance_norm_statistics(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(2, 4, 8, 8))
    y = instance_norm(x, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_layer_norm_statistics(rng):
    t = rng.normal(loc=-1.0, scale=3.0, size=(5, 32))
    y = layer_norm(t, np.ones(32), np.zeros(32))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)


def test_activation_values():
    x = np.array([-2.0, 0.0, 2.0])
    np.testing.assert_allclose(activation(x, "relu"), [0, 0, 2])
    np.testing.assert_allclose(activation(x, "tanh"), np.tanh(x))
    np.testing.assert_allclose(activation(x, "silu"),
                               x / (1 + np.exp(-x)), rtol=1e-12)


def test_adam_step_first_update_oracle():
    p = np.array([1.0])
    g = np.array([0.5])
    state = AdamState.for_param(p, lr=0.1)
    adam_step(p, g, state)
    # after one step the bias-corrected update equals lr * sign-ish term
    expected = 1.0 - 0.1 * 0.5 / (np.abs(0.5) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-6)


def test_adam_optimizer_updates_all_params(rng):
    class Toy(Module):
        def __init__(self):
            super().__init__()
            self.add_param("w", np.ones(3))

    toy = Toy()
    opt = Adam([toy], lr=0.1)
    toy.grads["w"][:] = 1.0
    before = toy.params["w"].copy()
    opt.step()
    assert np.all(toy.params["w"] < before)


def test_mac_tally_conv(rng):
    x = np.zeros((1, 3, 8, 8), dtype=np.float32)
    w = np.zeros((4, 3, 3, 3), dtype=np.float32)
    with count_macs() as tally:
        conv2d(x, w, None, 1, 1)
    assert tally["conv2d"] == 4 * 3 * 9 * 8 * 8


def test_check_finite_raises():
    with pytest.raises(NonFiniteError):
        check_finite("x", np.array([1.0, np.nan]))
