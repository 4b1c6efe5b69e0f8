import numpy as np
import pytest

from uidkat.grkan import (GRKANLayer, RationalParams, fit_silu_coefficients,
                          grkan_init, rational_backward, rational_eval)
from uidkat.tensor import ShapeError, activation


def brute_rational(x, a, b):
    p = sum(a[k] * x ** k for k in range(len(a)))
    qt = sum(b[k - 1] * x ** k for k in range(1, len(b) + 1))
    return p / (1.0 + abs(qt))


def test_rational_matches_brute_force(rng):
    params = RationalParams(rng.normal(size=(2, 6)), rng.normal(size=(2, 4)))
    x = rng.normal(size=(3, 8))
    y = rational_eval(x, params)
    for i in range(3):
        for j in range(8):
            g = 0 if j < 4 else 1
            want = brute_rational(x[i, j], params.a[g], params.b[g])
            assert y[i, j] == pytest.approx(want, rel=1e-12)


def test_rational_group_index(rng):
    params = RationalParams(rng.normal(size=(4, 6)), rng.normal(size=(4, 4)))
    x = rng.normal(size=17)
    y = rational_eval(x, params, group_index=2)
    want = [brute_rational(v, params.a[2], params.b[2]) for v in x]
    np.testing.assert_allclose(y, want, rtol=1e-12)


def test_rational_denominator_never_below_one(rng):
    params = RationalParams(rng.normal(scale=5, size=(8, 6)),
                            rng.normal(scale=5, size=(8, 4)))
    x = rng.normal(scale=10, size=(100, 64))
    y = rational_eval(x, params)
    assert np.all(np.isfinite(y))


def test_rational_rejects_bad_grouping(rng):
    params = RationalParams(np.zeros((8, 6)), np.zeros((8, 4)))
    with pytest.raises(ShapeError):
        rational_eval(rng.normal(size=(3, 12)), params)


def test_rational_backward_subgradient_at_kink():
    # with b=0 the denominator is identically 1; sign(0)=0 keeps gb finite
    params = RationalParams(np.array([[0.0, 1.0, 0, 0, 0, 0]]),
                            np.zeros((1, 4)))
    x = np.zeros((1, 1))
    gx, ga, gb = rational_backward(x, params, np.ones((1, 1)))
    assert gx[0, 0] == 1.0
    assert np.all(np.isfinite(ga)) and np.all(gb == 0.0)


def test_fit_silu_accuracy():
    a, b = fit_silu_coefficients()
    xs = np.linspace(-3, 3, 2001)
    params = RationalParams(a[None], b[None])
    err = np.abs(rational_eval(xs, params, group_index=0)
                 - activation(xs, "silu")).max()
    assert err < 1e-3


def test_identity_init_is_identity(rng):
    layer = grkan_init(8, 8, groups=4, mode="identity", rng=rng)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    act = rational_eval(x, layer.rational)
    np.testing.assert_allclose(act, x, rtol=1e-6)


def test_layer_rejects_wrong_width(rng):
    layer = grkan_init(16, 8, rng=rng)
    with pytest.raises(ShapeError):
        layer.forward(rng.normal(size=(3, 12)))


def test_weight_sharing_accumulates_grads(rng):
    layer = grkan_init(8, 8, groups=4, rng=rng)
    layer.set_dtype(np.float64)
    x = rng.normal(size=(2, 8))
    _, cache = layer.forward(x)
    layer.backward(cache, np.ones((2, 8)))
    once = layer.grads["weight"].copy()
    layer.backward(cache, np.ones((2, 8)))
    np.testing.assert_allclose(layer.grads["weight"], 2 * once)
