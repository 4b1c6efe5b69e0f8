import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import toy_domains
from uidkat.estimator import UnpairedDehazer


@pytest.fixture(scope="module")
def toy_arrays():
    hazy, clean = toy_domains(0, 4, size=32)
    return np.stack(hazy), np.stack(clean)


def test_get_set_params_and_clone():
    est = UnpairedDehazer(variant="T", epochs=3, seed=5)
    params = est.get_params()
    assert params["variant"] == "T" and params["epochs"] == 3
    dup = clone(est)
    assert dup.get_params() == params


def test_transform_before_fit_raises(toy_arrays):
    with pytest.raises(NotFittedError):
        UnpairedDehazer().transform(toy_arrays[0])


def test_input_validation(toy_arrays):
    est = UnpairedDehazer(epochs=2)
    with pytest.raises(ValueError):
        est.fit(toy_arrays[0][..., :1], toy_arrays[1])
    with pytest.raises(ValueError):
        est.fit(toy_arrays[0] * 3.0, toy_arrays[1])
    with pytest.raises(ValueError):
        est.fit(toy_arrays[0][:, :20], toy_arrays[1])


def test_fit_transform_shapes_and_range(toy_arrays):
    hazy, clean = toy_arrays
    est = UnpairedDehazer(variant="T", epochs=2, seed=0, locations=8)
    out = est.fit(hazy, clean).transform(hazy)
    assert out.shape == hazy.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert est.n_features_in_ == 32 * 32 * 3


def test_fit_is_seed_deterministic(toy_arrays):
    hazy, clean = toy_arrays
    a = UnpairedDehazer(variant="T", epochs=2, seed=3, locations=8)
    b = UnpairedDehazer(variant="T", epochs=2, seed=3, locations=8)
    out_a = a.fit(hazy, clean).transform(hazy)
    out_b = b.fit(hazy, clean).transform(hazy)
    np.testing.assert_array_equal(out_a, out_b)
