import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wdis import WassersteinDisentangler, synth
from wdis.estimator import check_labels

SMALL = dict(hidden=(8,), d_z=5, split=3, n_fg=4, n_bg=3, critic_hidden=(8,), batch_size=16, iterations=4, snapshot_every=2)


@pytest.fixture(scope="module")
def data():
    spec = synth.FactorSpec(n_fg=4, n_bg=3, d_x=6, seed=0)
    ds = synth.make_dataset(spec, synth.CorrelationSpec.unbiased(4, 3), 120, np.random.default_rng(0))
    return ds.x, ds.labels


@pytest.fixture(scope="module")
def fitted(data):
    return WassersteinDisentangler(random_state=3, **SMALL).fit(*data)


def test_clone_and_params():
    est = WassersteinDisentangler(alpha=0.5, **SMALL)
    params = est.get_params()
    assert params["alpha"] == 0.5 and params["beta2"] == 0.9
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lam=2.0)
    assert est.lam == 2.0


def test_transform_shapes(fitted, data):
    x, _ = data
    z = fitted.transform(x)
    assert z.shape == (120, 5)
    assert np.array_equal(fitted.transform_fg(x), z[:, :3])
    assert np.array_equal(fitted.transform_bg(x), z[:, 3:])
    assert fitted.predict(x).shape == (120, 2)
    assert [h["iteration"] for h in fitted.history_] == [2, 4, 4]
    assert list(fitted.get_feature_names_out()) == ["z_fg0", "z_fg1", "z_fg2", "z_bg0", "z_bg1"]


def test_fit_deterministic(fitted, data):
    again = WassersteinDisentangler(random_state=3, **SMALL).fit(*data)
    assert np.array_equal(again.transform(data[0]), fitted.transform(data[0]))


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        WassersteinDisentangler(**SMALL).transform(data[0])


def test_feature_count_checked(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted.transform(np.zeros((2, 7)))


@pytest.mark.parametrize(
    "y, fragment",
    [
        (np.zeros((5, 3), dtype=int), "shape"),
        (np.array([[4, 0]] * 5), "foreground"),
        (np.array([[0, 3]] * 5), "background"),
        (np.array([[0, -2]] * 5), "background"),
        (np.array([[0.5, 0]] * 5), "integer"),
    ],
)
def test_check_labels_errors(y, fragment):
    with pytest.raises(ValueError, match=fragment):
        check_labels(y, 5, 4, 3)


def test_check_labels_accepts_missing():
    y = check_labels(np.array([[0, -1], [3, 2]]), 2, 4, 3)
    assert y.dtype == np.int64


def test_fit_transform(data):
    est = WassersteinDisentangler(random_state=1, **SMALL)
    assert est.fit_transform(*data).shape == (120, 5)
