import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import synthetic_images
from mlrn.estimator import MultiLevelResNetClassifier, check_images


@pytest.fixture(scope="module")
def toy():
    x, y = synthetic_images(40, seed=0, size=16, classes=4)
    return x, np.array(["cat", "dog", "eel", "fox"])[y]


@pytest.fixture(scope="module")
def fitted(toy):
    x, y = toy
    return MultiLevelResNetClassifier(epochs=10, batch_size=8, augment=False, random_state=0).fit(x, y)


class TestCheckImages:
    def test_uint8_scaled(self):
        x = np.full((2, 3, 4, 4), 255, np.uint8)
        out = check_images(x)
        assert out.dtype == np.float64 and out.max() == 1.0

    def test_flat_reshaped_in_plane_order(self):
        x = np.arange(2 * 48, dtype=float).reshape(2, 48) / 100
        out = check_images(x)
        assert out.shape == (2, 3, 4, 4)
        assert out[0, 1, 0, 0] == x[0, 16]

    def test_float_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_images(np.full((1, 3, 2, 2), 2.0))

    def test_nan_rejected(self):
        x = np.zeros((1, 3, 2, 2))
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_images(x)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            check_images(np.zeros((2, 47)))
        with pytest.raises(ValueError):
            check_images(np.zeros((2, 1, 4, 4)))


class TestClassifier:
    def test_params_round_trip(self):
        clf = MultiLevelResNetClassifier(arch="newnet", pool_mode="per_channel_gap", epochs=2)
        p = clf.get_params()
        assert p["arch"] == "newnet" and p["pool_mode"] == "per_channel_gap" and p["epochs"] == 2
        c = clone(clf)
        assert c.get_params() == p and c is not clf
        assert clf.set_params(epochs=5).epochs == 5

    def test_unfitted(self, toy):
        with pytest.raises(NotFittedError):
            MultiLevelResNetClassifier().predict(toy[0])

    def test_fit_predict(self, fitted, toy):
        x, y = toy
        assert set(fitted.classes_) == {"cat", "dog", "eel", "fox"}
        pred = fitted.predict(x)
        assert pred.shape == (40,) and set(pred) <= set(fitted.classes_)
        assert len(fitted.loss_curve_) == 10
        assert fitted.loss_curve_[-1] < fitted.loss_curve_[0]
        assert fitted.score(x, y) > 0.5

    def test_proba(self, fitted, toy):
        p = fitted.predict_proba(toy[0])
        assert p.shape == (40, 4)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
        np.testing.assert_array_equal(fitted.classes_[p.argmax(axis=1)], fitted.predict(toy[0]))

    def test_transform_width(self, fitted, toy):
        # resnet20 on 16x16: taps 16*16 and 8*8 plus 64 head features
        assert fitted.transform(toy[0]).shape == (40, 256 + 64 + 64)

    def test_baseline_transform_width(self, toy):
        x, y = toy
        clf = MultiLevelResNetClassifier(multilevel=False, epochs=1, batch_size=20).fit(x, y)
        assert clf.transform(x).shape == (40, 64)

    def test_deterministic(self, toy):
        x, y = toy
        a = MultiLevelResNetClassifier(epochs=1, batch_size=10, random_state=3).fit(x, y)
        b = MultiLevelResNetClassifier(epochs=1, batch_size=10, random_state=3).fit(x, y)
        assert a.decision_function(x).tobytes() == b.decision_function(x).tobytes()

    def test_shape_mismatch_at_predict(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict(np.zeros((2, 3, 8, 8), np.uint8))

    def test_target_checks(self, toy):
        x, _ = toy
        with pytest.raises(ValueError):
            MultiLevelResNetClassifier(epochs=1).fit(x, np.zeros(40))
        with pytest.raises(ValueError):
            MultiLevelResNetClassifier(epochs=1).fit(x, np.arange(39) % 2)
        with pytest.raises(ValueError):
            MultiLevelResNetClassifier(epochs=1).fit(x, np.linspace(0, 1, 40))
