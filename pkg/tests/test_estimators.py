import numpy as np
import pytest
from sklearn.base import clone

from fbseg.estimators import FeedbackSegmenter, FeedforwardSegmenter
from fbseg.polygons import ValidationError, build_split


def tiny_data(count=3, size=16, sigma=0.0, split="train", base_seed=7):
    instances, _ = build_split({"D": count, "sigma": sigma, "H": size, "W": size,
                                "base_seed": base_seed, "split": split})
    X = np.stack([inst.image for inst in instances])
    y = np.stack([inst.mask for inst in instances])
    return X, y


def tiny_estimator(cls, **kw):
    defaults = dict(enc_channels=(4, 6), bottleneck_channels=8, epochs=2)
    defaults.update(kw)
    return cls(**defaults)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = FeedbackSegmenter(timesteps=3, tau=2.0)
        params = est.get_params()
        assert params["timesteps"] == 3 and params["tau"] == 2.0
        est.set_params(epochs=4)
        assert est.epochs == 4

    def test_clone(self):
        est = tiny_estimator(FeedbackSegmenter, random_state=5)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_fit_returns_self_and_sets_state(self):
        X, y = tiny_data()
        est = tiny_estimator(FeedbackSegmenter)
        assert est.fit(X, y) is est
        assert hasattr(est, "model_") and hasattr(est, "loss_curve_")

    def test_unfitted_predict_raises(self):
        with pytest.raises(RuntimeError, match="fit"):
            tiny_estimator(FeedbackSegmenter).predict(np.zeros((1, 16, 16)))


class TestPredictions:
    @pytest.mark.parametrize("cls", [FeedbackSegmenter, FeedforwardSegmenter])
    def test_predict_shapes_and_labels(self, cls):
        X, y = tiny_data()
        est = tiny_estimator(cls).fit(X, y)
        pred = est.predict(X)
        assert pred.shape == X.shape
        assert set(np.unique(pred)) <= {0, 1}

    def test_predict_proba_simplex(self):
        X, y = tiny_data()
        est = tiny_estimator(FeedbackSegmenter).fit(X, y)
        proba = est.predict_proba(X)
        assert proba.shape == (len(X), 2, 16, 16)
        assert np.abs(proba.sum(axis=1) - 1.0).max() < 1e-9

    def test_score_is_mean_f1(self):
        X, y = tiny_data()
        est = tiny_estimator(FeedbackSegmenter).fit(X, y)
        score = est.score(X, y)
        assert 0.0 <= score <= 1.0

    def test_single_image_accepted(self):
        X, y = tiny_data(count=2)
        est = tiny_estimator(FeedbackSegmenter).fit(X, y)
        pred = est.predict(X[0])
        assert pred.shape == (1, 16, 16)

    def test_deterministic_given_random_state(self):
        X, y = tiny_data()
        a = tiny_estimator(FeedbackSegmenter, random_state=3).fit(X, y).predict(X)
        b = tiny_estimator(FeedbackSegmenter, random_state=3).fit(X, y).predict(X)
        np.testing.assert_array_equal(a, b)


class TestValidation:
    def test_bad_image_shape(self):
        est = tiny_estimator(FeedbackSegmenter)
        with pytest.raises(ValidationError):
            est.fit(np.zeros((2, 3, 16, 16, 1)), np.zeros((2, 16, 16)))

    def test_indivisible_extent(self):
        est = tiny_estimator(FeedbackSegmenter)
        with pytest.raises(ValidationError, match="divisible"):
            est.fit(np.zeros((2, 18, 18)), np.zeros((2, 18, 18)))

    def test_mask_mismatch(self):
        est = tiny_estimator(FeedbackSegmenter)
        with pytest.raises(ValidationError):
            est.fit(np.zeros((2, 16, 16)), np.zeros((3, 16, 16)))

    def test_mask_label_range(self):
        est = tiny_estimator(FeedbackSegmenter)
        with pytest.raises(ValidationError, match="labels"):
            est.fit(np.zeros((1, 16, 16)), np.full((1, 16, 16), 7))

    def test_non_finite_images(self):
        est = tiny_estimator(FeedbackSegmenter)
        X = np.zeros((1, 16, 16))
        X[0, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="finite"):
            est.fit(X, np.zeros((1, 16, 16)))
