import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import load_digits
from sklearn.exceptions import NotFittedError

from skd_cil.estimator import SKDIncrementalClassifier

FAST = dict(pretrain_epochs=3, skd_epochs=1, skd_steps_per_epoch=2, pseudo_batch_size=16, latent_dim=16,
            generator_width=8, cil_epochs=2, cil_lr_drops=(1,), batch_size=32)


@pytest.fixture(scope="module")
def digits():
    d = load_digits()
    x = d.images.astype(np.float32) / 16.0
    return x, d.target


@pytest.fixture(scope="module")
def fitted(digits):
    x, y = digits
    base = y < 5
    return SKDIncrementalClassifier(n_incremental_tasks=1, **FAST).fit(x[base], y[base])


class TestParams:
    def test_get_params_and_clone(self):
        est = SKDIncrementalClassifier(beta=1.5, cil_epochs=3)
        params = est.get_params()
        assert params["beta"] == 1.5 and params["cil_epochs"] == 3
        twin = clone(est)
        assert twin.get_params() == params
        assert not hasattr(twin, "model_")

    def test_set_params(self):
        est = SKDIncrementalClassifier().set_params(lambda_exp=20.0)
        assert est.lambda_exp == 20.0


class TestFitPredict:
    def test_fit_outputs(self, fitted, digits):
        x, y = digits
        base = y < 5
        assert list(fitted.classes_) == [0, 1, 2, 3, 4]
        pred = fitted.predict(x[base])
        assert set(pred) <= set(range(5))
        assert (pred == y[base]).mean() > 0.8
        proba = fitted.predict_proba(x[:7])
        assert proba.shape == (7, 5)
        np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-5)
        assert fitted.transform(x[:3]).shape == (3, fitted.model_.feature_dim)

    def test_flat_input_after_fit(self, fitted, digits):
        x, _ = digits
        np.testing.assert_array_equal(fitted.predict(x[:10].reshape(10, -1)), fitted.predict(x[:10]))

    def test_wrong_shape(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict(np.zeros((2, 9, 9), dtype=np.float32))
        with pytest.raises(ValueError):
            fitted.predict(np.zeros((2, 10), dtype=np.float32))

    def test_not_fitted(self, digits):
        with pytest.raises(NotFittedError):
            SKDIncrementalClassifier().predict(digits[0][:2])

    def test_label_count_mismatch(self, digits):
        x, y = digits
        with pytest.raises(ValueError):
            SKDIncrementalClassifier(**FAST).fit(x[:10], y[:9])

    def test_single_class(self, digits):
        x, y = digits
        with pytest.raises(ValueError):
            SKDIncrementalClassifier(**FAST).fit(x[y == 0], y[y == 0])

    def test_nan_input_rejected(self, digits):
        x, y = digits
        bad = x[:20].copy()
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            SKDIncrementalClassifier(**FAST).fit(bad, y[:20])


class TestPartialFit:
    def test_incremental_task(self, digits):
        x, y = digits
        est = SKDIncrementalClassifier(n_incremental_tasks=1, **FAST).fit(x[y < 5], y[y < 5])
        est.partial_fit(x[(y >= 5) & (y < 8)], y[(y >= 5) & (y < 8)])
        assert list(est.classes_) == list(range(8))
        assert est.decision_function(x[:4]).shape == (4, 8)
        assert set(est.predict(x)) <= set(range(8))
        imgs, labels = est.sample_pseudo(12, random_state=1)
        assert imgs.shape == (12, 1, 8, 8)
        assert set(labels) <= set(range(5))
        again, _ = est.sample_pseudo(12, random_state=1)
        np.testing.assert_array_equal(imgs, again)

    def test_overlapping_classes_rejected(self, digits):
        x, y = digits
        est = SKDIncrementalClassifier(n_incremental_tasks=2, **FAST).fit(x[y < 5], y[y < 5])
        with pytest.raises(ValueError):
            est.partial_fit(x[y == 4], y[y == 4])

    def test_too_many_tasks(self, digits):
        x, y = digits
        est = SKDIncrementalClassifier(n_incremental_tasks=1, use_skd=False, **FAST).fit(x[y < 5], y[y < 5])
        est.partial_fit(x[y == 5], y[y == 5])
        with pytest.raises(ValueError):
            est.partial_fit(x[y == 6], y[y == 6])

    def test_partial_fit_first_call_fits(self, digits):
        x, y = digits
        est = SKDIncrementalClassifier(**FAST).partial_fit(x[y < 3], y[y < 3])
        assert list(est.classes_) == [0, 1, 2]

    def test_sample_pseudo_needs_delegator(self, fitted):
        with pytest.raises(ValueError):
            fitted.sample_pseudo(4)
