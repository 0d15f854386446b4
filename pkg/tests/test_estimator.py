"""The fit/transform estimator surface."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crafill.estimator import CRAInpainter


def uint8_batch(rng, n, h, w):
    return rng.integers(0, 256, size=(n, h, w, 3), dtype=np.uint8)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    est = CRAInpainter(
        width_mult=0.25, image_size=64, steps=1, batch_size=1, seed=1
    )
    return est.fit(uint8_batch(rng, 4, 64, 64))


class TestEstimatorContract:
    def test_get_set_params_roundtrip(self):
        est = CRAInpainter(width_mult=0.5, steps=7)
        params = est.get_params()
        assert params["width_mult"] == 0.5 and params["steps"] == 7
        est.set_params(steps=3)
        assert est.steps == 3

    def test_clone_preserves_params(self):
        est = CRAInpainter(image_size=64, seed=9)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_raises(self):
        est = CRAInpainter()
        with pytest.raises(NotFittedError):
            est.transform(np.zeros((1, 64, 64, 3), np.float32))

    def test_fit_sets_attributes(self, fitted):
        assert hasattr(fitted, "weights_")
        assert fitted.n_params_ > 0
        assert len(fitted.history_) == 1


class TestTransform:
    def test_nan_holes_filled_context_untouched(self, fitted):
        rng = np.random.default_rng(2)
        base = uint8_batch(rng, 1, 64, 64)[0].astype(np.float32) / 127.5 - 1.0
        holed = base.copy()
        holed[20:40, 10:30, :] = np.nan
        out = fitted.transform(holed[None])[0]
        assert out.shape == base.shape
        assert np.isfinite(out).all()
        hole = np.isnan(holed).any(axis=2)
        np.testing.assert_array_equal(out[~hole], base[~hole])

    def test_predict_is_transform(self, fitted):
        rng = np.random.default_rng(3)
        x = uint8_batch(rng, 1, 64, 64).astype(np.float32) / 127.5 - 1.0
        x[0, :8, :8, :] = np.nan
        np.testing.assert_array_equal(fitted.predict(x), fitted.transform(x))

    def test_non_multiple_size_padded_and_cropped(self, fitted):
        rng = np.random.default_rng(4)
        img = uint8_batch(rng, 1, 96, 80)[0].astype(np.float32) / 127.5 - 1.0
        mask = np.zeros((96, 80), np.float32)
        mask[30:50, 20:40] = 1.0
        out = fitted.inpaint(img, mask)
        assert out.shape == (96, 80, 3)
        ctx = ~mask.astype(bool)
        np.testing.assert_array_equal(out[ctx], img[ctx])

    def test_pad_disabled_rejects_non_multiple(self, fitted):
        no_pad = clone_with_weights(fitted, pad=False)
        img = np.zeros((96, 80, 3), np.float32)
        from crafill.errors import ShapeError

        with pytest.raises(ShapeError):
            no_pad.inpaint(img, np.zeros((96, 80), np.float32))


def clone_with_weights(fitted, **overrides):
    params = dict(fitted.get_params())
    params.update(overrides)
    est = CRAInpainter(**params)
    est.weights_ = fitted.weights_
    est.n_params_ = fitted.n_params_
    est.history_ = fitted.history_
    return est


class TestPersistence:
    def test_save_load_same_outputs(self, fitted, tmp_path):
        path = tmp_path / "model.craw"
        fitted.save(path)
        loaded = CRAInpainter.load(path)
        assert loaded.image_size == 64 and loaded.width_mult == 0.25
        rng = np.random.default_rng(5)
        x = uint8_batch(rng, 1, 64, 64).astype(np.float32) / 127.5 - 1.0
        x[0, 10:20, 10:20, :] = np.nan
        np.testing.assert_array_equal(loaded.transform(x), fitted.transform(x))
