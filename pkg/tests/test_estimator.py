import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from noise2map.data import SynthSpec, synth_scene
from noise2map.estimator import DiffusionSegmenter
from noise2map.exceptions import LabelError, ShapeError


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    spec = SynthSpec(size=16, n_buildings=(1, 2))
    scenes = [synth_scene(rng, spec) for _ in range(6)]
    X = np.stack([np.concatenate([s[0], s[1]]) for s in scenes])  # uint8 pairs
    y = np.stack([s[3] for s in scenes]).astype(np.int64)
    return X, y


def test_params_round_trip():
    est = DiffusionSegmenter(task="cd", epochs=3, lr=1e-3)
    params = est.get_params()
    assert params["task"] == "cd" and params["epochs"] == 3
    twin = clone(est).set_params(epochs=5)
    assert twin.epochs == 5 and est.epochs == 3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DiffusionSegmenter().predict(np.zeros((1, 3, 16, 16), np.uint8))


def test_fit_predict(toy):
    X, y = toy
    est = DiffusionSegmenter(task="cd", epochs=2, batch_size=3, grad_accum=1, lr=1e-3, random_state=1)
    assert est.fit(X, y, X[:2], y[:2]) is est
    pred = est.predict(X)
    assert pred.shape == y.shape and set(np.unique(pred)) <= {0, 1}
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert 0.0 <= est.score(X, y) <= 1.0
    assert len(est.history_) == 4
    again = DiffusionSegmenter(**est.get_params()).fit(X, y, X[:2], y[:2])
    np.testing.assert_array_equal(again.predict(X), pred)


def test_input_validation(toy):
    X, y = toy
    est = DiffusionSegmenter(task="cd", epochs=1)
    with pytest.raises(ShapeError):
        est.fit(X[:, :3], y)
    with pytest.raises(LabelError):
        est.fit(X, y + 2)
    with pytest.raises(ShapeError):
        est.fit(X[:, :, :15, :15], y[:, :15, :15])
