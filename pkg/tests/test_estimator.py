import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clfusion.data import generate_dataset, synth_world
from clfusion.estimator import ContrastiveLatentPrior, PseudoTextAugmenter

FAST = dict(depth=1, width=16, heads=2, timesteps=30, beta_end=0.2, iterations=30, n_id=8, k=3)


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(synth_world(0, 8, 12), 24, 3, seed=1)
    return ds.embeddings.astype(np.float64), ds.w0.astype(np.float64)


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return ContrastiveLatentPrior(**FAST).fit(X, y)


def test_get_params_and_clone():
    est = ContrastiveLatentPrior(margin=0.3, random_state=5)
    params = est.get_params()
    assert params["margin"] == 0.3 and params["random_state"] == 5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(width=32)
    assert est.width == 32


def test_fit_predict_score(fitted, data):
    X, y = data
    assert len(fitted.loss_history_) == 30
    assert fitted.n_features_in_ == 12
    w = fitted.predict(X[:5, 0])
    assert w.shape == (5, 8)
    assert np.array_equal(w, fitted.predict(X[:5, 0]))
    s = fitted.score(X[:5, 0], y[:5])
    assert -1.0 <= s <= 1.0
    assert fitted.last_timing_.total > 0


def test_same_random_state_same_model(data, fitted):
    X, y = data
    again = ContrastiveLatentPrior(**FAST).fit(X, y)
    assert np.array_equal(again.predict(X[:2, 1]), fitted.predict(X[:2, 1]))


def test_validation(data, fitted):
    X, y = data
    with pytest.raises(NotFittedError):
        ContrastiveLatentPrior().predict(X[:, 0])
    with pytest.raises(ValueError):
        ContrastiveLatentPrior(**FAST).fit(X[:, 0], y)  # 2-D X
    with pytest.raises(ValueError):
        ContrastiveLatentPrior(**FAST).fit(X, y[:-1])
    with pytest.raises(ValueError):
        fitted.predict(X[:2, 0, :5])
    bad = X.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        ContrastiveLatentPrior(**FAST).fit(bad, y)


def test_pseudo_text_augmenter():
    X = np.random.default_rng(0).standard_normal((6, 12))
    aug = PseudoTextAugmenter(xi=0.2, random_state=3)
    out = aug.fit_transform(X)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(out, clone(aug).fit(X).transform(X))
    with pytest.raises(NotFittedError):
        PseudoTextAugmenter().transform(X)
