import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dacbio.biometry import NoSkullError, gaussian_target
from dacbio.config import variant_config
from dacbio.estimator import BiometryExtractor, DACSegmenter
from dacbio.validation import ShapeError


def _data(n=4, shape=(64, 64), seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    X, Y = [], []
    for _ in range(n):
        mask = ((xx - 32) ** 2 / 20**2 + (yy - 32) ** 2 / 15**2 <= 1).astype(np.float32)
        X.append(np.clip(0.3 + 0.5 * mask + 0.05 * rng.standard_normal(shape), 0, 1))
        Y.append(np.concatenate([mask[None], gaussian_target([(32, 26), (32, 38)], 1.0, shape)]))
    return np.array(X, np.float32), np.array(Y, np.float32)


def test_params_and_clone():
    est = DACSegmenter(variant="5", epochs=3, beta=0.01)
    params = est.get_params()
    assert params["variant"] == "5" and params["beta"] == 0.01
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_build_config_matches_presets():
    assert DACSegmenter(variant="7").build_config() == variant_config("7")
    cfg = DACSegmenter(variant="7", use_sc=False, adapt_space="feature", beta=0.1).build_config()
    assert cfg.sc is None and cfg.dc.adapt_space == "feature" and cfg.dc.beta == 0.1
    cfg = DACSegmenter(variant="2", use_dc=True).build_config()
    assert cfg.dc is not None and cfg.dc.loss_family == "ls_gan"
    assert DACSegmenter.from_config(variant_config("6")).build_config() == variant_config("6")


def test_fit_predict_shapes():
    X, Y = _data()
    est = DACSegmenter(variant="7", epochs=1, lr_milestones=(), batch_size=2, input_shape=(32, 32), sigma=1.0)
    with pytest.raises(NotFittedError):
        est.predict_proba(X)
    est.fit(X, Y, X_target=X[:2])
    P = est.predict_proba(X)
    assert P.shape == (4, 3, 32, 32) and ((P >= 0) & (P <= 1)).all()
    out = est.predict(X, (0.2, 0.2))
    assert out.shape == (4, 2)
    results = est.predict_biometry(X, np.full((4, 2), 0.2))
    assert len(results) == 4


def test_fit_rejects_bad_inputs():
    X, Y = _data()
    est = DACSegmenter(variant="2", epochs=1, lr_milestones=(), input_shape=(32, 32))
    with pytest.raises(ShapeError):
        est.fit(X, Y[:2])
    with pytest.raises(ValueError):
        est.fit(X * np.nan, Y)


def test_extractor_transform():
    _, Y = _data(2)
    out = BiometryExtractor().fit().transform(Y, spacing=(0.5, 0.5))
    assert out.shape == (2, 2)
    assert out[0, 1] == pytest.approx(12 * 0.5)
    assert np.all(np.isfinite(out))
    empty = np.zeros((1, 3, 64, 64), np.float32)
    empty[0, 1, 5, 5] = empty[0, 2, 9, 9] = 1
    assert np.isnan(BiometryExtractor().transform(empty)).all()
    res = BiometryExtractor()._extract(empty, [(1.0, 1.0)])
    assert isinstance(res[0], NoSkullError)
    with pytest.raises(ShapeError):
        BiometryExtractor().transform(Y, spacing=np.ones((3, 2)))


def test_from_checkpoint(tiny_checkpoint):
    est = DACSegmenter.from_checkpoint(tiny_checkpoint)
    assert est.variant == "5" and est.input_shape == (64, 64)
    P = est.predict_proba(np.random.default_rng(0).random((2, 448, 576)))
    assert P.shape == (2, 3, 64, 64)
