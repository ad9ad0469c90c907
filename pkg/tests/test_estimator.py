import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from commonrep.estimator import CommonRepresentationNet
from commonrep.validation import check_rgbd


def arrays(samples):
    X = np.stack([np.concatenate([s.rgb, s.hha]) for s in samples])
    y = np.stack([s.labels for s in samples])
    depth = np.stack([s.depth for s in samples])
    return X, y, depth


PARAMS = dict(n_classes=4, feature_channels=6, hidden_channels=3, stage1_iters=4, stage2_iters=3, batch_size=4)


@pytest.fixture(scope="module")
def fitted(tiny_data):
    X, y, depth = arrays(tiny_data)
    return CommonRepresentationNet(setting="ssd", **PARAMS).fit(X, y, depth), X, y


def test_get_params_and_clone():
    est = CommonRepresentationNet(setting="ssd", base_lr=0.02)
    params = est.get_params()
    assert params["setting"] == "ssd" and params["base_lr"] == 0.02
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CommonRepresentationNet().predict(np.zeros((1, 6, 8, 8)))


def test_predict_shapes(fitted):
    est, X, y = fitted
    labels = est.predict(X[:3])
    assert labels.shape == (3, 16, 16) and labels.min() >= 1 and labels.max() <= 4
    assert est.decision_function(X[:3]).shape == (3, 4, 16, 16)
    assert 0.0 <= est.score(X[:3], y[:3]) <= 1.0
    assert len(est.stage1_curve_) == 4 and len(est.stage2_curve_) == 3


def test_single_view_inputs(fitted):
    est, X, _ = fitted
    depth = est.predict_depth(X[:2, :3], views="rgb")
    assert depth.shape == (2, 16, 16) and (depth > 0).all()
    assert est.predict(X[:2, 3:], views="depth").shape == (2, 16, 16)


def test_transform_is_hidden_code(fitted):
    est, X, _ = fitted
    assert est.transform(X[:2]).shape == (2, 3, 4, 4)
    assert est.transform(X[:2, :3], views="rgb").shape == (2, 3, 4, 4)


def test_ss_needs_no_depth(tiny_data):
    X, y, _ = arrays(tiny_data[:8])
    est = CommonRepresentationNet(**PARAMS).fit(X, y)
    with pytest.raises(AttributeError):
        est.predict_depth(X)


def test_ssd_requires_depth(tiny_data):
    X, y, _ = arrays(tiny_data[:8])
    with pytest.raises(ValueError):
        CommonRepresentationNet(setting="ssd", **PARAMS).fit(X, y)


class TestValidation:
    def test_channel_inference(self):
        rgb, hha, views = check_rgbd(np.zeros((2, 6, 8, 8)))
        assert views == "both" and rgb.shape == hha.shape == (2, 3, 8, 8)
        assert check_rgbd(np.zeros((3, 8, 8)))[2] == "rgb"

    def test_rejections(self):
        with pytest.raises(ValueError):
            check_rgbd(np.zeros((1, 6, 10, 8)))
        with pytest.raises(ValueError):
            check_rgbd(np.zeros((1, 3, 8, 8)), views="both")
        with pytest.raises(ValueError):
            check_rgbd(np.full((1, 6, 8, 8), np.nan))
        with pytest.raises(ValueError):
            check_rgbd(np.zeros((1, 5, 8, 8)))

    def test_bad_labels(self, tiny_data):
        X, y, _ = arrays(tiny_data[:4])
        with pytest.raises(ValueError):
            CommonRepresentationNet(**PARAMS).fit(X, y + 10)
