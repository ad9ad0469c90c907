"""scikit-learn style wrapper around the two-stage training procedure."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import mvae as mv
from .autodiff import no_grad
from .data import Sample
from .metrics import ConfusionMatrix, iou
from .training import Model, TrainConfig, features, predict, train_stage1, train_stage2
from .validation import check_depth, check_labels, check_rgbd


class CommonRepresentationNet(TransformerMixin, BaseEstimator):
    """Joint RGB-D segmentation (and optionally depth estimation) through a
    shared representation that either view alone can produce.

    ``X`` is ``N x 6 x H x W`` (rgb channels then HHA channels) for both
    views, or ``N x 3 x H x W`` together with ``views="rgb"`` or
    ``views="depth"``.  ``y`` holds labels 1..K with 0 for unlabelled pixels.
    """

    def __init__(
        self,
        setting="ss",
        n_classes=5,
        feature_channels=16,
        hidden_channels=8,
        stage1_iters=2000,
        stage2_iters=1000,
        batch_size=8,
        base_lr=0.01,
        stage2_lr=0.001,
        rec_weight=1.0,
        corr_weight=0.0,
        depth_loss="smooth-l1",
        augment=True,
        random_state=0,
    ):
        self.setting = setting
        self.n_classes = n_classes
        self.feature_channels = feature_channels
        self.hidden_channels = hidden_channels
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.stage2_lr = stage2_lr
        self.rec_weight = rec_weight
        self.corr_weight = corr_weight
        self.depth_loss = depth_loss
        self.augment = augment
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            setting=self.setting,
            n_classes=self.n_classes,
            feature_channels=self.feature_channels,
            hidden_channels=self.hidden_channels,
            stage1_iters=self.stage1_iters,
            stage2_iters=self.stage2_iters,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            stage2_lr=self.stage2_lr,
            rec_weight=self.rec_weight,
            corr_weight=self.corr_weight,
            depth_loss=self.depth_loss,
            augment=self.augment,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y, depth=None):
        rgb, hha, _ = check_rgbd(X, "both")
        n, size = rgb.shape[0], rgb.shape[-2:]
        y = check_labels(y, n, self.n_classes, size)
        if depth is None:
            if self.setting == "ssd":
                raise ValueError("the ssd setting needs ground-truth depth")
            depth = np.ones((n,) + tuple(size))
        depth = check_depth(depth, n, size)
        cfg = self._config()
        samples = [Sample(rgb[i], hha[i], y[i], depth[i], id=str(i)) for i in range(n)]
        s1 = train_stage1(cfg, samples)
        s2 = train_stage2(cfg, samples, s1.rgb, s1.depth)
        self.model_ = s2.model
        self.stage1_curve_ = s1.curve
        self.stage2_curve_ = s2.curve
        return self

    def _predict(self, X, views):
        check_is_fitted(self, "model_")
        rgb, hha, _ = check_rgbd(X, views)
        return predict(self.model_, rgb, hha)

    def decision_function(self, X, views=None):
        """Per-class segmentation logits, ``N x K x H x W``."""
        return self._predict(X, views).seg_logits

    def predict(self, X, views=None):
        return self.decision_function(X, views).argmax(axis=1) + 1

    def predict_depth(self, X, views=None):
        if self.setting != "ssd":
            raise AttributeError("depth prediction needs setting='ssd'")
        return self._predict(X, views).depth

    def transform(self, X, views=None):
        """Common representation, ``N x k x H/4 x W/4``."""
        check_is_fitted(self, "model_")
        rgb, hha, _ = check_rgbd(X, views)
        cfg = self.model_.config
        with no_grad():
            xp, dp = features(self.model_, rgb, hha)
            return mv.encode(self.model_.params, xp, dp, cfg.hidden_act).value

    def score(self, X, y, views=None):
        """Mean IoU over the classes present in ``y`` or the prediction."""
        pred = self.predict(X, views)
        y = check_labels(y, pred.shape[0], self.n_classes, pred.shape[-2:])
        return iou(ConfusionMatrix.from_maps(pred, y, self.n_classes))[1]

    @classmethod
    def from_model(cls, model: Model) -> "CommonRepresentationNet":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        c = model.config
        est = cls(
            setting=c.setting,
            n_classes=c.n_classes,
            feature_channels=c.feature_channels,
            hidden_channels=c.hidden_channels,
            stage1_iters=c.stage1_iters,
            stage2_iters=c.stage2_iters,
            batch_size=c.batch_size,
            base_lr=c.base_lr,
            stage2_lr=c.stage2_lr,
            rec_weight=c.rec_weight,
            corr_weight=c.corr_weight,
            depth_loss=c.depth_loss,
            augment=c.augment,
            random_state=c.seed,
        )
        est.model_ = model
        return est
