"""Scikit-learn style estimators wrapping the feedback segmentation model.

Both estimators consume image stacks shaped (n_samples, height, width) with
integer masks of the same shape, and follow the usual conventions: all
constructor arguments are stored verbatim, fitted state lives in trailing-
underscore attributes, and ``get_params``/``set_params``/``clone`` work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from fbseg.analysis import evaluate_model
from fbseg.network import ArchConfig, ModelParams, predict_mask, run_trajectory
from fbseg.autodiff import Tensor
from fbseg.network import feedforward_predict
from fbseg.training import TrainConfig, train
from fbseg.validation import check_image_batch, check_mask_batch


class _SegmenterBase(BaseEstimator):
    _feedback = True

    def _arch(self) -> ArchConfig:
        return ArchConfig(
            seg_channels=self.seg_channels,
            n_classes=self.n_classes,
            enc_channels=tuple(self.enc_channels),
            bottleneck_channels=self.bottleneck_channels,
            timesteps=self.timesteps,
            tau=self.tau,
            feedback=self._feedback,
            use_decay=self.use_decay,
            use_softmax=getattr(self, "use_softmax", True),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            timesteps=self.timesteps,
            tau=self.tau,
            use_decay=self.use_decay,
            use_softmax_projection=getattr(self, "use_softmax", True),
            feedback_enabled=self._feedback,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_mask_batch(y, X, self.n_classes)
        params = ModelParams.initialize(self._arch(), seed=self.random_state)
        samples = list(zip(X, y))
        self.loss_curve_ = train(params, samples, self._train_config())
        self.model_ = params
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X)
        return np.stack([predict_mask(self.model_, image) for image in X])

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X)
        probs = []
        for image in X:
            xt = Tensor(image[None, None])
            if self._feedback:
                record = run_trajectory(xt, self.model_, self.timesteps)
                probs.append(record.predictions[-1].values[0])
            else:
                _, pred = feedforward_predict(xt, self.model_)
                probs.append(pred.values[0])
        return np.stack(probs)

    def score(self, X, y) -> float:
        """Mean polygon-class f1 over the batch."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X, self.n_classes)
        self._check_fitted()
        return evaluate_model(self.model_, list(zip(X, y))).mean_f1


class FeedbackSegmenter(_SegmenterBase):
    """Recurrent error-correcting U-Net segmenter.

    Parameters
    ----------
    seg_channels : state channels feeding the segmentation head.
    n_classes : semantic classes; also the number of feedback channels.
    timesteps : refinement iterations per prediction.
    tau : time constant of the exponential update decay.
    use_decay, use_softmax : stability mechanisms (ablation switches).
    enc_channels, bottleneck_channels : U-Net widths.
    epochs, learning_rate, random_state : training setup.
    """

    _feedback = True

    def __init__(self, seg_channels=4, n_classes=2, timesteps=5, tau=1.0,
                 use_decay=True, use_softmax=True, enc_channels=(8, 16),
                 bottleneck_channels=32, epochs=10, learning_rate=0.01,
                 random_state=0):
        self.seg_channels = seg_channels
        self.n_classes = n_classes
        self.timesteps = timesteps
        self.tau = tau
        self.use_decay = use_decay
        self.use_softmax = use_softmax
        self.enc_channels = enc_channels
        self.bottleneck_channels = bottleneck_channels
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state


class FeedforwardSegmenter(_SegmenterBase):
    """Single-pass U-Net baseline with the same capacity and head.

    ``use_decay`` applies the static attenuation factor exp(-5/tau) times
    the learned basis product to the network output before the head.
    """

    _feedback = False

    def __init__(self, seg_channels=4, n_classes=2, timesteps=5, tau=1.0,
                 use_decay=False, enc_channels=(8, 16),
                 bottleneck_channels=32, epochs=10, learning_rate=0.01,
                 random_state=0):
        self.seg_channels = seg_channels
        self.n_classes = n_classes
        self.timesteps = timesteps
        self.tau = tau
        self.use_decay = use_decay
        self.enc_channels = enc_channels
        self.bottleneck_channels = bottleneck_channels
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state
