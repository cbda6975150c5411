"""Scikit-learn compatible wrapper around the two-stream segmentation network.

Inputs are stacked frame/flow images: ``X`` has shape ``(n, H, W, 6)`` with
the RGB frame in channels ``0:3`` and the 3-channel flow image in ``3:6``.
Targets ``y`` are binary masks of shape ``(n, H, W)``.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DimensionError, NumericalError
from .metrics import region_similarity
from .modulation import CmtmConfig, Mode
from .optim import Adam
from .params import named_tensors
from .segnet import SegModel, SegNetConfig, model_forward, segmentation_loss
from .tensor import backward

logger = logging.getLogger(__name__)


def pack_inputs(frames, flows) -> np.ndarray:
    """Stack RGB frames and flow images into the ``(n, H, W, 6)`` layout."""
    frames, flows = np.asarray(frames, dtype=np.float32), np.asarray(flows, dtype=np.float32)
    if frames.shape != flows.shape:
        raise DimensionError(f"frames {frames.shape} and flows {flows.shape} differ")
    return np.concatenate([frames, flows], axis=-1)


def check_video_input(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_features=1)
    if X.ndim != 4 or X.shape[-1] != 6:
        raise DimensionError(f"expected inputs of shape (n, H, W, 6), got {X.shape}")
    return X


def check_video_target(X, y) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape[:3]:
        raise DimensionError(f"masks {y.shape} do not match inputs {X.shape[:3]}")
    return y.astype(bool)


class CMTMSegmenter(BaseEstimator):
    """Binary video-object segmenter with cross-modality token modulation.

    Each call to :meth:`fit` trains from a fresh initialisation with Adam;
    every step samples a batch and fresh token-mask plans from
    ``random_state``. Prediction always runs in eval mode (no masking).
    """

    def __init__(
        self,
        channels=64,
        blocks=2,
        heads=1,
        mask_ratio=0.4,
        apply_to_app=True,
        apply_to_mo=True,
        stage1=16,
        stage2=32,
        decoder_channels=16,
        learning_rate=1e-3,
        n_steps=500,
        batch_size=4,
        beta1=0.9,
        beta2=0.999,
        adam_eps=1e-8,
        random_state=0,
    ):
        self.channels = channels
        self.blocks = blocks
        self.heads = heads
        self.mask_ratio = mask_ratio
        self.apply_to_app = apply_to_app
        self.apply_to_mo = apply_to_mo
        self.stage1 = stage1
        self.stage2 = stage2
        self.decoder_channels = decoder_channels
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.random_state = random_state

    def _net_config(self) -> SegNetConfig:
        cmtm = CmtmConfig(
            channels=self.channels, blocks=self.blocks, heads=self.heads, mask_ratio=self.mask_ratio,
            apply_to_app=self.apply_to_app, apply_to_mo=self.apply_to_mo, seed=self.random_state,
        )
        return SegNetConfig(self.stage1, self.stage2, self.decoder_channels, cmtm)

    def fit(self, X, y, callback=None):
        """Train on ``(X, y)``; ``callback(step, loss)`` runs after every step."""
        X = check_video_input(X)
        y = check_video_target(X, y)
        self.config_ = self._net_config()
        self.model_ = SegModel.init(self.config_, seed=self.random_state)
        params = [t for _, t in named_tensors(self.model_)]
        opt = Adam(params, self.learning_rate, self.beta1, self.beta2, self.adam_eps)
        rng = np.random.default_rng([self.random_state, 1])
        n = X.shape[0]
        self.loss_curve_ = []
        for step in range(self.n_steps):
            idx = np.sort(rng.choice(n, size=self.batch_size, replace=n < self.batch_size))
            xb = X[idx]
            logits = model_forward(xb[..., :3], xb[..., 3:], self.model_, self.config_, Mode.TRAIN, rng)
            loss = segmentation_loss(logits, y[idx])
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at step {step}")
            backward(loss)
            opt.step()
            opt.zero_grad()
            self.loss_curve_.append(value)
            if callback is not None:
                callback(step, value)
            if step % 50 == 0:
                logger.debug("step %d loss %.5f", step, value)
        self.n_steps_ = self.n_steps
        return self

    @classmethod
    def from_model(cls, model: SegModel, config: SegNetConfig, **params):
        """A fitted estimator wrapping existing weights."""
        c = config.cmtm
        est = cls(
            channels=c.channels, blocks=c.blocks, heads=c.heads, mask_ratio=c.mask_ratio,
            apply_to_app=c.apply_to_app, apply_to_mo=c.apply_to_mo, stage1=config.stage1,
            stage2=config.stage2, decoder_channels=config.decoder_channels, random_state=c.seed, **params,
        )
        est.config_, est.model_, est.loss_curve_, est.n_steps_ = config, model, [], 0
        return est

    def decision_function(self, X, batch_size=16):
        """Per-pixel logits, shape ``(n, H, W)``."""
        check_is_fitted(self, "model_")
        X = check_video_input(X)
        out = []
        for start in range(0, X.shape[0], batch_size):
            xb = X[start:start + batch_size]
            logits = model_forward(xb[..., :3], xb[..., 3:], self.model_, self.config_, Mode.EVAL)
            out.append(logits.data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, X):
        return self.decision_function(X) > 0

    def score(self, X, y):
        """Mean region similarity (IoU) over frames."""
        X = check_video_input(X)
        y = check_video_target(X, y)
        pred = self.predict(X)
        return float(np.mean([region_similarity(p, g) for p, g in zip(pred, y)]))
