"""scikit-learn style wrappers around registration and segmentation."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .losses import BORDER_MARGIN
from .registration import register, registration_params

__all__ = ["Sim2Registration", "DefectSegmenter", "check_image", "check_image_stack", "check_pairs"]


def check_image(x, name="image"):
    """Validate one H x W (or H x W x C) image and return it as float64."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError(f"{name} must be 2-D or 3-D, got {a.ndim}-D")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_image_stack(x, name="X"):
    """Validate an (n, H, W) stack; a single H x W plane is promoted."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {a.shape}")
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_pairs(x):
    """Validate an (n, 2, H, W) array of (template, source) pairs."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 2:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 2:
        raise ValueError(f"expected (n, 2, H, W) template/source pairs, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("pairs contain non-finite values")
    return a


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class Sim2Registration(TransformerMixin, BaseEstimator):
    """Register sources against a fixed template.

    ``fit(template)`` stores the template; ``predict(sources)`` returns an
    (n, 4) array of ``theta_deg, scale, tx, ty`` and ``transform(sources)``
    the template aligned into each source frame.
    """

    def __init__(self, angular_bins=256, radial_bins=256, temperature=10.0):
        self.angular_bins = angular_bins
        self.radial_bins = radial_bins
        self.temperature = temperature

    def fit(self, X, y=None):
        self.template_ = check_image(X, "template")
        self.lp_ = registration_params(self.template_.shape[:2], self.angular_bins, self.radial_bins)
        return self

    def _results(self, X):
        _check_fitted(self, "template_")
        sources = check_image_stack(X, "sources")
        if sources.shape[1:] != self.template_.shape[:2]:
            raise ValueError(f"sources are {sources.shape[1:]}, template is {self.template_.shape[:2]}")
        return [register(self.template_, s, self.lp_, self.temperature) for s in sources]

    def predict(self, X):
        res = self._results(X)
        return np.array([[r.pose.theta_deg, r.pose.scale, r.pose.tx, r.pose.ty] for r in res])

    def transform(self, X):
        return np.stack([r.aligned_template for r in self._results(X)])


class DefectSegmenter(BaseEstimator):
    """Train and apply the two-stream segmentation network.

    ``X`` is an (n, 2, H, W) array of (template, source) pairs, ``y`` the
    (n, H, W) binary defect masks in the source frame.  Templates are
    registered onto their sources before the network sees them.
    """

    def __init__(self, epochs=20, batch_size=8, learning_rate=1e-3, irr_temperature=10.0,
                 sigma_bins=2.0, defect_pos_weight=50.0, base_width=16, depth=4, threshold=0.5, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.irr_temperature = irr_temperature
        self.sigma_bins = sigma_bins
        self.defect_pos_weight = defect_pos_weight
        self.base_width = base_width
        self.depth = depth
        self.threshold = threshold
        self.seed = seed

    def _config(self, n, size):
        from .training import TrainConfig

        return TrainConfig(
            train_size=n, image_size=size, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, irr_temperature=self.irr_temperature,
            sigma_bins=self.sigma_bins, defect_pos_weight=self.defect_pos_weight,
            base_width=self.base_width, depth=self.depth, seed=self.seed,
        )

    @staticmethod
    def _aligned(pairs):
        return np.stack([register(t, s).aligned_template for t, s in pairs])

    def fit(self, X, y):
        from .training import Trainer, TrainingSet

        pairs = check_pairs(X)
        masks = check_image_stack(y, "y")
        if masks.shape != (pairs.shape[0],) + pairs.shape[2:]:
            raise ValueError(f"y has shape {masks.shape}, expected {(pairs.shape[0],) + pairs.shape[2:]}")
        data = TrainingSet(self._aligned(pairs), pairs[:, 1], (masks >= 0.5).astype(np.float64))
        trainer = Trainer(self._config(len(pairs), pairs.shape[-1]), data=data).run()
        self.net_ = trainer.net
        self.history_ = trainer.history
        self.n_features_in_ = int(np.prod(pairs.shape[1:]))
        return self

    def predict_proba(self, X):
        from .diffnet import difference_forward, mask_forward

        _check_fitted(self, "net_")
        pairs = check_pairs(X)
        aligned = self._aligned(pairs)
        with torch.no_grad():
            template_only, source_only = difference_forward(self.net_, aligned, pairs[:, 1])
            return mask_forward(self.net_, template_only, source_only).numpy().astype(np.float64)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean pixel average precision over pairs."""
        from .evalkit import average_precision, pr_curve

        proba = self.predict_proba(X)
        masks = check_image_stack(y, "y")
        return float(np.mean([average_precision(pr_curve(p, g, margin=BORDER_MARGIN)) for p, g in zip(proba, masks)]))
