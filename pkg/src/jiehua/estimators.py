"""scikit-learn style wrappers around the pipeline pieces.

These are conveniences for notebooks and pipelines; the CLI and the training
loops do not depend on them.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cyclegan import CycleGANState, cyclegan_train_step, translate
from .fid import EXTRACTOR_SEED, FEATURE_DIM, FeatureExtractor, extract_features, fid, fit_gaussian
from .tensor.rng import Rng
from .validation import check_images
from .vision.canny import canny


class CannyEdges(TransformerMixin, BaseEstimator):
    """Images -> binary edge maps. Stateless; ``fit`` only validates."""

    def __init__(self, low_threshold=0.1, high_threshold=0.2):
        self.low_threshold = low_threshold
        self.high_threshold = high_threshold

    def fit(self, X, y=None):
        check_images(X)
        if not 0.0 <= self.low_threshold <= self.high_threshold <= 1.0:
            raise ValueError("need 0 <= low_threshold <= high_threshold <= 1")
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        X = check_images(X)
        return np.stack([canny(img, self.low_threshold, self.high_threshold) for img in X])


class FIDFeatures(TransformerMixin, BaseEstimator):
    """Images -> fixed random-network features (never trained)."""

    def __init__(self, seed=EXTRACTOR_SEED, dim=FEATURE_DIM):
        self.seed = seed
        self.dim = dim

    def fit(self, X=None, y=None):
        self.extractor_ = FeatureExtractor(self.seed, self.dim)
        return self

    def transform(self, X):
        check_is_fitted(self, "extractor_")
        return extract_features(self.extractor_, check_images(X))


class FIDScorer(BaseEstimator):
    """Fit on reference images, then ``distance(X)`` is the FID of ``X`` to them.

    ``score`` returns the negated distance so that larger is better.
    """

    def __init__(self, seed=EXTRACTOR_SEED, dim=FEATURE_DIM):
        self.seed = seed
        self.dim = dim

    def fit(self, X, y=None):
        self.features_ = FIDFeatures(self.seed, self.dim).fit()
        self.reference_ = fit_gaussian(self.features_.transform(check_images(X, min_count=2)))
        return self

    def distance(self, X) -> float:
        check_is_fitted(self, "reference_")
        return fid(fit_gaussian(self.features_.transform(check_images(X, min_count=2))), self.reference_)

    def score(self, X, y=None) -> float:
        return -self.distance(X)


class CycleGANTranslator(TransformerMixin, BaseEstimator):
    """Unpaired translation. ``fit(X, Y)`` trains; ``transform`` maps X to Y-style
    and ``inverse_transform`` maps Y to X-style. Images are NHWC in [0, 1]."""

    def __init__(self, n_steps=1000, batch_size=1, channels=16, res_blocks=4, lambda_cycle=10.0,
                 learning_rate=2e-4, seed=0):
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.channels = channels
        self.res_blocks = res_blocks
        self.lambda_cycle = lambda_cycle
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, Y):
        X, Y = check_images(X, "X"), check_images(Y, "Y")
        if X.shape[1:] != Y.shape[1:]:
            raise ValueError(f"X and Y image shapes differ: {X.shape[1:]} vs {Y.shape[1:]}")
        rng = Rng(self.seed).child("cyclegan")
        self.state_ = CycleGANState.create(
            rng.child("nets"), self.channels, self.res_blocks, self.lambda_cycle, self.learning_rate
        )
        data = rng.child("data")
        self.history_ = []
        bs = self.batch_size
        for _ in range(self.n_steps):
            xb = X[data.choice(len(X), bs, replace=len(X) < bs)]
            yb = Y[data.choice(len(Y), bs, replace=len(Y) < bs)]
            self.history_.append(cyclegan_train_step(self.state_, xb * 2 - 1, yb * 2 - 1))
        self.n_features_in_ = X.shape[3]
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        return translate(self.state_, check_images(X), "X->Y")

    def inverse_transform(self, Y):
        check_is_fitted(self, "state_")
        return translate(self.state_, check_images(Y), "Y->X")
