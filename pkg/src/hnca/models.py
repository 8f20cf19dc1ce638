"""Scikit-learn style wrappers around the training loops.

`BanditNetClassifier` treats the contextual-bandit experiment as an
ordinary classifier (fit on intensity images and labels, reward 1 iff the
sampled action matches), `BernoulliVae` exposes the discrete VAE as an
unsupervised estimator with transform and score_samples. Both follow the
BaseEstimator contract (constructor stores hyperparameters verbatim,
get_params/set_params work, fitted state carries a trailing underscore) so
they compose with pipelines and model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import batched
from .errors import ConfigError
from .harness import (
    BANDIT_ESTIMATORS,
    VAE_ESTIMATORS,
    bandit_train_arrays,
    multisample_bound,
    vae_train_arrays,
)
from .netcore import (
    STREAM_INIT,
    STREAM_TEST,
    Encoding,
    example_stream,
    init_net,
)
from .fhnca import init_vae


def _check_images(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=False, allow_nd=True)
    if X.ndim == 3:
        X = X.reshape(len(X), -1)
    if X.ndim != 2:
        raise ConfigError(f"expected image rows, got {X.ndim}-d input")
    if X.min() < 0 or X.max() > 255:
        raise ConfigError("pixel intensities must lie in [0, 255]")
    return X


class BanditNetClassifier(BaseEstimator, ClassifierMixin):
    """Stochastic Bernoulli network trained from bandit feedback.

    fit() runs the online loop: dynamically binarized pixels in, sampled
    action out, reward 1 iff the action equals the label, parameters updated
    by the chosen score-function estimator. `history_` holds the logged
    metric rows.
    """

    def __init__(
        self,
        depth: int = 1,
        hidden_width: int = 200,
        estimator: str = "hnca-b",
        learning_rate: float = 1e-4,
        batch_size: int = 50,
        epochs: int = 5,
        baseline_discount: float = 0.99,
        encoding: str = "plus_minus_one",
        test_samples: int = 1,
        log_every: int = 100,
        seed: int = 0,
    ):
        self.depth = depth
        self.hidden_width = hidden_width
        self.estimator = estimator
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.baseline_discount = baseline_discount
        self.encoding = encoding
        self.test_samples = test_samples
        self.log_every = log_every
        self.seed = seed

    def fit(self, X, y):
        if self.estimator not in BANDIT_ESTIMATORS:
            raise ConfigError(f"estimator '{self.estimator}' not in {BANDIT_ESTIMATORS}")
        X = _check_images(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        rng = example_stream(self.seed, 0, 0, STREAM_INIT)
        self.net_ = init_net(
            X.shape[1],
            [self.hidden_width] * self.depth,
            max(len(self.classes_), 2),
            Encoding(self.encoding),
            rng,
        )
        # the logged test column tracks the training data; held-out accuracy
        # comes from score()
        self.history_ = bandit_train_arrays(
            self.net_, X, y_idx.astype(np.uint8), X[: min(len(X), 2000)],
            y_idx[: min(len(X), 2000)].astype(np.uint8),
            estimator=self.estimator,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            baseline_discount=self.baseline_discount,
            test_samples=self.test_samples,
            log_every=self.log_every,
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = _check_images(X)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(f"{X.shape[1]} features, fitted on {self.n_features_in_}")
        nu = batched.uniforms_needed(self.net_)
        probs = np.zeros((len(X), self.net_.head.n_actions))
        flat = X / 255.0
        ctx = np.empty_like(flat)
        U = np.empty((len(X), nu))
        for p in range(self.test_samples):
            for i in range(len(X)):
                stream = example_stream(self.seed, 0, i, STREAM_TEST + p)
                ctx[i] = (stream.random(flat.shape[1]) < flat[i]).astype(np.float64)
                U[i] = stream.random(nu)
            bt = batched.forward_batch(self.net_, ctx, U)
            probs += bt.head_probs
        probs /= self.test_samples
        if probs.shape[1] != len(self.classes_):
            probs = probs[:, : len(self.classes_)]
            probs /= probs.sum(axis=1, keepdims=True)
        return probs

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class BernoulliVae(BaseEstimator, TransformerMixin):
    """Hierarchical Bernoulli VAE trained by a chosen ELBO gradient estimator.

    transform() returns the deepest layer's firing probabilities from one
    seeded encoding pass; score_samples() returns per-example importance-
    weighted likelihood bounds.
    """

    def __init__(
        self,
        depth: int = 1,
        hidden_width: int = 200,
        estimator: str = "fhnca",
        learning_rate: float = 1e-4,
        batch_size: int = 50,
        epochs: int = 3,
        baseline_discount: float = 0.99,
        eval_samples: int = 100,
        log_every: int = 100,
        seed: int = 0,
    ):
        self.depth = depth
        self.hidden_width = hidden_width
        self.estimator = estimator
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.baseline_discount = baseline_discount
        self.eval_samples = eval_samples
        self.log_every = log_every
        self.seed = seed

    def fit(self, X, y=None):
        if self.estimator not in VAE_ESTIMATORS:
            raise ConfigError(f"estimator '{self.estimator}' not in {VAE_ESTIMATORS}")
        X = _check_images(X)
        self.n_features_in_ = X.shape[1]
        rng = example_stream(self.seed, 0, 0, STREAM_INIT)
        self.model_ = init_vae(X.shape[1], [self.hidden_width] * self.depth, rng)
        self.history_ = vae_train_arrays(
            self.model_, X, X[: min(len(X), 2000)],
            estimator=self.estimator,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            baseline_discount=self.baseline_discount,
            log_every=self.log_every,
        )
        return self

    def _encode(self, X):
        nu = sum(self.model_.encoder.widths)
        flat = X / 255.0
        ctx = np.empty_like(flat)
        U = np.empty((len(X), nu))
        for i in range(len(X)):
            stream = example_stream(self.seed, 0, i, STREAM_TEST)
            ctx[i] = (stream.random(flat.shape[1]) < flat[i]).astype(np.float64)
            U[i] = stream.random(nu)
        return ctx, batched.forward_batch(self.model_.encoder, ctx, U)

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X)
        _, bt = self._encode(X)
        return bt.layers[-1].probs

    def score_samples(self, X, k: int | None = None):
        """Importance-weighted likelihood bound per example (k importance samples)."""
        check_is_fitted(self, "model_")
        X = _check_images(X)
        k = self.eval_samples if k is None else k
        bounds = np.empty(len(X))
        ctx, _ = self._encode(X)
        for i in range(len(X)):
            rng = example_stream(self.seed, 1, i, STREAM_TEST)
            bounds[i] = multisample_bound(self.model_, ctx[i], k, rng)
        return bounds

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())
