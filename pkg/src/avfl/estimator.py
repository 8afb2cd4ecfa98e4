"""scikit-learn style front end for a simulated two-party AVLR run.

The estimator plays both parties in one process.  ``X`` holds the rows known
to both parties; columns ``[:split]`` belong to the weak (label-holding) party
and ``[split:]`` to the strong party.  ``X_strong_only`` optionally adds rows
only the strong party holds, which is what the obfuscated ID set hides the
true intersection among.
"""
from __future__ import annotations

import random

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .apsi import check_lambda
from .avlr import VerticalDataset
from .harness import PartyConfig, run_protocol
from .hom_crypto import DEFAULT_KEY_BITS
from .ph_cipher import DEFAULT_GROUP_BITS, generate_group


class AsymmetricVerticalLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression trained by APSI alignment followed by genuine-with-dummy AVLR.

    Parameters
    ----------
    split : int or None
        First column owned by the strong party; defaults to half the columns.
    lam : float
        Security number in [0, 1]; 0 reveals the exact intersection, 1 hides it
        among every strong-side row.
    eta : float
        Learning rate of the gradient ascent on the average log-likelihood.
    max_iter : int
        Number of full-batch iterations.
    group_bits, key_bits : int
        Sizes of the Pohlig-Hellman group and the Paillier modulus.
    random_state : int or None
        Seed for every protocol random choice.  ``None`` draws from the OS.
    """

    def __init__(self, split=None, lam=0.5, eta=0.15, max_iter=150,
                 group_bits=DEFAULT_GROUP_BITS, key_bits=DEFAULT_KEY_BITS, random_state=None):
        self.split = split
        self.lam = lam
        self.eta = eta
        self.max_iter = max_iter
        self.group_bits = group_bits
        self.key_bits = key_bits
        self.random_state = random_state

    def _split_index(self, n_features):
        split = n_features // 2 if self.split is None else int(self.split)
        if not 0 < split < n_features:
            raise ValueError(f"split must lie strictly between 0 and {n_features}, got {split}")
        return split

    def fit(self, X, y, X_strong_only=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError(f"binary targets required, got {len(self.classes_)} classes")
        check_lambda(self.lam)
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        self.n_features_in_ = X.shape[1]
        split = self._split_index(X.shape[1])

        shared_ids = tuple(f"r{i}" for i in range(X.shape[0]))
        strong_X = X[:, split:]
        strong_ids = shared_ids
        if X_strong_only is not None:
            extra = check_array(X_strong_only, dtype=np.float64)
            if extra.shape[1] == X.shape[1]:
                extra = extra[:, split:]
            elif extra.shape[1] != X.shape[1] - split:
                raise ValueError("X_strong_only must have either all columns or only the strong block")
            strong_X = np.vstack([strong_X, extra])
            strong_ids = shared_ids + tuple(f"s{i}" for i in range(extra.shape[0]))
        strong = VerticalDataset(strong_ids, strong_X)
        weak = VerticalDataset(shared_ids, X[:, :split], y_idx)

        seed = self.random_state
        rng = random.Random(f"{seed}/group") if seed is not None else None
        cfg = PartyConfig(lam=self.lam, eta=self.eta, iterations=self.max_iter, group_bits=self.group_bits,
                          key_bits=self.key_bits, seed=seed, group=generate_group(self.group_bits, rng))
        run = run_protocol(strong, weak, cfg)
        self.coef_ = np.concatenate([run.weak.model.weights, run.strong.model.weights])[np.newaxis, :]
        self.intercept_ = np.zeros(1)
        self.trace_ = run.trace
        self.n_iter_ = self.max_iter
        self.intersection_size_ = len(run.weak.intersection)
        self.obfuscated_size_ = len(run.strong.obfuscated)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_[0] + self.intercept_[0]

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        positive = self.decision_function(X) > 0
        return self.classes_[positive.astype(int)]
