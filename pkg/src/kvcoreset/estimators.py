"""Scikit-learn style wrappers so the selectors compose with pipelines.

The feature matrix X holds one token per row as the concatenation
[key; value]; `d_k` tells the estimator where to split.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import baselines
from .errors import ConfigurationError
from .kvcore import OrthMode, SelectorConfig
from .selector import CandidatePool, cords_select, d2_select

_SELECTORS = ("cords", "d2", "uniform", "random", "vnorm", "kmeans", "shortlist")


class KVCoresetSelector(TransformerMixin, BaseEstimator):
    """Budget-bounded representative row selection.

    Parameters mirror the selection rule: `alpha` weights key vs. value
    distance, `lam` weights the orthogonal novelty bonus, `eta` weights
    key vs. value residuals inside that bonus.
    """

    def __init__(
        self,
        budget=8,
        d_k=None,
        selector="cords",
        alpha=0.25,
        eta=0.25,
        lam=0.25,
        eps0=1e-6,
        eps_logdet=1e-6,
        orth_mode="maxcos",
        shortlist_multiplier=4,
        random_state=0,
    ):
        self.budget = budget
        self.d_k = d_k
        self.selector = selector
        self.alpha = alpha
        self.eta = eta
        self.lam = lam
        self.eps0 = eps0
        self.eps_logdet = eps_logdet
        self.orth_mode = orth_mode
        self.shortlist_multiplier = shortlist_multiplier
        self.random_state = random_state

    def _pool(self, X) -> CandidatePool:
        X = check_array(X, dtype=np.float64)
        d_k = self.d_k if self.d_k is not None else X.shape[1] // 2
        if not 0 < d_k < X.shape[1]:
            raise ConfigurationError(f"d_k={d_k} must split the {X.shape[1]} columns")
        return CandidatePool(X[:, :d_k], X[:, d_k:])

    def _config(self) -> SelectorConfig:
        return SelectorConfig(
            alpha=self.alpha,
            eta=self.eta,
            lam=self.lam,
            eps0=self.eps0,
            eps_logdet=self.eps_logdet,
            orth_mode=OrthMode(self.orth_mode),
            rng_seed=self.random_state,
        )

    def fit(self, X, y=None):
        pool = self._pool(X)
        b = int(self.budget)
        if self.selector == "cords":
            result = cords_select(pool, b, self._config())
            self.selection_result_ = result
            indices = result.sorted_indices
        elif self.selector == "d2":
            result = d2_select(pool, b, self.alpha)
            self.selection_result_ = result
            indices = result.sorted_indices
        elif self.selector == "uniform":
            indices = baselines.uniform_select(pool.size, b)
        elif self.selector == "random":
            indices = baselines.random_select(pool.size, b, self.random_state)
        elif self.selector == "vnorm":
            indices = baselines.value_norm_topk(pool, b)
        elif self.selector == "kmeans":
            indices = baselines.kmeans_representative(pool, b, self._config())
        elif self.selector == "shortlist":
            indices = np.sort(
                baselines.greedy_shortlist(
                    pool, b, self.shortlist_multiplier, self.alpha
                )
            )
        else:
            raise ConfigurationError(
                f"selector must be one of {_SELECTORS}, got {self.selector!r}"
            )
        self.selected_indices_ = np.asarray(indices, dtype=np.int64)
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else len(X[0])
        return self

    def transform(self, X):
        check_is_fitted(self, "selected_indices_")
        X = check_array(X, dtype=np.float64)
        return X[self.selected_indices_]

    def get_support(self, X_len=None):
        check_is_fitted(self, "selected_indices_")
        return self.selected_indices_.copy()
