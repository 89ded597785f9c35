"""scikit-learn style wrappers over the functional core.

``X`` is a sequence of :class:`~pcpomdp.model.Trajectory`; there is no ``y``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import model as _model
from .objective import ObjectiveConfig, policy_probs, train, two_stage_train
from .ope import KNNBehaviorPolicy, cwpdis_value
from .validation import check_compatible, check_dataset, check_positive_int

__all__ = ["GaussianIOHMM", "PredictionConstrainedPOMDP", "KNNBehaviorPolicy"]


class GaussianIOHMM(BaseEstimator):
    """Action-conditioned HMM with diagonal Gaussian emissions, fit by EM."""

    def __init__(self, n_states=2, n_actions=None, n_iter=200, tol=1e-7, restarts=1, gamma=0.9,
                 initial_action=0, random_state=0):
        self.n_states = n_states
        self.n_actions = n_actions
        self.n_iter = n_iter
        self.tol = tol
        self.restarts = restarts
        self.gamma = gamma
        self.initial_action = initial_action
        self.random_state = random_state

    def fit(self, X, y=None):
        data = check_dataset(X, n_actions=self.n_actions)
        check_positive_int(self.n_states, "n_states")
        cfg = ObjectiveConfig(mode="two_stage", n_states=self.n_states, em_iters=self.n_iter, tol=self.tol,
                              restarts=self.restarts, seed=self.random_state, gamma=self.gamma,
                              initial_action=self.initial_action)
        res = two_stage_train(data, cfg, self.n_actions, plan=False)
        self.params_ = res.params
        self.trace_ = res.trace
        return self

    def score(self, X, y=None):
        """Log marginal likelihood per observed scalar."""
        check_is_fitted(self, "params_")
        data = check_dataset(X)
        check_compatible(self.params_, data)
        return _model.log_marginal_likelihood(data, self.params_) / _model.n_observed(data)

    def transform(self, X):
        """Filtered beliefs, one ``(T_n, K)`` array per trajectory."""
        check_is_fitted(self, "params_")
        data = check_dataset(X)
        check_compatible(self.params_, data)
        return [_model.filter_beliefs(tr, self.params_) for tr in data]

    predict_proba = transform


class PredictionConstrainedPOMDP(BaseEstimator):
    """Jointly learned model and policy; ``mode`` selects the baselines."""

    def __init__(self, n_states=2, lam=1.0, lam_ess=0.0, delta=0.0, mode="popcorn", n_actions=None,
                 restarts=25, max_iters=2000, k_obs=100, temperature=0.01, gamma=0.9, initial_action=0,
                 random_state=0):
        self.n_states = n_states
        self.lam = lam
        self.lam_ess = lam_ess
        self.delta = delta
        self.mode = mode
        self.n_actions = n_actions
        self.restarts = restarts
        self.max_iters = max_iters
        self.k_obs = k_obs
        self.temperature = temperature
        self.gamma = gamma
        self.initial_action = initial_action
        self.random_state = random_state

    def _config(self) -> ObjectiveConfig:
        return ObjectiveConfig(lam=self.lam, lam_ess=self.lam_ess, delta=self.delta, mode=self.mode,
                               n_states=self.n_states, restarts=self.restarts, max_iters=self.max_iters,
                               k_obs=self.k_obs, temperature=self.temperature, seed=self.random_state,
                               gamma=self.gamma, initial_action=self.initial_action)

    def fit(self, X, y=None):
        data = check_dataset(X, n_actions=self.n_actions, require_behavior=self.mode != "two_stage")
        res = train(data, self._config(), self.n_actions)
        self.params_ = res.params
        self.value_function_ = res.value_function
        self.objective_ = res.objective
        self.trace_ = res.trace
        return self

    def predict_proba(self, X):
        """Per-step action distributions of the learned policy."""
        check_is_fitted(self, "params_")
        data = check_dataset(X)
        check_compatible(self.params_, data)
        return policy_probs(data, self.params_, self.value_function_, self.delta)

    def predict(self, X):
        return [np.argmax(p, axis=1) for p in self.predict_proba(X)]

    def evaluate(self, X):
        """Off-policy report of the learned policy on ``X``."""
        data = check_dataset(X, require_behavior=True)
        return cwpdis_value(data, self.predict_proba(data), self.gamma)

    def score(self, X, y=None):
        """Log marginal likelihood per observed scalar."""
        check_is_fitted(self, "params_")
        data = check_dataset(X)
        return _model.log_marginal_likelihood(data, self.params_) / _model.n_observed(data)
