"""Off-policy evaluation: weighted per-decision importance sampling, effective
sample sizes, support restriction, and a nearest-neighbour behavior model."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.validation import check_array, check_is_fitted

from ._jax import jnp
from .model import Trajectory


TINY_PROB = 1e-250


@dataclass
class OpeReport:
    value: float
    ess_per_step: np.ndarray
    ess_total: float
    weights: np.ndarray                 # (N, T) cumulative ratios, frozen after each trajectory ends
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "ess_per_step": [float(x) for x in self.ess_per_step],
            "ess_total": float(self.ess_total),
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _cwpdis(pi_taken, beh_taken, rewards, step_mask, gamma, clip=None):
    """Traceable core.  All inputs are (N, T); pads carry ``step_mask=False``.

    Weights are accumulated in log space and rescaled by their per-step
    maximum, which leaves every ratio unchanged but keeps tiny products from
    underflowing (and their gradients finite).  Returns
    ``(value, ess_per_step, rho, denom)`` where ``denom`` is zero exactly
    at steps where every weight is zero.
    """
    # below TINY_PROB a ratio is treated as an exact zero, which also stops
    # 1/pi from overflowing in the gradient
    live_pi = step_mask & (pi_taken > TINY_PROB)
    log_ratio = jnp.log(jnp.where(live_pi, pi_taken, 1.0)) - jnp.log(jnp.where(step_mask, beh_taken, 1.0))
    if clip is not None:
        log_ratio = jnp.minimum(log_ratio, jnp.log(clip))
    log_ratio = jnp.where(step_mask & ~live_pi, -jnp.inf, log_ratio)
    log_rho = jnp.cumsum(log_ratio, axis=1)
    top = jnp.max(log_rho, axis=0)
    w = jnp.exp(log_rho - jnp.where(jnp.isfinite(top), top, 0.0))
    denom = jnp.sum(w, axis=0)
    num = jnp.sum(jnp.where(step_mask, rewards, 0.0) * w, axis=0)
    ok = denom > 0
    per_step = jnp.where(ok, num / jnp.where(ok, denom, 1.0), 0.0)
    disc = gamma ** jnp.arange(w.shape[1])
    value = jnp.sum(disc * per_step)
    # ESS uses live trajectories only, rescaled by their own maximum
    log_live = jnp.where(step_mask, log_rho, -jnp.inf)
    top_live = jnp.max(log_live, axis=0)
    live = jnp.exp(log_live - jnp.where(jnp.isfinite(top_live), top_live, 0.0))
    s1 = jnp.sum(live, axis=0)
    s2 = jnp.sum(live * live, axis=0)
    ess = jnp.where(s2 > 0, s1 * s1 / jnp.where(s2 > 0, s2, 1.0), 0.0)
    return value, ess, jnp.exp(log_rho), denom


def _taken(probs, actions):
    return np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0]


def _stack_ragged(rows, N, T, fill):
    out = np.full((N, T), fill, dtype=float)
    for n, r in enumerate(rows):
        r = np.asarray(r, dtype=float).reshape(-1)
        out[n, :len(r)] = r
    return out


def cwpdis_value(dataset: Sequence[Trajectory], policy_probs, gamma=0.9, clip=None) -> OpeReport:
    """Weighted per-decision importance sampling estimate of the policy value.

    ``policy_probs`` holds, per trajectory, either the evaluation policy's
    probability of each taken action (shape ``(T_n,)``) or its full action
    distribution at each step (shape ``(T_n, A)``).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if len(policy_probs) != len(dataset):
        raise ValueError("policy_probs must align with the dataset")
    N = len(dataset)
    T = max(tr.n_steps for tr in dataset)
    pi_rows, beh_rows = [], []
    for tr, p in zip(dataset, policy_probs):
        if tr.behavior_probs is None:
            raise ValueError(f"trajectory {tr.id!r} has no behavior_probs")
        p = np.asarray(p, dtype=float)
        if p.ndim == 2:
            p = _taken(p, tr.actions)
        if p.shape != (tr.n_steps,):
            raise ValueError(f"policy_probs for trajectory {tr.id!r} has shape {p.shape}")
        b = _taken(tr.behavior_probs, tr.actions)
        if np.any(b <= 0):
            raise ValueError(f"trajectory {tr.id!r} takes an action with zero behavior probability")
        pi_rows.append(p), beh_rows.append(b)
    mask = _stack_ragged([np.ones(tr.n_steps) for tr in dataset], N, T, 0.0) > 0
    pi = _stack_ragged(pi_rows, N, T, 1.0)
    beh = _stack_ragged(beh_rows, N, T, 1.0)
    r = _stack_ragged([tr.rewards for tr in dataset], N, T, 0.0)
    value, ess, rho, denom = (np.asarray(x) for x in _cwpdis(pi, beh, r, mask, gamma, clip))
    flags = []
    dead = np.flatnonzero(denom <= 0)
    if len(dead):
        flags.append(f"zero_weight_steps:{','.join(map(str, dead))}")
    return OpeReport(float(value), ess, float(ess.sum()), rho, flags)


def restrict_policy_support(policy_dist, behavior_dist, delta, return_flag=False, xp=np):
    """Zero out actions with behavior probability below ``delta`` and renormalize.

    If nothing survives, the behavior distribution itself is returned.
    ``delta <= 0`` is the identity.
    """
    if delta <= 0:
        out = policy_dist
        return (out, xp.zeros(xp.shape(out)[:-1], dtype=bool)) if return_flag else out
    keep = behavior_dist >= delta
    masked = xp.where(keep, policy_dist, 0.0)
    total = xp.sum(masked, axis=-1, keepdims=True)
    empty = total <= 0
    out = xp.where(empty, behavior_dist, masked / xp.where(empty, 1.0, total))
    return (out, empty[..., 0]) if return_flag else out


def ess_penalty(report_or_ess, lambda_ess) -> float:
    """``lambda_ess / sqrt(ess_total)``; infinite (with a warning) at zero ESS."""
    ess = report_or_ess.ess_total if isinstance(report_or_ess, OpeReport) else float(report_or_ess)
    if lambda_ess == 0:
        return 0.0
    if ess <= 0:
        warnings.warn("effective sample size is zero; ESS penalty is infinite", RuntimeWarning, stacklevel=2)
        return float("inf")
    return float(lambda_ess / np.sqrt(ess))


# ------------------------------------------------------- behavior estimate


class KNNBehaviorPolicy(ClassifierMixin, BaseEstimator):
    """Behavior policy estimated from action counts among nearest neighbours.

    Distances are ``sum_i w_i (x_i - x'_i)^2``.  At points whose realized
    action is known, the realized action is given at least ``p_floor``.
    """

    def __init__(self, n_neighbors=5, feature_weights=None, p_floor=0.03, n_actions=None):
        self.n_neighbors = n_neighbors
        self.feature_weights = feature_weights
        self.p_floor = p_floor
        self.n_actions = n_actions

    def _scale(self, X):
        return X * self.scale_

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=int).reshape(-1)
        if len(X) == 0:
            raise ValueError("empty reference set")
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        if not 1 <= self.n_neighbors <= len(X):
            raise ValueError("n_neighbors must lie in [1, n_samples]")
        if not 0 < self.p_floor < 1:
            raise ValueError("p_floor must lie in (0, 1)")
        w = np.ones(X.shape[1]) if self.feature_weights is None else np.asarray(self.feature_weights, float)
        if w.shape != (X.shape[1],) or np.any(w < 0):
            raise ValueError("feature_weights must be non-negative, one per feature")
        self.n_actions_ = int(self.n_actions or y.max() + 1)
        self.classes_ = np.arange(self.n_actions_)
        self.scale_ = np.sqrt(w)
        self.actions_ = y
        self.n_features_in_ = X.shape[1]
        self.nn_ = NearestNeighbors(n_neighbors=self.n_neighbors).fit(self._scale(X))
        return self

    def predict_proba(self, X, realized=None):
        check_is_fitted(self, "nn_")
        X = check_array(X, dtype=float)
        dist, idx = self.nn_.kneighbors(self._scale(X))
        counts = np.zeros((len(X), self.n_actions_))
        np.add.at(counts, (np.repeat(np.arange(len(X)), idx.shape[1]), self.actions_[idx].ravel()), 1.0)
        probs = counts / counts.sum(axis=1, keepdims=True)
        if realized is not None:
            probs = floor_realized(probs, realized, self.p_floor)
        return probs

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


def floor_realized(probs, realized, p_floor):
    """Raise the realized action's probability to ``p_floor`` where it is lower,
    rescaling the other entries to keep the row on the simplex."""
    probs = np.array(probs, dtype=float)
    realized = np.asarray(realized, dtype=int)
    rows = np.arange(len(probs))
    low = probs[rows, realized] < p_floor
    if np.any(low):
        sub = probs[low]
        cur = sub[np.arange(len(sub)), realized[low]]
        rest = 1.0 - cur
        scale = np.where(rest > 0, (1.0 - p_floor) / np.where(rest > 0, rest, 1.0), 0.0)
        sub = sub * scale[:, None]
        sub[np.arange(len(sub)), realized[low]] = p_floor
        probs[low] = sub
    return probs


def fit_knn_behavior(features, actions, weights=None, k_nn=5, p_floor=0.03, n_actions=None) -> KNNBehaviorPolicy:
    return KNNBehaviorPolicy(k_nn, weights, p_floor, n_actions).fit(features, actions)


def query(model: KNNBehaviorPolicy, features, realized=None) -> np.ndarray:
    return model.predict_proba(np.atleast_2d(features), realized=realized)


def attach_behavior_probs(dataset: Sequence[Trajectory], features: Sequence[np.ndarray],
                          model: KNNBehaviorPolicy) -> List[Trajectory]:
    """Copy of ``dataset`` with behavior_probs estimated from per-step features."""
    from dataclasses import replace
    out = []
    for tr, f in zip(dataset, features):
        p = query(model, f, realized=tr.actions)
        out.append(replace(tr, behavior_probs=p))
    return out
