"""Prediction-constrained training objective, its gradient, and optimizers.

The objective trades the generative log-likelihood (scaled per observed
scalar) against the off-policy value of the policy that the soft point-based
solver derives from the same parameters::

    total = loglik / n_scalars + lam * (value - lam_ess / sqrt(ess))

``mode="two_stage"`` keeps only the likelihood and ``mode="value_only"``
keeps only the value part.  Rewards are learned separately by a posterior
M-step and never receive gradient.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache, partial
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from ._jax import jax, jnp
from .exceptions import NumericalError
from .model import (PomdpParams, Trajectory, UnconstrainedParams, _arrays, _constrain, _filter_batch,
                    _posterior_kernel, _reward_mstep, batch_dataset, constrain, em_step,
                    filter_beliefs, log_marginal_likelihood, n_observed, unconstrain)
from .ope import _cwpdis, cwpdis_value, restrict_policy_support
from .solver import (ValueFunction, _backup, _policy, capacity, dedupe, expand_belief_set,
                     policy_action_dist, reset_value_function, sample_noise, solve_hard)

MODES = ("popcorn", "two_stage", "value_only")


@dataclass
class ObjectiveConfig:
    lam: float = 1.0
    lam_ess: float = 0.0
    delta: float = 0.0
    mode: str = "popcorn"
    n_states: int = 2
    backups_per_step: int = 3
    init_backups: int = 30
    reset_period: int = 500
    expand_period: int = 25
    expand_epsilon: float = 0.1
    max_beliefs: int = 16
    k_obs: int = 100
    temperature: float = 0.01
    restarts: int = 25
    max_iters: int = 2000
    tol: float = 1e-7
    patience: int = 50
    em_iters: int = 200
    warm_start_em: int = 0
    seed: int = 0
    gamma: float = 0.9
    initial_action: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lam < 0 or self.lam_ess < 0:
            raise ValueError("lam and lam_ess must be non-negative")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must lie in [0, 1)")
        if self.n_states < 1 or self.restarts < 1 or self.backups_per_step < 0:
            raise ValueError("n_states and restarts must be >= 1, backups_per_step >= 0")
        if self.temperature <= 0 or self.k_obs < 1:
            raise ValueError("temperature must be positive and k_obs >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ObjectiveValue(NamedTuple):
    total: float
    loglik_rescaled: float
    policy_value: float
    ess_total: float


class SolverState(NamedTuple):
    """Padded value-function state carried between objective evaluations."""

    alphas: np.ndarray
    amask: np.ndarray
    adist: np.ndarray
    beliefs: np.ndarray
    bmask: np.ndarray
    noise: np.ndarray      # (A, K, k_obs, D) fixed reparameterization noise

    @property
    def n_beliefs(self) -> int:
        return int(np.sum(self.bmask))

    def value_function(self, temperature=0.01, soft=True) -> ValueFunction:
        alphas, dists = dedupe(np.asarray(self.alphas)[np.asarray(self.amask)],
                               np.asarray(self.adist)[np.asarray(self.amask)])
        return ValueFunction(alphas, dists, np.asarray(self.beliefs)[np.asarray(self.bmask)],
                             temperature=temperature, soft=soft)


def solver_state(vf: ValueFunction, noise, cap=None) -> SolverState:
    M, B = len(vf.alphas), len(vf.beliefs)
    cap = cap or capacity(max(M, B))
    K, A = vf.n_states, vf.n_actions
    alphas = np.zeros((cap, K))
    alphas[:M] = vf.alphas
    adist = np.full((cap, A), 1.0 / A)
    adist[:M] = vf.action_dists
    beliefs = np.full((cap, K), 1.0 / K)
    beliefs[:B] = vf.beliefs
    return SolverState(alphas, np.arange(cap) < M, adist, beliefs, np.arange(cap) < B, np.asarray(noise))


# ------------------------------------------------------------------ kernel


def _terms(u, batch, n_scalars, state, lam, lam_ess, gamma, temperature, *, mode, n_backups, delta):
    tau0, tau, mu, sigma = _constrain(u)
    reward = jax.lax.stop_gradient(u.reward)
    beliefs, log_c, bad, _, _ = _filter_batch(tau0, tau, mu, sigma, batch)
    loglik = jnp.sum(log_c) / n_scalars

    def body(_, carry):
        al, am, ad = carry
        al, ad = _backup(al, am, ad, state.beliefs, state.bmask, tau, mu, sigma,
                         reward, gamma, state.noise, temperature, hard=False)
        return al, state.bmask, ad

    alphas, amask, adist = state.alphas, state.amask, state.adist
    if n_backups > 0:
        alphas, amask, adist = jax.lax.fori_loop(0, n_backups, body, (alphas, amask, adist))
    N, T, K = beliefs.shape
    pi = _policy(beliefs.reshape(N * T, K), alphas, amask, adist, temperature, hard=False)
    pi = restrict_policy_support(pi.reshape(N, T, -1), batch.behavior, delta, xp=jnp)
    pi_taken = jnp.take_along_axis(pi, batch.actions[..., None], axis=-1)[..., 0]
    beh_taken = jnp.take_along_axis(batch.behavior, batch.actions[..., None], axis=-1)[..., 0]
    value, ess, _, _ = _cwpdis(pi_taken, beh_taken, batch.rewards, batch.step_mask, gamma)
    ess_total = jnp.sum(ess)

    value_term = value - lam_ess / jnp.sqrt(ess_total)
    if mode == "two_stage":
        total = loglik
    elif mode == "value_only":
        total = value_term
    else:
        total = loglik + lam * value_term
    aux = (loglik, value, ess_total, jnp.any(bad), alphas, amask, adist)
    return total, aux


@lru_cache(maxsize=None)
def _compiled(mode, n_backups, delta):
    f = partial(_terms, mode=mode, n_backups=n_backups, delta=delta)
    return jax.jit(f), jax.jit(jax.value_and_grad(f, has_aux=True))


class Problem(NamedTuple):
    """Dataset arrays in the form the kernels consume."""

    batch: object
    n_scalars: float
    dataset: Sequence[Trajectory]


def prepare(dataset: Sequence[Trajectory], n_actions: int, initial_action: int = 0) -> Problem:
    n = n_observed(dataset)
    if n == 0:
        raise ValueError("dataset has no observed scalars")
    return Problem(batch_dataset(dataset, n_actions, initial_action), float(n), dataset)


def _problem(data, params_or_u, cfg):
    if isinstance(data, Problem):
        return data
    A = params_or_u.reward.shape[1]
    return prepare(data, A, cfg.initial_action)


def _as_unconstrained(params):
    if isinstance(params, PomdpParams):
        return UnconstrainedParams(*(jnp.asarray(x) for x in unconstrain(params)))
    return UnconstrainedParams(*(jnp.asarray(x) for x in params))


def _args(u, prob, state, cfg):
    st = SolverState(*(jnp.asarray(x) for x in state))
    return (u, prob.batch, prob.n_scalars, st, cfg.lam, cfg.lam_ess, cfg.gamma, cfg.temperature)


def _check_total(total, loglik, value, ess, bad):
    if bool(bad) or not np.isfinite(loglik):
        raise NumericalError("log-likelihood is not finite", parameter="loglik")
    if not np.isfinite(value):
        raise NumericalError("policy value is not finite", parameter="policy_value")
    if not np.isfinite(total):
        raise NumericalError("objective total is not finite", parameter="ess_total" if ess <= 0 else "total")


def evaluate_objective(params, data, cfg: ObjectiveConfig, state: SolverState, return_state=False):
    """Objective at ``params`` (constrained or unconstrained) for a fixed
    solver state.  With ``return_state`` the backed-up state is returned too."""
    u = _as_unconstrained(params)
    prob = _problem(data, u, cfg)
    f, _ = _compiled(cfg.mode, cfg.backups_per_step, float(cfg.delta))
    total, (ll, v, ess, bad, alphas, amask, adist) = f(*_args(u, prob, state, cfg))
    total, ll, v, ess = float(total), float(ll), float(v), float(ess)
    _check_total(total, ll, v, ess, bad)
    out = ObjectiveValue(total, ll, v, ess)
    if return_state:
        return out, state._replace(alphas=np.asarray(alphas), amask=np.asarray(amask), adist=np.asarray(adist))
    return out


def gradient(params, data, cfg: ObjectiveConfig, state: SolverState, return_value=False):
    """Exact gradient of :func:`evaluate_objective` (reward entries are zero)."""
    u = _as_unconstrained(params)
    prob = _problem(data, u, cfg)
    _, vg = _compiled(cfg.mode, cfg.backups_per_step, float(cfg.delta))
    (total, aux), g = vg(*_args(u, prob, state, cfg))
    g = UnconstrainedParams(*(np.asarray(x) for x in g))
    g = g._replace(reward=np.zeros_like(g.reward))
    for name, arr in zip(g._fields, g):
        bad = np.argwhere(~np.isfinite(arr))
        if len(bad):
            raise NumericalError(f"non-finite gradient in {name} at {tuple(bad[0])}", parameter=name)
    if not return_value:
        return g
    ll, v, ess, badflag, alphas, amask, adist = aux
    val = ObjectiveValue(float(total), float(ll), float(v), float(ess))
    _check_total(val.total, val.loglik_rescaled, val.policy_value, val.ess_total, badflag)
    new_state = state._replace(alphas=np.asarray(alphas), amask=np.asarray(amask), adist=np.asarray(adist))
    return g, val, new_state


# ------------------------------------------------------------------- Rprop


class RpropState(NamedTuple):
    steps: tuple
    prev_grad: tuple


def rprop_init(params, step0=0.01) -> RpropState:
    return RpropState(tuple(np.full(np.shape(p), step0) for p in params),
                      tuple(np.zeros(np.shape(p)) for p in params))


def rprop_step(params, grad, state: Optional[RpropState] = None, eta_plus=1.2, eta_minus=0.5,
               step_min=1e-6, step_max=1.0):
    """Sign-based ascent step.  Returns ``(new_params, new_state)``."""
    if state is None:
        state = rprop_init(params)
    new_p, new_s, new_g = [], [], []
    for p, g, s, gp in zip(params, grad, state.steps, state.prev_grad):
        p, g = np.asarray(p, dtype=float), np.asarray(g, dtype=float)
        sign = np.sign(g * gp)
        s = np.where(sign > 0, np.minimum(s * eta_plus, step_max),
                     np.where(sign < 0, np.maximum(s * eta_minus, step_min), s))
        g = np.where(sign < 0, 0.0, g)
        new_p.append(p + np.sign(g) * s)
        new_s.append(s)
        new_g.append(g)
    cls = type(params)
    out = cls(*new_p) if hasattr(cls, "_fields") else cls(new_p)
    return out, RpropState(tuple(new_s), tuple(new_g))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: PomdpParams
    value_function: Optional[ValueFunction]
    objective: ObjectiveValue
    trace: List[dict] = field(default_factory=list)
    restart_totals: List[float] = field(default_factory=list)
    best_restart: int = 0


def _observed_matrix(dataset):
    X = np.concatenate([tr.observations for tr in dataset], axis=0)
    col_mean = np.nanmean(X, axis=0)
    col_mean = np.where(np.isfinite(col_mean), col_mean, 0.0)
    filled = np.where(np.isnan(X), col_mean, X)
    std = np.nanstd(X, axis=0)
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    return filled, std


def initial_params(dataset, n_states, n_actions, rng, gamma=0.9, initial_action=0, noise_scale=0.1) -> PomdpParams:
    """k-means++ emission means, empirical spreads, near-uniform transitions, zero rewards."""
    X, std = _observed_matrix(dataset)
    K, A, D = n_states, n_actions, X.shape[1]
    if K == 1:
        centers = X.mean(axis=0, keepdims=True)
    else:
        seed = int(rng.integers(2 ** 31 - 1))
        centers = KMeans(K, init="k-means++", n_init=1, random_state=seed).fit(X).cluster_centers_
    tau = jax.nn.softmax(rng.normal(0, noise_scale, (A, K, K)), axis=-1)
    tau0 = jax.nn.softmax(rng.normal(0, noise_scale, K))
    tau, tau0 = np.asarray(tau), np.asarray(tau0)
    return PomdpParams(tau0 / tau0.sum(), tau / tau.sum(-1, keepdims=True),
                       np.broadcast_to(centers, (A, K, D)).copy(), np.broadcast_to(std, (A, K, D)).copy(),
                       np.zeros((K, A)), gamma=gamma, initial_action=initial_action)


def _refresh_rewards(prob, params):
    """Reward M-step on the prepared batch; unvisited pairs keep their value."""
    post, _, _, bad = _posterior_kernel(*_arrays(params), prob.batch)
    if np.any(np.asarray(bad)):
        raise NumericalError("dataset has zero probability under the model", parameter="sigma")
    R, mass = _reward_mstep(prob.batch, np.asarray(post), params.n_actions)
    return np.where(mass > 0, R, params.reward)


def _fresh_state(params, cfg, rng):
    vf = reset_value_function(params, temperature=cfg.temperature, soft=True)
    noise = sample_noise(params, cfg.k_obs, rng)
    return solver_state(vf, noise, _train_capacity(cfg, len(vf.beliefs)))


def _train_capacity(cfg, n_beliefs):
    # sized once for the largest belief set so expansions never recompile
    return capacity(max(n_beliefs, cfg.max_beliefs))


def _settle(u, prob, cfg, state, n):
    """Soft backups with the parameters held fixed."""
    if n <= 0:
        return state
    f, _ = _compiled("value_only", n, float(cfg.delta))
    _, aux = f(*_args(u, prob, state, cfg))
    return state._replace(alphas=np.asarray(aux[4]), amask=np.asarray(aux[5]), adist=np.asarray(aux[6]))


def _expand(state, params, cfg, rng):
    vf = state.value_function(cfg.temperature)
    grown = expand_belief_set(vf.beliefs, params, rng, epsilon=cfg.expand_epsilon,
                              max_beliefs=cfg.max_beliefs)
    if len(grown) == len(vf.beliefs):
        return state
    vf.beliefs = grown
    return solver_state(vf, state.noise, max(len(state.bmask), _train_capacity(cfg, len(grown))))


def _train_one(prob, cfg, rng, restart, t0):
    dataset = prob.dataset
    A = prob.batch.behavior.shape[-1]
    params = initial_params(dataset, cfg.n_states, A, rng, cfg.gamma, cfg.initial_action)
    for _ in range(cfg.warm_start_em):
        params = em_step(dataset, params)
    params = params.replace(reward=_refresh_rewards(prob, params))
    u = unconstrain(params)
    state = _settle(_as_unconstrained(u), prob, cfg, _fresh_state(params, cfg, rng), cfg.init_backups)
    opt = rprop_init(u)
    trace, best_hist = [], []
    g, val, state_next = gradient(u, prob, cfg, state, return_value=True)
    for it in range(cfg.max_iters + 1):
        trace.append({"restart": restart, "iteration": it, "loglik_rescaled": val.loglik_rescaled,
                      "policy_value": val.policy_value, "ess_total": val.ess_total,
                      "total": val.total, "wall_time": time.perf_counter() - t0})
        best_hist.append(val.total)
        if it == cfg.max_iters:
            break
        if len(best_hist) > cfg.patience and \
                max(best_hist[-cfg.patience:]) - max(best_hist[:-cfg.patience]) < cfg.tol:
            break
        u, opt = rprop_step(u, g, opt)
        params = constrain(u, cfg.gamma, cfg.initial_action)
        params = params.replace(reward=_refresh_rewards(prob, params))
        u = u._replace(reward=params.reward)
        state = state_next
        if cfg.reset_period and (it + 1) % cfg.reset_period == 0:
            state = _settle(_as_unconstrained(u), prob, cfg, _fresh_state(params, cfg, rng), cfg.init_backups)
        elif cfg.expand_period and (it + 1) % cfg.expand_period == 0:
            state = _expand(state, params, cfg, rng)
        g, val, state_next = gradient(u, prob, cfg, state, return_value=True)
    params = constrain(u, cfg.gamma, cfg.initial_action)
    return params, state_next, val, trace


def train(dataset: Sequence[Trajectory], cfg: ObjectiveConfig, n_actions: Optional[int] = None) -> TrainResult:
    """Best of ``cfg.restarts`` Rprop runs by final training objective."""
    if cfg.mode == "two_stage":
        return two_stage_train(dataset, cfg, n_actions)
    A = n_actions or _infer_actions(dataset)
    prob = prepare(dataset, A, cfg.initial_action)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)]
    t0 = time.perf_counter()
    results, totals, trace = [], [], []
    for r, rng in enumerate(rngs):
        try:
            res = _train_one(prob, cfg, rng, r, t0)
        except NumericalError:
            totals.append(-np.inf)
            results.append(None)
            continue
        results.append(res)
        totals.append(res[2].total)
        trace.extend(res[3])
    if all(r is None for r in results):
        raise NumericalError("every restart failed", parameter="total")
    best = int(np.argmax(totals))
    params, state, val, _ = results[best]
    vf = state.value_function(cfg.temperature, soft=True)
    return TrainResult(params, vf, val, trace, totals, best)


def _infer_actions(dataset):
    for tr in dataset:
        if tr.behavior_probs is not None:
            return tr.behavior_probs.shape[1]
    return int(max(tr.actions.max() for tr in dataset)) + 1


def two_stage_train(dataset: Sequence[Trajectory], cfg: ObjectiveConfig, n_actions: Optional[int] = None,
                    plan: bool = True) -> TrainResult:
    """EM (with the reward M-step) from each restart, keep the most likely
    model, then plan on it with hard-mode point-based value iteration.

    With ``plan=False`` the planning step is skipped and the value function is
    ``None``.
    """
    A = n_actions or _infer_actions(dataset)
    n_scalars = n_observed(dataset)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)]
    t0 = time.perf_counter()
    best, totals, trace = None, [], []
    for r, rng in enumerate(rngs):
        params = initial_params(dataset, cfg.n_states, A, rng, cfg.gamma, cfg.initial_action)
        try:
            ll = log_marginal_likelihood(dataset, params) / n_scalars
            for it in range(cfg.em_iters + 1):
                trace.append({"restart": r, "iteration": it, "loglik_rescaled": ll, "policy_value": float("nan"),
                              "ess_total": float("nan"), "total": ll, "wall_time": time.perf_counter() - t0})
                if it == cfg.em_iters:
                    break
                new = em_step(dataset, params)
                new_ll = log_marginal_likelihood(dataset, new) / n_scalars
                done = new_ll - ll < cfg.tol
                params, ll = new, new_ll
                if done:
                    trace.append({"restart": r, "iteration": it + 1, "loglik_rescaled": ll,
                                  "policy_value": float("nan"), "ess_total": float("nan"), "total": ll,
                                  "wall_time": time.perf_counter() - t0})
                    break
        except NumericalError:
            totals.append(-np.inf)
            continue
        totals.append(ll)
        if best is None or ll > best[1]:
            best = (params, ll, r)
    if best is None:
        raise NumericalError("every restart failed", parameter="loglik")
    params, ll, r = best
    if not plan:
        return TrainResult(params, None, ObjectiveValue(ll, ll, float("nan"), float("nan")), trace, totals, r)
    vf = solve_hard(params, k_obs=cfg.k_obs, seed=cfg.seed, temperature=cfg.temperature,
                    max_beliefs=cfg.max_beliefs, epsilon=cfg.expand_epsilon)
    value, ess = _policy_value(dataset, params, vf, cfg)
    return TrainResult(params, vf, ObjectiveValue(ll, ll, value, ess), trace, totals, r)


def policy_probs(dataset, params: PomdpParams, vf: ValueFunction, delta=0.0):
    """Per-trajectory action distributions of the value function's policy on
    beliefs filtered under ``params``, support-restricted at ``delta``."""
    out = []
    for tr in dataset:
        p = np.atleast_2d(policy_action_dist(vf, filter_beliefs(tr, params)))
        if tr.behavior_probs is not None:
            p = restrict_policy_support(p, tr.behavior_probs, delta)
        out.append(p)
    return out


def _policy_value(dataset, params, vf, cfg):
    if any(tr.behavior_probs is None for tr in dataset):
        return float("nan"), float("nan")
    rep = cwpdis_value(dataset, policy_probs(dataset, params, vf, cfg.delta), cfg.gamma)
    return rep.value, rep.ess_total
