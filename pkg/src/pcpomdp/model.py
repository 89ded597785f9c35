"""Input-output HMM with Gaussian emissions.

States evolve as ``s_{t+1} ~ tau[a_t, s_t, :]`` and the observation at step
``t`` is emitted from ``N(mu[a_{t-1}, s_t], sigma[a_{t-1}, s_t]**2)``
independently per dimension.  The observation at ``t=0`` has no preceding
action; it is emitted under ``initial_action``.

Missing scalars are stored as NaN.  They contribute a factor of one to the
emission likelihood and are left out of every sufficient statistic.

The numpy-facing functions here wrap jitted JAX kernels (prefixed ``_``)
which the objective module reuses for gradients.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._jax import jax, jnp
from .exceptions import NumericalError, NumericalUnderflowWarning, UnvisitedWarning

MISSING = float("nan")
SIGMA_FLOOR = 1e-3
UNDERFLOW = 1e-300
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class Trajectory:
    """One episode of batch data.

    ``observations[t]`` is seen before ``actions[t]`` is taken, and
    ``rewards[t]`` is the reward for that action.
    """

    actions: np.ndarray
    observations: np.ndarray
    rewards: np.ndarray
    behavior_probs: Optional[np.ndarray] = None
    id: Optional[str] = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[:, None]
        self.observations = obs
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        T = len(self.actions)
        if T < 1:
            raise ValueError("a trajectory needs at least one step")
        if obs.ndim != 2 or obs.shape[0] != T or len(self.rewards) != T:
            raise ValueError(
                f"actions, observations and rewards must share length; got "
                f"{T}, {obs.shape[0]}, {len(self.rewards)}"
            )
        if np.any(self.actions < 0):
            raise ValueError("action indices must be non-negative")
        if self.behavior_probs is not None:
            bp = np.asarray(self.behavior_probs, dtype=np.float64)
            if bp.ndim != 2 or bp.shape[0] != T:
                raise ValueError("behavior_probs must have shape (T, A)")
            if np.any(bp < 0) or np.any(np.abs(bp.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError("behavior_probs rows must be probability vectors")
            self.behavior_probs = bp

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def n_dims(self) -> int:
        return self.observations.shape[1]

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.observations)


@dataclass(frozen=True)
class PomdpParams:
    tau0: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    reward: np.ndarray
    gamma: float = 0.9
    initial_action: int = 0

    def __post_init__(self):
        for name in ("tau0", "tau", "mu", "sigma", "reward"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        A, K, D = self.mu.shape
        if self.tau0.shape != (K,) or self.tau.shape != (A, K, K):
            raise ValueError("tau0/tau shapes inconsistent with mu")
        if self.sigma.shape != (A, K, D) or self.reward.shape != (K, A):
            raise ValueError("sigma/reward shapes inconsistent with mu")
        if np.any(self.tau0 < 0) or abs(self.tau0.sum() - 1.0) > 1e-9:
            raise ValueError("tau0 must be a probability vector")
        if np.any(self.tau < 0) or np.any(np.abs(self.tau.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("every tau[a, j, :] must be a probability vector")
        if not np.all(self.sigma > 0):
            raise ValueError("sigma entries must be strictly positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.initial_action < A:
            raise ValueError("initial_action out of range")

    @property
    def n_states(self) -> int:
        return self.mu.shape[1]

    @property
    def n_actions(self) -> int:
        return self.mu.shape[0]

    @property
    def n_dims(self) -> int:
        return self.mu.shape[2]

    def replace(self, **changes) -> "PomdpParams":
        kw = {k: getattr(self, k) for k in
              ("tau0", "tau", "mu", "sigma", "reward", "gamma", "initial_action")}
        kw.update(changes)
        return PomdpParams(**kw)


class UnconstrainedParams(NamedTuple):
    """Real-valued parameterization used for gradient ascent.

    ``reward`` rides along but is never gradient-updated.
    """

    tau0_logits: np.ndarray
    tau_logits: np.ndarray
    mu_raw: np.ndarray
    sigma_raw: np.ndarray
    reward: np.ndarray


def _softplus(x):
    return jnp.logaddexp(x, 0.0)


def _constrain(u):
    tau0 = jax.nn.softmax(u.tau0_logits)
    tau = jax.nn.softmax(u.tau_logits, axis=-1)
    sigma = SIGMA_FLOOR + _softplus(u.sigma_raw)
    return tau0, tau, u.mu_raw, sigma


def constrain(u: UnconstrainedParams, gamma=0.9, initial_action=0) -> PomdpParams:
    tau0, tau, mu, sigma = (np.asarray(x) for x in _constrain(u))
    # renormalize on the host so the 1e-9 simplex check holds after float64 softmax
    tau0 = tau0 / tau0.sum()
    tau = tau / tau.sum(axis=-1, keepdims=True)
    return PomdpParams(tau0, tau, mu, sigma, np.asarray(u.reward, dtype=float),
                       gamma=gamma, initial_action=initial_action)


def unconstrain(params: PomdpParams) -> UnconstrainedParams:
    def logit(p):
        return np.log(np.maximum(p, 1e-12))

    excess = np.maximum(params.sigma - SIGMA_FLOOR, 1e-12)
    sigma_raw = excess + np.log(-np.expm1(-excess))  # inverse softplus
    return UnconstrainedParams(
        logit(params.tau0), logit(params.tau), params.mu.copy(), sigma_raw,
        params.reward.copy(),
    )


class TrajectoryBatch(NamedTuple):
    """Dataset padded to a common length ``T``; pads are masked out."""

    actions: np.ndarray       # (N, T) int
    prev_actions: np.ndarray  # (N, T) action preceding each emission
    obs: np.ndarray           # (N, T, D), 0.0 where missing
    obs_mask: np.ndarray      # (N, T, D) bool
    rewards: np.ndarray       # (N, T), 0.0 on pads
    step_mask: np.ndarray     # (N, T) bool
    behavior: np.ndarray      # (N, T, A), ones on pads or when absent
    lengths: np.ndarray       # (N,)


def batch_dataset(dataset: Sequence[Trajectory], n_actions: int, initial_action: int = 0) -> TrajectoryBatch:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    N = len(dataset)
    T = max(tr.n_steps for tr in dataset)
    D = dataset[0].n_dims
    actions = np.zeros((N, T), dtype=np.int32)
    obs = np.zeros((N, T, D))
    obs_mask = np.zeros((N, T, D), dtype=bool)
    rewards = np.zeros((N, T))
    step_mask = np.zeros((N, T), dtype=bool)
    behavior = np.ones((N, T, n_actions))
    for n, tr in enumerate(dataset):
        if tr.n_dims != D:
            raise ValueError("observation dimension differs across trajectories")
        if tr.actions.max() >= n_actions:
            raise ValueError(f"action index {tr.actions.max()} >= n_actions={n_actions}")
        L = tr.n_steps
        actions[n, :L] = tr.actions
        m = tr.observed_mask
        obs[n, :L] = np.where(m, tr.observations, 0.0)
        obs_mask[n, :L] = m
        rewards[n, :L] = tr.rewards
        step_mask[n, :L] = True
        if tr.behavior_probs is not None:
            if tr.behavior_probs.shape[1] != n_actions:
                raise ValueError("behavior_probs width differs from n_actions")
            behavior[n, :L] = tr.behavior_probs
    prev = np.concatenate([np.full((N, 1), initial_action, dtype=np.int32), actions[:, :-1]], axis=1)
    lengths = step_mask.sum(axis=1)
    return TrajectoryBatch(actions, prev, obs, obs_mask, rewards, step_mask, behavior, lengths)


# ---------------------------------------------------------------- kernels


def _emission_logpdf(mu, sigma, obs, obs_mask, prev_actions, xp=jnp):
    """Per-state emission log-density, shape ``prev_actions.shape + (K,)``."""
    m = mu[prev_actions]
    s = sigma[prev_actions]
    z = (obs[..., None, :] - m) / s
    lp = -0.5 * z * z - xp.log(s) - _HALF_LOG_2PI
    return xp.sum(xp.where(obs_mask[..., None, :], lp, 0.0), axis=-1)


def _normalize(pred, log_em, observed=True, xp=jnp):
    shift = xp.max(log_em, axis=-1, keepdims=True)
    scaled = xp.exp(log_em - shift)
    u = pred * scaled
    c = xp.sum(u, axis=-1)
    bad = c < UNDERFLOW
    c_safe = xp.where(bad, 1.0, c)
    b = xp.where(bad[..., None], pred, u / c_safe[..., None])
    log_c = xp.log(xp.maximum(c, UNDERFLOW)) + shift[..., 0]
    # a step with nothing observed contributes exactly log 1
    log_c = xp.where(observed, log_c, 0.0)
    return b, log_c, bad, scaled, c_safe


def _forward(tau0, tau, log_em, actions, step_mask, observed):
    """Scaled forward filter over a padded batch.

    Returns filtered beliefs ``(N, T, K)``, per-step log normalizers
    ``(N, T)`` (zero on pads), underflow flags, the max-shifted emissions and
    the matching normalizers (both reused by the backward pass).
    """
    N = log_em.shape[0]
    pred0 = jnp.broadcast_to(tau0, (N, tau0.shape[0]))
    b0, lc0, bad0, sc0, c0 = _normalize(pred0, log_em[:, 0], observed[:, 0])

    def step(b_prev, xs):
        a_prev, le, live, obs_any = xs
        pred = jnp.einsum("nj,njk->nk", b_prev, tau[a_prev])
        b, lc, bad, sc, c = _normalize(pred, le, obs_any)
        b = jnp.where(live[:, None], b, b_prev)
        lc = jnp.where(live, lc, 0.0)
        return b, (b, lc, bad & live, sc, c)

    xs = (actions[:, :-1].T, jnp.swapaxes(log_em[:, 1:], 0, 1), step_mask[:, 1:].T, observed[:, 1:].T)
    _, (bs, lcs, bads, scs, cs) = jax.lax.scan(step, b0, xs)
    beliefs = jnp.concatenate([b0[:, None], jnp.swapaxes(bs, 0, 1)], axis=1)
    log_c = jnp.concatenate([lc0[:, None], lcs.T], axis=1)
    bad = jnp.concatenate([bad0[:, None], bads.T], axis=1)
    scaled = jnp.concatenate([sc0[:, None], jnp.swapaxes(scs, 0, 1)], axis=1)
    cnorm = jnp.concatenate([c0[:, None], cs.T], axis=1)
    return beliefs, log_c, bad, scaled, cnorm


def _filter_batch(tau0, tau, mu, sigma, batch):
    log_em = _emission_logpdf(mu, sigma, batch.obs, batch.obs_mask, batch.prev_actions)
    observed = jnp.any(batch.obs_mask, axis=-1)
    return _forward(tau0, tau, log_em, batch.actions, batch.step_mask, observed)


def _filter_numpy(params, batch):
    """Host-side twin of :func:`_filter_batch` for small batches, where
    compiling a kernel for every new shape costs more than the work."""
    tau0, tau, mu, sigma = _arrays(params)
    log_em = _emission_logpdf(mu, sigma, batch.obs, batch.obs_mask, batch.prev_actions, xp=np)
    observed = batch.obs_mask.any(axis=-1)
    N, T, K = log_em.shape
    beliefs = np.empty((N, T, K))
    log_c = np.zeros((N, T))
    bad = np.zeros((N, T), dtype=bool)
    b, lc, bd, _, _ = _normalize(np.broadcast_to(tau0, (N, K)), log_em[:, 0], observed[:, 0], xp=np)
    beliefs[:, 0], log_c[:, 0], bad[:, 0] = b, lc, bd
    for t in range(1, T):
        pred = np.einsum("nj,njk->nk", b, tau[batch.actions[:, t - 1]])
        nb, lc, bd, _, _ = _normalize(pred, log_em[:, t], observed[:, t], xp=np)
        live = batch.step_mask[:, t]
        b = np.where(live[:, None], nb, b)
        beliefs[:, t], log_c[:, t], bad[:, t] = b, np.where(live, lc, 0.0), bd & live
    return beliefs, log_c, bad


SMALL_BATCH = 256


def _loglik(params, batch):
    if batch.step_mask.size <= SMALL_BATCH:
        beliefs, log_c, bad = _filter_numpy(params, batch)
        return log_c.sum(axis=1), bad.any(axis=1), beliefs
    return _loglik_kernel(*_arrays(params), batch)


@jax.jit
def _loglik_kernel(tau0, tau, mu, sigma, batch):
    beliefs, log_c, bad, _, _ = _filter_batch(tau0, tau, mu, sigma, batch)
    return jnp.sum(log_c, axis=1), jnp.any(bad, axis=1), beliefs


@jax.jit
def _posterior_kernel(tau0, tau, mu, sigma, batch):
    """Smoothed state posteriors and summed pairwise posteriors."""
    beliefs, log_c, bad, scaled, cnorm = _filter_batch(tau0, tau, mu, sigma, batch)
    N, T, K = beliefs.shape
    live_next = batch.step_mask[:, 1:]

    def step(beta_next, xs):
        a, sc_next, c_next, live = xs
        msg = sc_next * beta_next / c_next[:, None]
        beta = jnp.einsum("njk,nk->nj", tau[a], msg)
        beta = jnp.where(live[:, None], beta, 1.0)
        return beta, beta

    xs = (
        batch.actions[:, :-1].T[::-1],
        jnp.swapaxes(scaled[:, 1:], 0, 1)[::-1],
        cnorm[:, 1:].T[::-1],
        live_next.T[::-1],
    )
    beta_last = jnp.ones((N, K))
    _, betas = jax.lax.scan(step, beta_last, xs)
    betas = jnp.concatenate([jnp.swapaxes(betas[::-1], 0, 1), beta_last[:, None]], axis=1)
    post = beliefs * betas
    post = post / jnp.sum(post, axis=-1, keepdims=True)
    msg = scaled[:, 1:] * betas[:, 1:] / cnorm[:, 1:, None]
    xi = beliefs[:, :-1, :, None] * tau[batch.actions[:, :-1]] * msg[:, :, None, :]
    xi = jnp.where(live_next[:, :, None, None], xi, 0.0)
    return post, xi, jnp.sum(log_c, axis=1), jnp.any(bad, axis=1)


# ------------------------------------------------------------ public API


def _arrays(params: PomdpParams):
    return params.tau0, params.tau, params.mu, params.sigma


def _check_finite_params(params: PomdpParams):
    for name in ("tau0", "tau", "mu", "sigma"):
        if not np.all(np.isfinite(getattr(params, name))):
            raise NumericalError(f"parameter {name} has non-finite entries", parameter=name)


def belief_update(b, a: int, o, params: PomdpParams) -> np.ndarray:
    """One filtering step: predict through ``tau[a]``, then condition on ``o``.

    Falls back to the prediction (with a warning) when ``o`` has numerically
    zero probability under the predicted belief.
    """
    b = np.asarray(b, dtype=float)
    o = np.atleast_1d(np.asarray(o, dtype=float))
    pred = b @ params.tau[a]
    mask = ~np.isnan(o)
    if not mask.any():
        return pred
    le = _emission_logpdf(params.mu, params.sigma, np.where(mask, o, 0.0), mask, a, xp=np)
    post, _, bad, _, _ = _normalize(pred, le, xp=np)
    if bool(bad):
        warnings.warn("observation has zero probability under the predicted belief",
                      NumericalUnderflowWarning, stacklevel=2)
        return pred / pred.sum()
    return np.asarray(post)


def initial_belief(o0, params: PomdpParams) -> np.ndarray:
    """Belief at ``t=0`` after seeing ``o0`` under the initial-action convention."""
    o0 = np.atleast_1d(np.asarray(o0, dtype=float))
    mask = ~np.isnan(o0)
    if not mask.any():
        return params.tau0.copy()
    le = _emission_logpdf(params.mu, params.sigma, np.where(mask, o0, 0.0), mask,
                          params.initial_action, xp=np)
    post, _, bad, _, _ = _normalize(params.tau0, le, xp=np)
    if bool(bad):
        warnings.warn("initial observation has zero probability under tau0",
                      NumericalUnderflowWarning, stacklevel=2)
        return params.tau0.copy()
    return np.asarray(post)


def filter_beliefs(trajectory: Trajectory, params: PomdpParams) -> np.ndarray:
    """Filtered beliefs ``b_t = p(s_t | o_{0:t}, a_{0:t-1})`` for every step."""
    batch = batch_dataset([trajectory], params.n_actions, params.initial_action)
    _, _, beliefs = _loglik(params, batch)
    return np.asarray(beliefs[0])


def n_observed(dataset: Sequence[Trajectory]) -> int:
    return int(sum(tr.observed_mask.sum() for tr in dataset))


def log_marginal_likelihood(dataset: Sequence[Trajectory], params: PomdpParams) -> float:
    _check_finite_params(params)
    batch = batch_dataset(dataset, params.n_actions, params.initial_action)
    ll, bad, _ = _loglik(params, batch)
    ll = np.asarray(ll)
    if np.any(np.asarray(bad)) or not np.all(np.isfinite(ll)):
        raise NumericalError(
            "log marginal likelihood is not finite: an observation has zero "
            "probability (degenerate sigma or tau)", parameter="sigma" if np.any(params.sigma < 1e-6) else "tau")
    return float(ll.sum())


def forward_backward(trajectory: Trajectory, params: PomdpParams):
    """Return ``(gamma, xi)``: ``gamma[t, k] = p(s_t=k | all data)`` and
    ``xi[t, j, k] = p(s_t=j, s_{t+1}=k | all data)`` for ``t < T-1``."""
    _check_finite_params(params)
    batch = batch_dataset([trajectory], params.n_actions, params.initial_action)
    post, xi, ll, bad = _posterior_kernel(*_arrays(params), batch)
    if bool(bad[0]) or not np.isfinite(float(ll[0])):
        raise NumericalError("trajectory has zero probability under the model", parameter="sigma")
    T = trajectory.n_steps
    return np.asarray(post[0, :T]), np.asarray(xi[0, : T - 1])


def _posteriors(dataset, params):
    _check_finite_params(params)
    batch = batch_dataset(dataset, params.n_actions, params.initial_action)
    post, xi, ll, bad = _posterior_kernel(*_arrays(params), batch)
    if np.any(np.asarray(bad)):
        raise NumericalError("dataset has zero probability under the model", parameter="sigma")
    return batch, np.asarray(post), np.asarray(xi)


def _reward_mstep(batch, post, n_actions):
    onehot = (batch.actions[..., None] == np.arange(n_actions)) & batch.step_mask[..., None]
    mass = np.einsum("ntk,nta->ka", post, onehot)
    total = np.einsum("ntk,nta,nt->ka", post, onehot, batch.rewards)
    R = np.where(mass > 0, total / np.where(mass > 0, mass, 1.0), 0.0)
    return R, mass


def learn_rewards(dataset: Sequence[Trajectory], params: PomdpParams, return_mass=False):
    """Posterior-weighted least-squares reward table ``R[k, a]``.

    The E-step uses only transitions and emissions.  Pairs with no posterior
    mass get ``R = 0`` and trigger :class:`UnvisitedWarning` when
    ``return_mass`` is false.
    """
    batch, post, _ = _posteriors(dataset, params)
    R, mass = _reward_mstep(batch, post, params.n_actions)
    if return_mass:
        return R, mass
    if np.any(mass == 0):
        warnings.warn(f"{int((mass == 0).sum())} state/action pairs unvisited; reward set to 0",
                      UnvisitedWarning, stacklevel=2)
    return R


def em_step(dataset: Sequence[Trajectory], params: PomdpParams) -> PomdpParams:
    """One Baum-Welch iteration on tau0, tau, mu, sigma and the reward table."""
    batch, post, xi = _posteriors(dataset, params)
    A, K, D = params.mu.shape

    tau0 = post[:, 0].mean(axis=0)

    act_onehot = batch.actions[:, :-1, None] == np.arange(A)
    trans = np.einsum("ntjk,nta->ajk", xi, act_onehot)
    row = trans.sum(axis=-1, keepdims=True)
    tau = np.where(row > 0, trans / np.where(row > 0, row, 1.0), params.tau)

    prev_onehot = (batch.prev_actions[..., None] == np.arange(A)) & batch.step_mask[..., None]
    w = np.einsum("ntk,nta,ntd->akd", post, prev_onehot, batch.obs_mask.astype(float))
    sx = np.einsum("ntk,nta,ntd->akd", post, prev_onehot, batch.obs)
    w_safe = np.where(w > 0, w, 1.0)
    mu = np.where(w > 0, sx / w_safe, params.mu)
    sq = np.einsum("ntk,nta,ntakd->akd", post, prev_onehot,
                   np.where(batch.obs_mask[:, :, None, None, :],
                            (batch.obs[:, :, None, None, :] - mu[None, None]) ** 2, 0.0))
    sigma = np.where(w > 0, np.maximum(np.sqrt(sq / w_safe), SIGMA_FLOOR), params.sigma)

    R, _ = _reward_mstep(batch, post, A)
    return params.replace(tau0=tau0 / tau0.sum(), tau=tau, mu=mu, sigma=sigma, reward=R)


def forecast_observations(obs_prefix, actions_prefix, future_actions, params: PomdpParams) -> np.ndarray:
    """Expected future observations after filtering on a prefix.

    ``obs_prefix`` holds ``o_0..o_{L-1}``; ``actions_prefix`` holds the
    ``L-1`` actions between them; ``future_actions[h-1]`` is the action
    preceding ``o_{L-1+h}``.  Returns an ``(H, D)`` array.
    """
    obs_prefix = np.asarray(obs_prefix, dtype=float)
    if obs_prefix.ndim == 1:
        obs_prefix = obs_prefix[:, None]
    L = len(obs_prefix)
    if L < 1:
        raise ValueError("prefix must contain at least one observation")
    actions_prefix = np.asarray(actions_prefix, dtype=np.int64)
    if len(actions_prefix) != L - 1:
        raise ValueError("actions_prefix must have one fewer entry than obs_prefix")
    b = initial_belief(obs_prefix[0], params)
    for t in range(1, L):
        b = belief_update(b, int(actions_prefix[t - 1]), obs_prefix[t], params)
    out = []
    for a in np.asarray(future_actions, dtype=np.int64):
        b = b @ params.tau[a]
        out.append(b @ params.mu[a])
    return np.array(out).reshape(len(out), params.n_dims)


def forecast(trajectory: Trajectory, prefix_len: int, horizon: int, params: PomdpParams) -> np.ndarray:
    """Forecast ``o_{L}, ..., o_{L+H-1}`` from the first ``L`` steps of a trajectory,
    using the trajectory's own recorded actions as the future actions."""
    if prefix_len < 1:
        raise ValueError("prefix_len must be >= 1")
    if prefix_len - 1 + horizon > trajectory.n_steps:
        raise ValueError("horizon exceeds the actions available in the trajectory")
    future = trajectory.actions[prefix_len - 1: prefix_len - 1 + horizon]
    return forecast_observations(trajectory.observations[:prefix_len],
                                 trajectory.actions[: prefix_len - 1], future, params)


def sample_trajectory(params: PomdpParams, actions, rng) -> Trajectory:
    """Draw observations from the model along a fixed action sequence."""
    actions = np.asarray(actions, dtype=np.int64)
    s = rng.choice(params.n_states, p=params.tau0)
    obs = np.empty((len(actions), params.n_dims))
    rewards = np.empty(len(actions))
    prev = params.initial_action
    for t, a in enumerate(actions):
        if t > 0:
            s = rng.choice(params.n_states, p=params.tau[actions[t - 1], s])
        obs[t] = rng.normal(params.mu[prev, s], params.sigma[prev, s])
        rewards[t] = params.reward[s, a]
        prev = a
    return Trajectory(actions, obs, rewards)
