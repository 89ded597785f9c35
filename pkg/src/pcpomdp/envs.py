"""Tiger benchmark variants, Monte Carlo evaluation, and a belief-grid oracle.

Actions are ``LISTEN=0``, ``OPEN_0=1`` and ``OPEN_1=2``; the hidden state is
the index of the safe door.  Each episode starts with a listen-type
observation ``o_0`` (emitted under the initial-action convention) and ends
as soon as a door is opened.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm, truncnorm

from .model import PomdpParams, Trajectory, belief_update, initial_belief
from .solver import ValueFunction, policy_action_dist

LISTEN, OPEN_0, OPEN_1 = 0, 1, 2
N_ACTIONS = 3
VARIANTS = ("irrelevant_noise", "missing_data", "wrong_likelihood")

# truncated two-component mixture used by the wrong-likelihood variant
GMM_WEIGHTS = (0.5, 0.5)
GMM_MEANS = (0.0, 1.0)
GMM_STDS = (0.1, 1.0)


def gmm_negative_mass() -> float:
    return float(sum(w * norm.cdf(0.0, m, s) for w, m, s in zip(GMM_WEIGHTS, GMM_MEANS, GMM_STDS)))


@dataclass(frozen=True)
class TigerSpec:
    variant: str = "irrelevant_noise"
    n_dims: Optional[int] = None
    missing_frac: Optional[float] = None
    gamma: float = 0.9
    reward_tiger: float = -5.0
    reward_safe: float = 1.0
    reward_listen: float = -0.1
    sigma_signal: float = 0.3
    sigma_noise: Optional[float] = None
    listen_steps: int = 5
    max_len: int = 15

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown tiger variant {self.variant!r}")
        if self.n_dims is None:
            object.__setattr__(self, "n_dims", 1 if self.variant == "wrong_likelihood" else 2)
        if self.missing_frac is None:
            object.__setattr__(self, "missing_frac", 0.8 if self.variant == "missing_data" else 0.0)
        if self.sigma_noise is None:
            object.__setattr__(self, "sigma_noise", 0.3 if self.variant == "missing_data" else 0.1)
        if self.variant == "wrong_likelihood" and self.n_dims != 1:
            raise ValueError("wrong_likelihood uses a single observation dimension")
        if self.variant == "irrelevant_noise" and not 1 <= self.n_dims <= 16:
            raise ValueError("irrelevant_noise supports 1 to 16 dimensions")
        if self.variant == "missing_data" and self.n_dims < 2:
            raise ValueError("missing_data needs a signal and an irrelevant dimension")
        if self.variant != "missing_data" and self.missing_frac != 0.0:
            raise ValueError("missing_frac only applies to the missing_data variant")
        if not 0.0 <= self.missing_frac < 1.0:
            raise ValueError("missing_frac must lie in [0, 1)")
        if not 1 <= self.listen_steps < self.max_len:
            raise ValueError("need 1 <= listen_steps < max_len")

    @property
    def safe_prior(self) -> np.ndarray:
        """Distribution of the safe door.  For the wrong-likelihood variant it
        matches the mixture's sign probabilities, so observations are
        marginally distributed as the untruncated mixture."""
        if self.variant == "wrong_likelihood":
            p0 = gmm_negative_mass()
            return np.array([p0, 1.0 - p0])
        return np.array([0.5, 0.5])

    def reward(self, safe: int, action: int) -> float:
        if action == LISTEN:
            return self.reward_listen
        return self.reward_safe if action - 1 == safe else self.reward_tiger


def _truncated_gmm(rng, negative: bool) -> float:
    # the truncated mixture is the mixture conditioned on the sign, so plain
    # rejection is exact and far cheaper than per-draw truncnorm calls
    while True:
        c = 0 if rng.random() < GMM_WEIGHTS[0] else 1
        x = rng.normal(GMM_MEANS[c], GMM_STDS[c])
        if (x < 0) if negative else (x > 0):
            return float(x)


class TigerEnv:
    """Single-episode tiger simulator."""

    def __init__(self, spec: TigerSpec, rng):
        self.spec = spec
        self.rng = rng
        self.safe = None
        self.traits = None

    def reset(self) -> np.ndarray:
        spec = self.spec
        self.safe = int(self.rng.choice(2, p=spec.safe_prior))
        # irrelevant binary traits, one per irrelevant dimension, fixed for the trial
        self.traits = self.rng.integers(0, 2, size=max(spec.n_dims - 1, 0))
        return self.emit()

    def emit(self) -> np.ndarray:
        spec, rng = self.spec, self.rng
        if spec.variant == "wrong_likelihood":
            return np.array([_truncated_gmm(rng, negative=self.safe == 0)])
        o = np.empty(spec.n_dims)
        o[0] = rng.normal(self.safe, spec.sigma_signal)
        o[1:] = rng.normal(self.traits, spec.sigma_noise)
        if spec.variant == "missing_data" and rng.random() < spec.missing_frac:
            o[0] = np.nan
        return o

    def step(self, action: int):
        r = self.spec.reward(self.safe, action)
        if action == LISTEN:
            return self.emit(), r, False
        return None, r, True


def behavior_probs(t: int, spec: TigerSpec) -> np.ndarray:
    """Data-collection policy: listen for ``listen_steps`` steps, then listen
    or open (a uniformly chosen door) with equal probability; the last
    allowed step always opens."""
    if t < spec.listen_steps:
        return np.array([1.0, 0.0, 0.0])
    if t >= spec.max_len - 1:
        return np.array([0.0, 0.5, 0.5])
    return np.array([0.5, 0.25, 0.25])


def _episode_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_tiger_dataset(spec: TigerSpec, n_traj: int, seed=0, return_states=False):
    """Batch of tiger episodes under :func:`behavior_probs`, with exact
    behavior probabilities attached."""
    if n_traj < 0:
        raise ValueError("n_traj must be non-negative")
    data, states = [], []
    for n, rng in enumerate(_episode_rngs(seed, n_traj)):
        env = TigerEnv(spec, rng)
        obs = [env.reset()]
        actions, rewards, probs = [], [], []
        for t in range(spec.max_len):
            p = behavior_probs(t, spec)
            a = int(rng.choice(N_ACTIONS, p=p))
            o, r, done = env.step(a)
            actions.append(a), rewards.append(r), probs.append(p)
            if done:
                break
            obs.append(o)
        data.append(Trajectory(actions, np.array(obs), rewards, behavior_probs=np.array(probs), id=str(n)))
        states.append(env.safe)
    if return_states:
        return data, np.array(states)
    return data


Policy = Callable[[Sequence[int], Sequence[np.ndarray]], np.ndarray]


def rollout_evaluate(policy: Policy, spec: TigerSpec, n_rollouts=1000, seed=0, max_steps=100, greedy=False):
    """Mean discounted return of fresh episodes and its standard error.

    ``policy(actions_so_far, observations_so_far)`` returns an action
    distribution; observations include the current one.
    """
    returns = np.empty(n_rollouts)
    for i, rng in enumerate(_episode_rngs(seed, n_rollouts)):
        env = TigerEnv(spec, rng)
        obs, acts = [env.reset()], []
        total, disc = 0.0, 1.0
        for _ in range(max_steps):
            p = np.asarray(policy(acts, obs), dtype=float)
            a = int(np.argmax(p)) if greedy else int(rng.choice(len(p), p=p / p.sum()))
            o, r, done = env.step(a)
            total += disc * r
            disc *= spec.gamma
            acts.append(a)
            if done:
                break
            obs.append(o)
        returns[i] = total
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0


def always_listen(actions, observations):
    return np.array([1.0, 0.0, 0.0])


def open_random_door(actions, observations):
    return np.array([0.0, 0.5, 0.5])


class ModelPolicy:
    """Runs a solved value function on beliefs filtered under ``params``.

    ``delta`` with ``behavior`` restricts support in the same way as the
    off-policy objective does.
    """

    def __init__(self, params: PomdpParams, vf: ValueFunction, behavior: Optional[Callable] = None, delta=0.0):
        self.params = params
        self.vf = vf
        self.behavior = behavior
        self.delta = delta
        self._belief = None
        self._seen = 0

    def belief(self, actions, observations):
        if len(observations) == 1 or self._belief is None or self._seen != len(observations) - 1:
            b = initial_belief(observations[0], self.params)
            for t in range(1, len(observations)):
                b = belief_update(b, actions[t - 1], observations[t], self.params)
        else:
            b = belief_update(self._belief, actions[-1], observations[-1], self.params)
        self._belief, self._seen = b, len(observations)
        return b

    def __call__(self, actions, observations):
        p = policy_action_dist(self.vf, self.belief(actions, observations))
        if self.behavior is not None and self.delta > 0:
            from .ope import restrict_policy_support
            p = restrict_policy_support(p, self.behavior(len(actions)), self.delta)
        return p


def _truncated_moments(negative: bool):
    lo, hi = (-np.inf, 0.0) if negative else (0.0, np.inf)
    w, m1, m2 = [], [], []
    for wc, m, s in zip(GMM_WEIGHTS, GMM_MEANS, GMM_STDS):
        a, b = (lo - m) / s, (hi - m) / s
        mean, var = truncnorm.stats(a, b, loc=m, scale=s, moments="mv")
        w.append(wc * (norm.cdf(hi, m, s) - norm.cdf(lo, m, s)))
        m1.append(float(mean))
        m2.append(float(var) + float(mean) ** 2)
    w = np.array(w) / np.sum(w)
    mean = float(w @ m1)
    return mean, float(np.sqrt(w @ m2 - mean ** 2))


def manual_tiger_solution(spec: TigerSpec) -> PomdpParams:
    """Two-state model built from the true door semantics with emissions
    moment-matched to the true listen-observation distribution of each state."""
    D = spec.n_dims
    mu = np.zeros((2, D))
    sd = np.zeros((2, D))
    if spec.variant == "wrong_likelihood":
        for s in (0, 1):
            mu[s, 0], sd[s, 0] = _truncated_moments(negative=s == 0)
    else:
        mu[:, 0] = [0.0, 1.0]
        sd[:, 0] = spec.sigma_signal
        mu[:, 1:] = 0.5
        sd[:, 1:] = np.sqrt(0.25 + spec.sigma_noise ** 2)
    prior = spec.safe_prior
    tau = np.empty((N_ACTIONS, 2, 2))
    tau[LISTEN] = np.eye(2)
    tau[OPEN_0] = tau[OPEN_1] = prior
    R = np.array([[spec.reward(s, a) for a in range(N_ACTIONS)] for s in (0, 1)])
    return PomdpParams(prior, tau, np.broadcast_to(mu, (N_ACTIONS, 2, D)).copy(),
                       np.broadcast_to(sd, (N_ACTIONS, 2, D)).copy(), R,
                       gamma=spec.gamma, initial_action=LISTEN)


# ------------------------------------------------------------ grid oracle


def simplex_grid(K: int, resolution: int) -> np.ndarray:
    pts = [c for c in itertools.product(range(resolution + 1), repeat=K - 1) if sum(c) <= resolution]
    pts = np.array([list(c) + [resolution - sum(c)] for c in pts], dtype=float)
    return pts / resolution


def _nearest_index(beliefs, resolution, index):
    """Nearest point of the regular simplex lattice (largest-remainder rounding)."""
    x = beliefs * resolution
    base = np.floor(x)
    short = (resolution - base.sum(axis=-1)).astype(int)
    order = np.argsort(-(x - base), axis=-1)
    ranks = np.argsort(order, axis=-1)
    base = base + (ranks < short[..., None])
    keys = base[..., :-1].astype(int)
    if keys.shape[-1] == 0:
        return np.zeros(keys.shape[:-1], dtype=np.int64)
    return index[tuple(np.moveaxis(keys, -1, 0))]


@dataclass
class GridValueFunction:
    grid: np.ndarray
    values: np.ndarray
    resolution: int
    _index: np.ndarray

    def __call__(self, b) -> np.ndarray:
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return self.values[_nearest_index(b, self.resolution, self._index)]


def exact_belief_grid_solve(tau, obs_probs, reward, gamma, resolution=1000, tol=1e-6, max_iter=10_000):
    """Value iteration on a regular belief grid with nearest-point lookup.

    ``obs_probs[a, s', o]`` is ``p(o | s', a)`` over a finite observation set.
    Intended for tiny problems only (``K <= 3`` and ``A <= 3``).
    """
    tau = np.asarray(tau, float)
    obs_probs = np.asarray(obs_probs, float)
    reward = np.asarray(reward, float)
    A, K, _ = tau.shape
    if K > 3 or A > 3:
        raise ValueError("grid oracle only supports K <= 3 and A <= 3")
    grid = simplex_grid(K, resolution)
    index = np.full((resolution + 1,) * (K - 1), -1, dtype=np.int64)
    keys = np.rint(grid[:, :-1] * resolution).astype(int)
    if K > 1:
        index[tuple(keys.T)] = np.arange(len(grid))
    else:
        index[()] = 0

    imm = grid @ reward                                       # (G, A)
    pred = np.einsum("gj,ajk->agk", grid, tau)                # (A, G, K)
    joint = pred[:, :, :, None] * obs_probs[:, None, :, :]    # (A, G, K, O)
    p_o = joint.sum(axis=2)                                   # (A, G, O)
    succ = joint / np.where(p_o > 0, p_o, 1.0)[:, :, None, :]
    succ_idx = _nearest_index(np.moveaxis(succ, 2, -1), resolution, index)  # (A, G, O)

    V = np.full(len(grid), reward.min() / (1 - gamma))
    for _ in range(max_iter):
        Q = imm.T + gamma * np.sum(p_o * V[succ_idx], axis=-1)
        V_new = Q.max(axis=0)
        done = np.max(np.abs(V_new - V)) < tol
        V = V_new
        if done:
            break
    return GridValueFunction(grid, V, resolution, index)
