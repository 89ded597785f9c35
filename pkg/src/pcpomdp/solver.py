"""Point-based value iteration with sampled meta-observations.

Continuous observations are handled by grouping sampled observations
according to which alpha-vector is optimal at the updated belief.  Every
argmax in the backup (meta-observation assignment, alpha projection choice,
action choice, and policy execution) has a softmax counterpart with
temperature ``temperature``; the soft backup is differentiable in the model
parameters because observations are sampled by reparameterization,
``o = mu + sigma * noise``.

Arrays are padded to a fixed capacity inside the jitted kernels so that a
growing belief set does not trigger recompilation on every expansion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple, Optional

import numpy as np

from ._jax import jax, jnp
from .model import PomdpParams, belief_update

DEDUP_TOL = 1e-9


class AlphaVector(NamedTuple):
    values: np.ndarray
    action_dist: np.ndarray


@dataclass
class ValueFunction:
    alphas: np.ndarray        # (M, K)
    action_dists: np.ndarray  # (M, A)
    beliefs: np.ndarray       # (B, K)
    temperature: float = 0.01
    soft: bool = True

    def __post_init__(self):
        self.alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        self.action_dists = np.atleast_2d(np.asarray(self.action_dists, dtype=float))
        self.beliefs = np.atleast_2d(np.asarray(self.beliefs, dtype=float))
        if len(self.alphas) < 1 or len(self.alphas) != len(self.action_dists):
            raise ValueError("need at least one alpha-vector, each with an action distribution")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_states(self) -> int:
        return self.alphas.shape[1]

    @property
    def n_actions(self) -> int:
        return self.action_dists.shape[1]

    @property
    def alpha_vectors(self):
        return [AlphaVector(a, d) for a, d in zip(self.alphas, self.action_dists)]

    def values(self, beliefs=None) -> np.ndarray:
        """Upper-envelope value ``max_alpha alpha . b`` at each belief."""
        b = self.beliefs if beliefs is None else np.atleast_2d(beliefs)
        return (b @ self.alphas.T).max(axis=1)


@dataclass
class MetaObservationTable:
    """``probs[b, a, s', m]``: probability that an observation drawn after
    action ``a`` in state ``s'`` falls in the meta-observation of alpha ``m``,
    as seen from stored belief ``b``."""

    probs: np.ndarray
    k_obs: int


# ---------------------------------------------------------------- kernels


def _select(x, mask, temperature, hard):
    """Argmax as a one-hot (lowest index wins ties) or its softmax relaxation."""
    if hard:
        idx = jnp.argmax(jnp.where(mask, x, -jnp.inf), axis=-1)
        return jax.nn.one_hot(idx, x.shape[-1], dtype=x.dtype)
    return jax.nn.softmax(jnp.where(mask, x / temperature, -jnp.inf), axis=-1)


def _meta_table(alphas, amask, beliefs, tau, mu, sigma, noise, temperature, hard):
    samples = mu[:, :, None, :] + sigma[:, :, None, :] * noise            # (A, K, S, D)
    z = (samples[:, :, :, None, :] - mu[:, None, None, :, :]) / sigma[:, None, None, :, :]
    ll = jnp.sum(-0.5 * z * z - jnp.log(sigma[:, None, None, :, :]), axis=-1)  # (A, K, S, K)
    pred = jnp.einsum("bj,ajk->bak", beliefs, tau)                         # (B, A, K)
    logpost = jnp.log(jnp.maximum(pred, 1e-300))[:, :, None, None, :] + ll[None]
    post = jax.nn.softmax(logpost, axis=-1)                                # (B, A, K, S, K)
    v = jnp.einsum("baski,mi->baskm", post, alphas)
    w = _select(v, amask, temperature, hard)
    return jnp.mean(w, axis=3)                                             # (B, A, K, M)


def _backup_from_table(P, alphas, amask, adist, beliefs, bmask, tau, reward, gamma,
                       temperature, hard, monotone):
    G = jnp.einsum("ast,batm,jt->bamjs", tau, P, alphas)                  # (B, A, M', M, K)
    score = jnp.einsum("bs,bamjs->bamj", beliefs, G)
    q = _select(score, amask, temperature, hard)
    fut = jnp.einsum("bamj,bamjs->bas", q, G)
    alpha_ab = reward.T[None] + gamma * fut                                # (B, A, K)
    val = jnp.einsum("bs,bas->ba", beliefs, alpha_ab)
    p = _select(val, jnp.ones(val.shape[-1], dtype=bool), temperature, hard)
    new_alpha = jnp.einsum("ba,bas->bs", p, alpha_ab)
    new_dist = p
    if hard and monotone:
        old = jnp.where(amask, beliefs @ alphas.T, -jnp.inf)
        best = jnp.argmax(old, axis=1)
        keep = jnp.sum(beliefs * new_alpha, axis=1) < jnp.max(old, axis=1)
        new_alpha = jnp.where(keep[:, None], alphas[best], new_alpha)
        new_dist = jnp.where(keep[:, None], adist[best], new_dist)
    new_alpha = jnp.where(bmask[:, None], new_alpha, 0.0)
    new_dist = jnp.where(bmask[:, None], new_dist, 1.0 / new_dist.shape[-1])
    return new_alpha, new_dist


def _backup(alphas, amask, adist, beliefs, bmask, tau, mu, sigma, reward, gamma, noise,
            temperature, hard, monotone=False):
    P = _meta_table(alphas, amask, beliefs, tau, mu, sigma, noise, temperature, hard)
    return _backup_from_table(P, alphas, amask, adist, beliefs, bmask, tau, reward, gamma,
                              temperature, hard, monotone)


def _policy(beliefs, alphas, amask, adist, temperature, hard):
    w = _select(beliefs @ alphas.T, amask, temperature, hard)
    return w @ adist


_meta_table_jit = jax.jit(_meta_table, static_argnames=("hard",))
_backup_table_jit = jax.jit(_backup_from_table, static_argnames=("hard", "monotone"))


# ---------------------------------------------------------------- padding


def capacity(n: int) -> int:
    c = 8
    while c < n:
        c *= 2
    return c


class Padded(NamedTuple):
    alphas: np.ndarray
    amask: np.ndarray
    adist: np.ndarray
    beliefs: np.ndarray
    bmask: np.ndarray


def pad(vf: ValueFunction, cap: Optional[int] = None) -> Padded:
    M, K = vf.alphas.shape
    B = len(vf.beliefs)
    cap = cap or capacity(max(M, B))
    if M > cap or B > cap:
        raise ValueError(f"value function exceeds capacity {cap}")
    A = vf.n_actions
    alphas = np.zeros((cap, K))
    alphas[:M] = vf.alphas
    adist = np.full((cap, A), 1.0 / A)
    adist[:M] = vf.action_dists
    beliefs = np.full((cap, K), 1.0 / K)
    beliefs[:B] = vf.beliefs
    amask = np.arange(cap) < M
    bmask = np.arange(cap) < B
    return Padded(alphas, amask, adist, beliefs, bmask)


def dedupe(alphas, dists, tol=DEDUP_TOL):
    """Drop alpha-vectors within ``tol`` (L-inf) of an earlier one."""
    keep = []
    for i in range(len(alphas)):
        if not any(np.max(np.abs(alphas[i] - alphas[j])) < tol for j in keep):
            keep.append(i)
    return alphas[keep], dists[keep]


def unpad(new_alpha, new_dist, beliefs, n_beliefs, temperature, soft):
    alphas, dists = dedupe(np.asarray(new_alpha)[:n_beliefs], np.asarray(new_dist)[:n_beliefs])
    return ValueFunction(alphas, dists, beliefs, temperature=temperature, soft=soft)


# ------------------------------------------------------------- public API


def init_belief_set(K: int) -> np.ndarray:
    """Uniform belief plus one belief per state holding 99% of the mass."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        return np.ones((1, 1))
    corners = np.full((K, K), 0.01 / (K - 1))
    np.fill_diagonal(corners, 0.99)
    return np.vstack([np.full(K, 1.0 / K), corners])


def reset_value_function(params: PomdpParams, temperature=0.01, soft=True) -> ValueFunction:
    """Fresh belief set and a single lower-bound alpha ``r_min / (1 - gamma)``."""
    K, A = params.n_states, params.n_actions
    r_min = float(params.reward.min())
    return ValueFunction(np.full((1, K), r_min / (1.0 - params.gamma)), np.full((1, A), 1.0 / A),
                         init_belief_set(K), temperature=temperature, soft=soft)


def sample_noise(params: PomdpParams, k_obs: int, rng) -> np.ndarray:
    if k_obs < 1:
        raise ValueError("k_obs must be >= 1")
    return rng.standard_normal((params.n_actions, params.n_states, k_obs, params.n_dims))


def build_meta_observation_table(vf: ValueFunction, params: PomdpParams, k_obs=100, rng=None,
                                 noise=None, soft=None) -> MetaObservationTable:
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = sample_noise(params, k_obs, rng)
    soft = vf.soft if soft is None else soft
    pv = pad(vf)
    P = _meta_table_jit(pv.alphas, pv.amask, pv.beliefs, params.tau, params.mu, params.sigma,
                        noise, vf.temperature, hard=not soft)
    B, M = len(vf.beliefs), len(vf.alphas)
    return MetaObservationTable(np.asarray(P)[:B, :, :, :M], noise.shape[2])


def _run_backup(vf, params, table, hard, monotone, k_obs=100, rng=None, noise=None):
    if table is None:
        table = build_meta_observation_table(vf, params, k_obs=k_obs, rng=rng, noise=noise, soft=not hard)
    pv = pad(vf)
    B, M = len(vf.beliefs), len(vf.alphas)
    cap = len(pv.alphas)
    P = np.zeros((cap,) + table.probs.shape[1:3] + (cap,))
    P[:B, :, :, :M] = table.probs
    new_alpha, new_dist = _backup_table_jit(P, pv.alphas, pv.amask, pv.adist, pv.beliefs, pv.bmask,
                                            params.tau, params.reward, params.gamma, vf.temperature,
                                            hard=hard, monotone=monotone)
    return unpad(new_alpha, new_dist, vf.beliefs, B, vf.temperature, soft=not hard)


def pbvi_backup_hard(vf: ValueFunction, params: PomdpParams, table: Optional[MetaObservationTable] = None,
                     monotone=True, **table_kw) -> ValueFunction:
    """One deterministic point-based backup at every stored belief.

    With ``monotone`` (the default) a belief whose backed-up value would drop
    keeps its previous maximizing alpha-vector.
    """
    return _run_backup(vf, params, table, hard=True, monotone=monotone, **table_kw)


def pbvi_backup_soft(vf: ValueFunction, params: PomdpParams, table: Optional[MetaObservationTable] = None,
                     **table_kw) -> ValueFunction:
    return _run_backup(vf, params, table, hard=False, monotone=False, **table_kw)


def policy_action_dist(vf: ValueFunction, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    scores = np.atleast_2d(b) @ vf.alphas.T
    if vf.soft:
        x = scores / vf.temperature
        w = np.exp(x - x.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        out = w @ vf.action_dists
    else:
        out = vf.action_dists[np.argmax(scores, axis=1)]
    return out.reshape(b.shape[:-1] + (vf.n_actions,))


def expand_belief_set(beliefs, params: PomdpParams, rng, epsilon=0.1, n_candidates=5,
                      max_beliefs=None) -> np.ndarray:
    """Add sampled successor beliefs farther than ``epsilon`` (L2) from the set.

    Candidates ``b^{a,o}`` are drawn for every stored belief and action and
    admitted greedily, farthest first.
    """
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    if not np.isfinite(epsilon):
        return beliefs.copy()
    cands = []
    for b in beliefs:
        for a in range(params.n_actions):
            pred = b @ params.tau[a]
            pred = pred / pred.sum()
            for s in rng.choice(params.n_states, size=n_candidates, p=pred):
                o = rng.normal(params.mu[a, s], params.sigma[a, s])
                cands.append(belief_update(b, a, o, params))
    cands = np.array(cands)
    out = list(beliefs)
    limit = np.inf if max_beliefs is None else max_beliefs
    while len(out) < limit and len(cands):
        d = np.min(np.linalg.norm(cands[:, None, :] - np.array(out)[None], axis=-1), axis=1)
        i = int(np.argmax(d))
        if d[i] <= epsilon:
            break
        out.append(cands[i])
        cands = np.delete(cands, i, axis=0)
    return np.array(out)


def solve_hard(params: PomdpParams, k_obs=100, seed=0, max_backups=200, tol=1e-6, n_expansions=4,
               epsilon=0.1, max_beliefs=64, temperature=0.01, beliefs=None) -> ValueFunction:
    """Hard-mode PBVI iterated to convergence with interleaved expansions."""
    rng = np.random.default_rng(seed)
    noise = sample_noise(params, k_obs, rng)
    vf = reset_value_function(params, temperature=temperature, soft=False)
    if beliefs is not None:
        vf.beliefs = np.atleast_2d(beliefs)
    for round_ in range(n_expansions + 1):
        for _ in range(max_backups):
            new = pbvi_backup_hard(vf, params, noise=noise)
            delta = np.max(np.abs(new.values() - vf.values()))
            vf = new
            if delta < tol:
                break
        if round_ == n_expansions:
            break
        grown = expand_belief_set(vf.beliefs, params, rng, epsilon=epsilon, max_beliefs=max_beliefs)
        if len(grown) == len(vf.beliefs):
            break
        vf = ValueFunction(vf.alphas, vf.action_dists, grown, temperature, soft=False)
    return vf
