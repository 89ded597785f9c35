import numpy as np
import pytest

from pcpomdp import envs, objective as O
from pcpomdp.model import PomdpParams, UnconstrainedParams, log_marginal_likelihood, n_observed
from pcpomdp.ope import cwpdis_value


@pytest.fixture(scope="module")
def tiger():
    spec = envs.TigerSpec("irrelevant_noise")
    data = envs.generate_tiger_dataset(spec, 60, seed=5)
    rng = np.random.default_rng(0)
    p = O.initial_params(data, 2, 3, rng)
    prob = O.prepare(data, 3)
    p = p.replace(reward=O._refresh_rewards(prob, p))
    return data, prob, p


def state_for(p, cfg, seed=0):
    rng = np.random.default_rng(seed)
    return O._settle(O._as_unconstrained(p), None, cfg, O._fresh_state(p, cfg, rng), 0)


def flat(u):
    return np.concatenate([np.ravel(x) for x in u])


def unflat(v, like):
    out, i = [], 0
    for x in like:
        n = np.size(x)
        out.append(v[i:i + n].reshape(np.shape(x)))
        i += n
    return UnconstrainedParams(*out)


def finite_difference_check(prob, p, cfg, n_coords=50, h=1e-5, seed=0):
    state = state_for(p, cfg)
    u = O._as_unconstrained(p)
    u = UnconstrainedParams(*(np.asarray(x) for x in u))
    g = flat(O.gradient(u, prob, cfg, state))
    v0 = flat(u)
    n_reward = np.size(u.reward)
    # reward entries never receive gradient, so only the other coordinates are probed
    candidates = np.arange(len(v0) - n_reward)
    coords = np.random.default_rng(seed).choice(candidates, size=min(n_coords, len(candidates)), replace=False)
    worst = 0.0
    for i in coords:
        e = np.zeros_like(v0)
        e[i] = h
        fp = O.evaluate_objective(unflat(v0 + e, u), prob, cfg, state).total
        fm = O.evaluate_objective(unflat(v0 - e, u), prob, cfg, state).total
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-2))
    return worst


@pytest.mark.parametrize("mode", O.MODES)
def test_gradient_matches_finite_differences(tiger, mode):
    _, prob, p = tiger
    cfg = O.ObjectiveConfig(mode=mode, lam=1.0, lam_ess=0.1)
    assert finite_difference_check(prob, p, cfg, n_coords=20) < 1e-4


def test_reward_gradient_is_zero_in_every_mode(tiger):
    _, prob, p = tiger
    for mode in O.MODES:
        cfg = O.ObjectiveConfig(mode=mode)
        g = O.gradient(p, prob, cfg, state_for(p, cfg))
        assert np.all(g.reward == 0.0)


def test_lambda_zero_total_is_loglik_exactly(tiger):
    data, prob, p = tiger
    cfg = O.ObjectiveConfig(lam=0.0)
    val = O.evaluate_objective(p, prob, cfg, state_for(p, cfg))
    assert val.total == val.loglik_rescaled
    ll = log_marginal_likelihood(data, p) / n_observed(data)
    assert abs(val.loglik_rescaled - ll) < 1e-9


def test_total_recomposes_from_components(tiger):
    _, prob, p = tiger
    cfg = O.ObjectiveConfig(lam=0.7, lam_ess=0.3)
    val = O.evaluate_objective(p, prob, cfg, state_for(p, cfg))
    expected = val.loglik_rescaled + 0.7 * (val.policy_value - 0.3 / np.sqrt(val.ess_total))
    assert abs(val.total - expected) < 1e-12
    vo = O.evaluate_objective(p, prob, O.ObjectiveConfig(mode="value_only", lam_ess=0.3), state_for(p, cfg))
    assert abs(vo.total - (vo.policy_value - 0.3 / np.sqrt(vo.ess_total))) < 1e-12


def test_value_term_matches_standalone_estimator(tiger):
    data, prob, p = tiger
    cfg = O.ObjectiveConfig(backups_per_step=0)
    state = state_for(p, cfg)
    val = O.evaluate_objective(p, prob, cfg, state)
    vf = state.value_function(cfg.temperature)
    rep = cwpdis_value(data, O.policy_probs(data, p, vf), cfg.gamma)
    assert abs(val.policy_value - rep.value) < 1e-9
    assert abs(val.ess_total - rep.ess_total) < 1e-6


def test_evaluate_is_deterministic(tiger):
    _, prob, p = tiger
    cfg = O.ObjectiveConfig()
    a = O.evaluate_objective(p, prob, cfg, state_for(p, cfg, seed=3))
    b = O.evaluate_objective(p, prob, cfg, state_for(p, cfg, seed=3))
    assert a == b


def test_k1_mean_gradient_is_closed_form():
    rng = np.random.default_rng(2)
    T, D = 4, 2
    from pcpomdp.model import Trajectory
    data = [Trajectory(np.zeros(T, int), rng.normal(size=(T, D)), np.zeros(T), np.ones((T, 1)))
            for _ in range(5)]
    mu = np.array([[[0.3, -0.2]]])
    sigma = np.array([[[0.8, 1.3]]])
    p = PomdpParams(np.ones(1), np.ones((1, 1, 1)), mu, sigma, np.zeros((1, 1)))
    cfg = O.ObjectiveConfig(lam=0.0, n_states=1)
    g = O.gradient(p, data, cfg, state_for(p, cfg))
    X = np.concatenate([tr.observations for tr in data])
    expected = ((X - mu[0, 0]) / sigma[0, 0] ** 2).sum(axis=0) / X.size
    np.testing.assert_allclose(g.mu_raw[0, 0], expected, rtol=1e-10)


def test_rprop_zero_gradient_is_noop():
    p = (np.array([1.0, -2.0]),)
    st = O.rprop_init(p)
    q, st2 = O.rprop_step(p, (np.zeros(2),), st)
    np.testing.assert_array_equal(q[0], p[0])
    np.testing.assert_array_equal(st2.steps[0], st.steps[0])


def test_rprop_constant_sign_step_growth():
    p, st = (np.zeros(1),), None
    for _ in range(3):
        prev = p[0].copy()
        p, st = O.rprop_step(p, (np.ones(1),), st)
    assert abs((p[0] - prev)[0] - 0.01 * 1.2 ** 2) < 1e-15


def test_rprop_sign_flip_halves_step_and_skips_update():
    p, st = (np.zeros(1),), None
    p, st = O.rprop_step(p, (np.ones(1),), st)
    p, st = O.rprop_step(p, (np.ones(1),), st)
    before = p[0].copy()
    p, st = O.rprop_step(p, (-np.ones(1),), st)
    np.testing.assert_array_equal(p[0], before)
    assert abs(st.steps[0][0] - 0.012 * 0.5) < 1e-15
    assert st.prev_grad[0][0] == 0.0


def test_rprop_step_bounds():
    p, st = (np.zeros(1),), None
    for _ in range(100):
        p, st = O.rprop_step(p, (np.ones(1),), st)
    assert st.steps[0][0] == 1.0
    for k in range(200):
        p, st = O.rprop_step(p, ((-1.0) ** k * np.ones(1),), st)
    assert st.steps[0][0] >= 1e-6


def test_rprop_quadratic_bowl():
    target = np.array([0.7, -1.3])
    p, st = (np.zeros(2),), None
    for _ in range(200):
        p, st = O.rprop_step(p, (-2 * (p[0] - target) * np.array([1.0, 3.0]),), st)
    np.testing.assert_allclose(p[0], target, atol=1e-4)


def test_train_max_iters_zero_returns_initialization(tiger):
    data, prob, _ = tiger
    cfg = O.ObjectiveConfig(restarts=1, max_iters=0, seed=4)
    res = O.train(data, cfg, 3)
    assert len(res.trace) == 1
    rng = np.random.default_rng(np.random.SeedSequence(4).spawn(1)[0])
    init = O.initial_params(data, 2, 3, rng)
    np.testing.assert_allclose(res.params.mu, init.mu, atol=1e-12)
    assert res.objective.total == res.trace[0]["total"]


def test_lambda_zero_trace_total_equals_loglik(tiger):
    data, _, _ = tiger
    res = O.train(data, O.ObjectiveConfig(lam=0.0, restarts=1, max_iters=5), 3)
    assert all(row["total"] == row["loglik_rescaled"] for row in res.trace)


def test_restart_selection_is_argmax(tiger):
    data, _, _ = tiger
    res = O.train(data, O.ObjectiveConfig(restarts=3, max_iters=3), 3)
    assert res.best_restart == int(np.argmax(res.restart_totals))
    assert res.objective.total == max(res.restart_totals)


def test_two_stage_deterministic_and_monotone(tiger):
    data, _, _ = tiger
    cfg = O.ObjectiveConfig(mode="two_stage", restarts=2, em_iters=15)
    a = O.train(data, cfg, 3)
    b = O.train(data, cfg, 3)
    np.testing.assert_array_equal(a.params.mu, b.params.mu)
    assert a.objective == b.objective
    for r in range(2):
        ll = [row["loglik_rescaled"] for row in a.trace if row["restart"] == r]
        assert np.all(np.diff(ll) >= -1e-8)


def test_two_stage_likelihood_beats_value_only(tiger):
    data, _, _ = tiger
    ts = O.train(data, O.ObjectiveConfig(mode="two_stage", restarts=2, em_iters=50), 3)
    vo = O.train(data, O.ObjectiveConfig(mode="value_only", restarts=2, max_iters=30), 3)
    ll = lambda p: log_marginal_likelihood(data, p)
    assert ll(ts.params) >= ll(vo.params)


def test_two_stage_irrelevant_noise_aligns_with_low_noise_dim():
    spec = envs.TigerSpec("irrelevant_noise")
    data = envs.generate_tiger_dataset(spec, 300, seed=9)
    res = O.train(data, O.ObjectiveConfig(mode="two_stage", restarts=3, em_iters=100), 3)
    mu = np.sort(res.params.mu[0, :, 1])
    np.testing.assert_allclose(mu, [0.0, 1.0], atol=0.05)
    np.testing.assert_allclose(res.params.sigma[0, :, 1], 0.1, atol=0.03)


def test_config_validation():
    with pytest.raises(ValueError):
        O.ObjectiveConfig(mode="bogus")
    with pytest.raises(ValueError):
        O.ObjectiveConfig(lam=-1.0)
    with pytest.raises(ValueError):
        O.ObjectiveConfig(delta=1.0)
