import numpy as np
import pytest

from pcpomdp import envs, model


def test_spec_defaults_and_validation():
    assert envs.TigerSpec("wrong_likelihood").n_dims == 1
    assert envs.TigerSpec("missing_data").missing_frac == 0.8
    assert envs.TigerSpec("missing_data").sigma_noise == 0.3
    assert envs.TigerSpec().sigma_noise == 0.1
    with pytest.raises(ValueError):
        envs.TigerSpec("bogus")
    with pytest.raises(ValueError):
        envs.TigerSpec("missing_data", missing_frac=1.0)
    with pytest.raises(ValueError):
        envs.TigerSpec("wrong_likelihood", n_dims=2)
    with pytest.raises(ValueError):
        envs.TigerSpec("irrelevant_noise", n_dims=17)
    with pytest.raises(ValueError):
        envs.TigerSpec("irrelevant_noise", missing_frac=0.5)


def test_signal_mean_given_safe_door():
    spec = envs.TigerSpec("irrelevant_noise")
    data, safe = envs.generate_tiger_dataset(spec, 10_000, seed=0, return_states=True)
    o = np.concatenate([tr.observations[:, 0] for tr, s in zip(data, safe) if s == 1])
    assert abs(o.mean() - 1.0) < 0.01


def test_missing_fraction():
    spec = envs.TigerSpec("missing_data", missing_frac=0.8)
    data = envs.generate_tiger_dataset(spec, 2000, seed=1)
    sig = np.concatenate([tr.observations[:, 0] for tr in data])
    assert abs(np.isnan(sig).mean() - 0.8) < 0.02
    assert not np.isnan(np.concatenate([tr.observations[:, 1] for tr in data])).any()


def test_wrong_likelihood_signs():
    spec = envs.TigerSpec("wrong_likelihood")
    data, safe = envs.generate_tiger_dataset(spec, 500, seed=2, return_states=True)
    for tr, s in zip(data, safe):
        assert np.all(tr.observations < 0) if s == 0 else np.all(tr.observations > 0)
    # the prior on the safe door makes the marginal the untruncated mixture
    o = np.concatenate([tr.observations[:1, 0] for tr in data])
    assert abs((o < 0).mean() - envs.gmm_negative_mass()) < 0.05


@pytest.mark.parametrize("variant", envs.VARIANTS)
def test_episode_structure(variant):
    spec = envs.TigerSpec(variant)
    data = envs.generate_tiger_dataset(spec, 300, seed=3)
    for tr in data:
        a = tr.actions
        assert np.all(a[:-1] == envs.LISTEN) and a[-1] != envs.LISTEN
        assert spec.listen_steps + 1 <= len(a) <= spec.max_len
        assert tr.observations.shape == (len(a), spec.n_dims)
        assert set(np.round(tr.rewards, 12)) <= {-5.0, 1.0, -0.1}
        np.testing.assert_array_equal(tr.rewards[:-1], -0.1)


def test_behavior_probs_are_exact_and_generation_deterministic():
    spec = envs.TigerSpec()
    a = envs.generate_tiger_dataset(spec, 50, seed=7)
    b = envs.generate_tiger_dataset(spec, 50, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.observations, y.observations)
        np.testing.assert_array_equal(x.actions, y.actions)
        for t, row in enumerate(x.behavior_probs):
            assert np.array_equal(row, envs.behavior_probs(t, spec))
    c = envs.generate_tiger_dataset(spec, 50, seed=8)
    assert any(not np.array_equal(x.observations, y.observations) for x, y in zip(a, c))


def test_always_listen_value():
    v, se = envs.rollout_evaluate(envs.always_listen, envs.TigerSpec(), n_rollouts=20, max_steps=400)
    assert abs(v - (-1.0)) < 1e-12
    assert se == 0.0


def test_open_random_value():
    v, se = envs.rollout_evaluate(envs.open_random_door, envs.TigerSpec(), n_rollouts=4000, seed=1)
    assert abs(v - (-2.0)) < 3 * se


def test_standard_error_scaling():
    # the always-listen return is deterministic (zero spread), so the scaling
    # is checked on the random-door policy
    _, se1 = envs.rollout_evaluate(envs.open_random_door, envs.TigerSpec(), n_rollouts=200, seed=4)
    _, se2 = envs.rollout_evaluate(envs.open_random_door, envs.TigerSpec(), n_rollouts=2000, seed=5)
    ratio = se1 / se2
    assert np.sqrt(10) / 1.5 < ratio < np.sqrt(10) * 1.5


def test_manual_solution_irrelevant_noise():
    p = envs.manual_tiger_solution(envs.TigerSpec())
    np.testing.assert_allclose(p.mu[:, :, 0], [[0.0, 1.0]] * 3)
    np.testing.assert_allclose(p.reward, [[-0.1, 1.0, -5.0], [-0.1, -5.0, 1.0]])


def test_manual_solution_wrong_likelihood_moments_and_loglik():
    spec = envs.TigerSpec("wrong_likelihood")
    p = envs.manual_tiger_solution(spec)
    data, safe = envs.generate_tiger_dataset(spec, 8000, seed=11, return_states=True)
    for s in (0, 1):
        o = np.concatenate([tr.observations[:, 0] for tr, k in zip(data, safe) if k == s])
        assert abs(o.mean() - p.mu[0, s, 0]) < 0.03
        assert abs(o.std() - p.sigma[0, s, 0]) < 0.03
    ll = model.log_marginal_likelihood(data, p) / model.n_observed(data)
    assert abs(ll - (-0.95)) < 0.05


def test_model_policy_incremental_matches_batch_filter():
    spec = envs.TigerSpec("missing_data")
    p = envs.manual_tiger_solution(spec)
    tr = envs.generate_tiger_dataset(spec, 1, seed=0)[0]
    from pcpomdp import solver
    pol = envs.ModelPolicy(p, solver.reset_value_function(p))
    full = model.filter_beliefs(tr, p)
    for t in range(tr.n_steps):
        b = pol.belief(list(tr.actions[:t]), list(tr.observations[: t + 1]))
        np.testing.assert_allclose(b, full[t], atol=1e-10)
