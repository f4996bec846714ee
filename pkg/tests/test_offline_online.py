import numpy as np
import pytest

from morl.envgen import TaskFamily, gen_dataset, identity_chain
from morl.mdp import DeterministicPolicy, TabularLowRankMDP, evaluate_policy, initial_value, occupancy_measures
from morl.offline_online import (
    LSVIConfig,
    PEVIConfig,
    feature_coverage,
    lsvi_beta,
    lsvi_ucb,
    optimism_monitor,
    pevi,
    pevi_beta,
)


@pytest.fixture(scope="module")
def target_ds(mdp0, behavior0):
    return gen_dataset(TaskFamily((mdp0,)), [behavior0[0][0]], 500, np.random.default_rng(0))


def test_beta_schedules():
    import math

    assert pevi_beta(3, 2, 500) == pytest.approx(6 * math.sqrt(math.log(3000 / 0.1)), rel=1e-14)
    assert pevi_beta(3, 2, 500, c_beta=0.5) == pytest.approx(0.5 * pevi_beta(3, 2, 500))
    assert lsvi_beta(1, 3, 2) == pytest.approx(6 * math.sqrt(math.log(6 / 0.1)) + math.sqrt(6), rel=1e-14)
    assert lsvi_beta(10, 3, 2, xi_down=0.1) > lsvi_beta(10, 3, 2)
    assert LSVIConfig(5).beta(3, 3, 2) == lsvi_beta(3, 3, 2)


def test_pevi_config_rejects_lambda():
    with pytest.raises(ValueError):
        PEVIConfig(1.0, lambda_d=0.0)


def test_pevi_empty_dataset(mdp0, behavior0):
    ds = gen_dataset(TaskFamily((mdp0,)), [behavior0[0][0]], 0, np.random.default_rng(0))
    pol, Q = pevi(ds, mdp0.phi, PEVIConfig(2.0))
    assert np.all(Q == 0.0)
    assert np.all(pol.action == 0)


def test_pevi_clip_range(mdp0, target_ds):
    for beta in (0.0, 0.5, pevi_beta(3, 2, 500)):
        _, Q = pevi(target_ds, mdp0.phi, PEVIConfig(beta))
        for h in range(3):
            assert Q[h].min() >= 0 and Q[h].max() <= 3 - h


def test_pevi_is_pessimistic_with_theory_beta(mdp0, target_ds):
    pol, Q = pevi(target_ds, mdp0.phi, PEVIConfig(pevi_beta(3, 2, 500)))
    v = initial_value(evaluate_policy(mdp0, mdp0.reward, pol), mdp0)
    assert Q[0, mdp0.s1].max() <= v + 1e-9


def test_pevi_exact_recovery():
    from morl.checks import pevi_exact_recovery

    assert abs(pevi_exact_recovery()) < 1e-6


def test_pevi_penalty_includes_misspecification(mdp0, target_ds):
    _, Q0 = pevi(target_ds, mdp0.phi, PEVIConfig(0.0))
    _, Q1 = pevi(target_ds, mdp0.phi, PEVIConfig(0.0, xi_down=0.05))
    assert np.all(Q1 <= Q0 + 1e-12)


def test_feature_coverage(mdp0, behavior0):
    occ = occupancy_measures(mdp0, behavior0[0][0])
    assert feature_coverage(mdp0.phi, occ) > 0
    collapsed = np.zeros_like(mdp0.phi)
    collapsed[..., 0] = 1.0
    assert feature_coverage(collapsed, occ) == pytest.approx(0.0, abs=1e-12)


def test_lsvi_first_episode_closed_form(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(1, lambda_d=1.0), np.random.default_rng(0), keep_q=True)
    b1 = lsvi_beta(1, 3, 2)
    norms = np.linalg.norm(mdp0.phi, axis=-1)
    for h in range(3):
        np.testing.assert_allclose(res.q_tables[0, h], np.clip(b1 * norms[h], 0, 3 - h), rtol=1e-12)


def test_lsvi_mixture_is_mean(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(40, c_beta=0.1), np.random.default_rng(1))
    assert abs(res.mixture_value - res.values.mean()) <= 1e-12
    assert res.average_regret == pytest.approx(res.optimal_value - res.mixture_value, abs=1e-12)
    for n in (0, 17, 39):
        v = initial_value(evaluate_policy(mdp0, mdp0.reward, res.policy(n)), mdp0)
        assert v == res.values[n]
    assert np.all(res.regret >= -1e-12)


def test_lsvi_single_action_env():
    chain = identity_chain(H=3, K=1)
    reward = np.full((3, 2, 1), 0.4)
    env = TabularLowRankMDP(chain.phi, chain.mu, reward)
    for c in (0.0, 1.0, 50.0):
        res = lsvi_ucb(env, env.phi, reward, LSVIConfig(5, c_beta=c), np.random.default_rng(0))
        assert res.mixture_value == pytest.approx(1.2, abs=1e-12)
        assert res.average_regret == pytest.approx(0.0, abs=1e-12)


def test_optimism_huge_beta(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(100, c_beta=1e3), np.random.default_rng(0), keep_q=True)
    assert optimism_monitor(res, mdp0, mdp0.reward) == 0


def test_optimism_detects_zero_beta(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(100, c_beta=0.0), np.random.default_rng(0), keep_q=True)
    assert optimism_monitor(res, mdp0, mdp0.reward) > 0


def test_optimism_needs_q_tables(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        optimism_monitor(res, mdp0, mdp0.reward)


def test_lsvi_clip_range(mdp0):
    res = lsvi_ucb(mdp0, mdp0.phi, mdp0.reward, LSVIConfig(30), np.random.default_rng(2), keep_q=True)
    for h in range(3):
        assert res.q_tables[:, h].min() >= 0 and res.q_tables[:, h].max() <= 3 - h
    assert isinstance(res.policy(0), DeterministicPolicy)


def test_optimism_seed_level():
    from morl.checks import lsvi_optimism_check

    res = lsvi_optimism_check(20, 500, 0.12)
    assert res.passed, res.line()
