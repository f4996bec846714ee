import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morl.envgen import TaskFamily, gen_dataset, gen_model_class, identity_chain
from morl.mdp import StochasticPolicy, TabularLowRankMDP
from morl.model_class import (
    IncompatibleClassError,
    ModelClass,
    OfflineDataset,
    fit_all_steps,
    joint_log_likelihood,
    mle_fit,
)

from .oracles import brute_force_mle, loop_loglik


@pytest.fixture(scope="module")
def ds2000(family0, behavior0):
    return gen_dataset(family0, behavior0[0], 2000, np.random.default_rng(3))


def test_frozen_true_loglik(family0, ds2000):
    # frozen from the loop oracle
    ll = joint_log_likelihood(family0.shared_phi, [t.mu for t in family0.tasks], ds2000, 1)
    assert ll == pytest.approx(-11219.386799061747, rel=1e-12)


@pytest.mark.parametrize("h", [0, 1, 2])
def test_loglik_matches_loop_oracle(class0, ds2000, h):
    phi = class0.phis[3]
    mus = [class0.psis[j] for j in (0, 5, 9, 11)]
    assert joint_log_likelihood(phi, mus, ds2000, h) == pytest.approx(loop_loglik(phi, mus, ds2000, h), rel=1e-10)


@pytest.mark.parametrize("T", [1, 2, 3])
def test_mle_equals_brute_force(family0, behavior0, T):
    fam = family0.subset(T)
    cls = gen_model_class(fam, 7, 8, 0.2, np.random.default_rng(2), scale_decay=0.5)
    assert cls.size_phi * cls.size_psi ** T <= 100_000
    ds = gen_dataset(fam, behavior0[0][:T], 300, np.random.default_rng(4))
    for h in range(3):
        sel = mle_fit(cls, ds, h)
        ll, (i, js) = brute_force_mle(cls, ds, h)
        assert (sel.phi_index, sel.mu_index) == (i, js)
        assert sel.loglik == ll


def test_mle_dominates_truth(class0, family0, ds2000):
    for h in range(3):
        sel = mle_fit(class0, ds2000, h)
        truth = joint_log_likelihood(family0.shared_phi, [t.mu for t in family0.tasks], ds2000, h)
        assert sel.loglik >= truth
        chosen = joint_log_likelihood(class0.phis[sel.phi_index], [class0.psis[j] for j in sel.mu_index], ds2000, h)
        assert chosen == sel.loglik


def test_chain_recovers_truth():
    chain = identity_chain(H=1, K=1)
    swap = TabularLowRankMDP(chain.phi, chain.mu[:, ::-1], chain.reward)
    cls = ModelClass((chain.phi,), (swap.mu, chain.mu))
    ds = gen_dataset(TaskFamily((chain,)), [StochasticPolicy(np.ones((1, 2, 1)))], 20, np.random.default_rng(0))
    sel = mle_fit(cls, ds, 0)
    assert sel.mu_index == (1,) and sel.loglik == 0.0


def test_incompatible_class_raises():
    chain = identity_chain(H=1, K=1)
    swap = chain.mu[:, ::-1]
    cls = ModelClass((chain.phi,), (swap,))
    ds = gen_dataset(TaskFamily((chain,)), [StochasticPolicy(np.ones((1, 2, 1)))], 5, np.random.default_rng(0))
    with pytest.raises(IncompatibleClassError):
        mle_fit(cls, ds, 0)


def test_uniform_loglik(uniform4):
    ds = gen_dataset(TaskFamily((uniform4,)), [StochasticPolicy(np.ones((1, 4, 1)))], 7, np.random.default_rng(0))
    ll = joint_log_likelihood(uniform4.phi, [uniform4.mu], ds, 0)
    assert ll == pytest.approx(7 * math.log(0.25), rel=1e-14)


def test_empty_dataset_loglik_zero(class0):
    ds = OfflineDataset(np.zeros((4, 0, 4), int), np.zeros((4, 0, 3), int), np.zeros((4, 0, 3)), 5, 2)
    assert joint_log_likelihood(class0.phis[0], class0.psis[:4], ds, 0) == 0.0
    assert mle_fit(class0, ds, 0).phi_index == 0


def test_tie_goes_to_lowest_index(class0, ds2000):
    dup = ModelClass(class0.phis + class0.phis, class0.psis + class0.psis)
    a, b = mle_fit(class0, ds2000, 1), mle_fit(dup, ds2000, 1)
    assert (a.phi_index, a.mu_index, a.loglik) == (b.phi_index, b.mu_index, b.loglik)


def test_reconstructed_kernels(class0, ds2000):
    learned = fit_all_steps(class0, ds2000)
    assert learned.p_hat.shape == (4, 3, 5, 2, 5)
    np.testing.assert_allclose(learned.p_hat.sum(-1), 1.0, atol=1e-12)
    for h in range(3):
        assert np.array_equal(learned.phi_hat[h], class0.phis[learned.phi_index[h]][h])


def test_wrong_number_of_embeddings(class0, ds2000):
    with pytest.raises(ValueError):
        joint_log_likelihood(class0.phis[0], class0.psis[:2], ds2000, 0)


def test_feature_consistency_with_flat_decoys(family0, behavior0):
    """With equally perturbed decoys the fraction of seeds selecting the true
    features grows with n and reaches one."""
    cls = gen_model_class(family0, 7, 8, 0.2, np.random.default_rng(2), scale_decay=1.0)
    fractions = []
    for n in (100, 1000, 10_000):
        hits = 0
        for seed in range(20):
            ds = gen_dataset(family0, behavior0[0], n, np.random.default_rng([seed, n]))
            hits += mle_fit(cls, ds, 1).phi_index == 0
        fractions.append(hits / 20)
    assert fractions == sorted(fractions)
    assert fractions[-1] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_mle_never_below_any_candidate(seed, n):
    from morl.envgen import gen_behavior_policies, gen_task_family

    rng = np.random.default_rng(seed)
    fam = gen_task_family(3, 2, 2, 2, 2, rng)
    pols, _ = gen_behavior_policies(fam, 0.25, rng)
    cls = gen_model_class(fam, 2, 2, 0.3, rng)
    ds = gen_dataset(fam, pols, n, rng)
    sel = mle_fit(cls, ds, 1)
    for phi in cls.phis:
        for j0 in range(cls.size_psi):
            for j1 in range(cls.size_psi):
                assert sel.loglik >= joint_log_likelihood(phi, [cls.psis[j0], cls.psis[j1]], ds, 1)
