import numpy as np
import pytest

from morl.envgen import (
    TaskFamily,
    certify,
    gen_behavior_policies,
    gen_behavior_policy,
    gen_dataset,
    gen_model_class,
    gen_target_task,
    gen_task_family,
    identity_chain,
    max_tv,
    measure_c_r,
    random_linear_reward,
)
from morl.mdp import StochasticPolicy, check_invariants, check_mu, check_phi, occupancy_measures


def test_corner_family_is_identity_chain():
    fam = gen_task_family(2, 1, 1, 2, 1, np.random.default_rng(0), corners=True)
    chain = identity_chain()
    assert np.array_equal(fam[0].kernel, chain.kernel)
    assert np.array_equal(fam[0].phi, chain.phi)


def test_seed0_family_passes_battery(family0):
    assert family0.T == 4
    for task in family0.tasks:
        assert check_invariants(task) == []


def test_family_shares_phi(family0):
    for task in family0.tasks:
        assert task.phi is family0.shared_phi or np.array_equal(task.phi, family0.shared_phi)
    assert family0.rewards.shape == (4, 3, 5, 2)


def test_family_rejects_distinct_phi(family0):
    other = gen_task_family(5, 2, 3, 2, 1, np.random.default_rng(99))[0]
    with pytest.raises(ValueError):
        TaskFamily((family0[0], other))


@pytest.mark.parametrize("args", [(0, 2, 3, 2, 1), (5, 2, 3, 6, 1), (2, 1, 1, 3, 1)])
def test_family_invalid_sizes(args):
    with pytest.raises(ValueError):
        gen_task_family(*args, np.random.default_rng(0))


def test_generation_is_reproducible():
    a = gen_task_family(5, 2, 3, 2, 4, np.random.default_rng(0))
    b = gen_task_family(5, 2, 3, 2, 4, np.random.default_rng(0))
    for x, y in zip(a.tasks, b.tasks):
        assert x.phi.tobytes() == y.phi.tobytes() and x.mu.tobytes() == y.mu.tobytes()
        assert x.reward.tobytes() == y.reward.tobytes()


def test_family_prefix_property():
    big = gen_task_family(5, 2, 3, 2, 8, np.random.default_rng(0))
    small = gen_task_family(5, 2, 3, 2, 4, np.random.default_rng(0))
    for x, y in zip(big.subset(4).tasks, small.tasks):
        assert np.array_equal(x.mu, y.mu)


# -- behavior policies


def test_full_mixing_is_uniform(mdp0):
    pol, cert = gen_behavior_policy(mdp0, 0.5, np.random.default_rng(0))
    assert np.all(pol.prob == 0.5)
    assert cert.omega == 2.0


def test_omega_respects_floor(family0):
    _, cert = gen_behavior_policies(family0, 0.25, np.random.default_rng(1))
    assert cert.omega <= 4.0 + 1e-9


def test_omega_matches_independent_scan(family0):
    pols, cert = gen_behavior_policies(family0, 0.1, np.random.default_rng(5))
    scan = max(1.0 / p.prob[h, s, a] for p in pols for h in range(3) for s in range(5) for a in range(2))
    assert cert.omega == scan


def test_kappa_recomputed_from_occupancy(mdp0):
    pol, cert = gen_behavior_policy(mdp0, 0.25, np.random.default_rng(0))
    occ = occupancy_measures(mdp0, pol).sum(axis=2)
    assert cert.kappa == occ[1:].min()
    assert cert.reachable


def test_chain_reports_unreachable_state():
    chain = identity_chain(H=3, K=2)
    pol, cert = gen_behavior_policy(chain, 0.5, np.random.default_rng(0))
    assert cert.kappa == 0.0 and not cert.reachable
    assert np.all(cert.state_occupancy[:, 1] == 0.0)


def test_single_step_kappa_uses_first_step(chain):
    cert = certify(chain, StochasticPolicy(np.ones((1, 2, 1))))
    assert cert.kappa == 0.0


def test_min_action_prob_too_large(mdp0):
    with pytest.raises(ValueError):
        gen_behavior_policy(mdp0, 0.6, np.random.default_rng(0))


# -- model classes


def test_no_decoys_is_truth_only(family0):
    cls = gen_model_class(family0, 0, 0, 0.2, np.random.default_rng(0))
    assert cls.size_phi == 1 and cls.size_psi == 4
    assert cls.phis[0] is not None and np.array_equal(cls.phis[0], family0.shared_phi)
    for psi, task in zip(cls.psis, family0.tasks):
        assert np.array_equal(psi, task.mu)


def test_class_sizes_and_battery(class0, family0):
    assert class0.size_phi == 8 and class0.size_psi == 12
    for phi in class0.phis:
        assert check_phi(phi) == []
    for psi in class0.psis:
        assert check_mu(psi) == []
    assert class0.check() == []


def test_decoys_are_distinguishable(class0, family0):
    truth = family0[0]
    for phi in class0.phis[1:]:
        decoy = np.einsum("hskd,htd->hskt", phi, truth.mu)
        assert max_tv(decoy, truth.kernel) > 0


def test_nonpositive_perturbation(family0):
    with pytest.raises(ValueError):
        gen_model_class(family0, 1, 1, 0.0, np.random.default_rng(0))


# -- target tasks


def test_target_copy_of_first_task(family0):
    tgt, spec = gen_target_task(family0, [1, 0, 0, 0], 0.0, np.random.default_rng(0))
    assert np.array_equal(tgt.kernel, family0[0].kernel)
    assert spec.xi == 0.0


def test_convex_target_is_valid(family0):
    c = np.random.default_rng(1).dirichlet(np.ones(4))
    tgt, spec = gen_target_task(family0, c, 0.0, np.random.default_rng(0))
    assert check_invariants(tgt) == []
    assert spec.xi <= 1e-12


def test_perturbed_target_xi(family0):
    c = np.random.default_rng(1).dirichlet(np.ones(4))
    tgt, spec = gen_target_task(family0, c, 0.05, np.random.default_rng(0))
    combo = np.einsum("t,thska->hska", c, np.stack([t.kernel for t in family0.tasks]))
    worst = max(0.5 * np.abs(tgt.kernel[h, s, a] - combo[h, s, a]).sum()
                for h in range(3) for s in range(5) for a in range(2))
    assert abs(worst - spec.xi) < 1e-12
    assert 0 < spec.xi <= 0.05
    assert np.array_equal(tgt.phi, family0.shared_phi)


def test_target_reward_is_linear_in_features(family0):
    tgt, _ = gen_target_task(family0, [0.5, 0.5, 0, 0], 0.0, np.random.default_rng(3))
    assert tgt.reward.min() >= 0 and tgt.reward.max() <= 1
    for h in range(3):
        X = family0.shared_phi[h].reshape(-1, 2)
        theta, *_ = np.linalg.lstsq(X, tgt.reward[h].ravel(), rcond=None)
        assert np.linalg.norm(theta) <= 1 + 1e-9
        np.testing.assert_allclose(X @ theta, tgt.reward[h].ravel(), atol=1e-12)


@pytest.mark.parametrize("coeffs", [[0.5, 0.2, 0, 0], [1.5, -0.5, 0, 0], [1, 0, 0]])
def test_bad_coefficients(family0, coeffs):
    with pytest.raises(ValueError):
        gen_target_task(family0, coeffs, 0.0, np.random.default_rng(0))


def test_random_linear_reward_bounds(family0):
    r = random_linear_reward(family0.shared_phi, np.random.default_rng(0))
    assert r.shape == (3, 5, 2) and r.min() >= 0 and r.max() <= 1


# -- datasets


def test_empty_dataset(family0, behavior0):
    ds = gen_dataset(family0, behavior0[0], 0, np.random.default_rng(0))
    assert (ds.T, ds.n, ds.H) == (4, 0, 3)
    assert ds.transition_counts(0).sum() == 0


def test_chain_dataset_is_self_loops():
    chain = identity_chain(H=3, K=2)
    fam = TaskFamily((chain,))
    pol = StochasticPolicy(np.full((3, 2, 2), 0.5))
    ds = gen_dataset(fam, [pol], 50, np.random.default_rng(0))
    for h in range(3):
        assert all(s == sp for s, _, _, sp in ds.tuples(0, h))


def test_dataset_frequencies_match_kernel(family0, behavior0):
    pols, _ = behavior0
    ds = gen_dataset(family0, pols, 10_000, np.random.default_rng(0))
    for h in range(3):
        counts = ds.transition_counts(h)
        for t in range(4):
            for s in range(5):
                for a in range(2):
                    m = counts[t, s, a].sum()
                    if m < 30:
                        continue
                    p = family0[t].kernel[h, s, a]
                    sigma = np.sqrt(p * (1 - p) / m)
                    assert np.all(np.abs(counts[t, s, a] / m - p) <= 3 * sigma + 1.0 / m)


def test_dataset_task_prefix_is_stable(family0, behavior0):
    pols, _ = behavior0
    full = gen_dataset(family0, pols, 100, np.random.default_rng(7))
    part = gen_dataset(family0.subset(2), pols[:2], 100, np.random.default_rng(7))
    assert np.array_equal(full.states[:2], part.states)


def test_dataset_needs_one_policy_per_task(family0, behavior0):
    with pytest.raises(ValueError):
        gen_dataset(family0, behavior0[0][:2], 10, np.random.default_rng(0))


def test_c_r_is_at_least_one(class0):
    assert measure_c_r(class0, np.random.default_rng(0)) >= 1.0
