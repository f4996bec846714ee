"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records one ``[PASS]``/``[FAIL]`` line that is echoed in the
terminal summary, then asserts the criterion.
"""

import numpy as np
import pytest

from morl import checks
from morl.envgen import gen_behavior_policies, gen_dataset, gen_model_class, gen_task_family
from morl.model_class import joint_log_likelihood, mle_fit

from .oracles import brute_force_mle

RESULTS: list[str] = []


def _record(result: checks.CheckResult) -> None:
    RESULTS.append(result.line())
    assert result.passed, result.line()


def test_exact_identities():
    parts = [checks.check_simulation_lemma(100, 1e-8), checks.check_occupancy_duality(100, 1e-9),
             checks.check_lsvi_mixture(tol=1e-12), checks.check_elliptical_potential(1000)]
    bad = [p.name for p in parts if not p.passed]
    _record(checks.CheckResult("exact identities", not bad, sum(p.failures for p in parts),
                               sum(p.total for p in parts), "; ".join(f"{p.name} {p.total - p.failures}/{p.total}"
                                                                      for p in parts)))


def _mle_instances():
    rng = np.random.default_rng(2024)
    for k in range(12):
        S, T = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        fam = gen_task_family(S, 2, 2, 2, T, rng)
        pols, _ = gen_behavior_policies(fam, 0.25, rng)
        cls = gen_model_class(fam, int(rng.integers(0, 6)), int(rng.integers(0, 6)), 0.3, rng,
                              scale_decay=float(rng.choice([0.5, 1.0])))
        assert cls.size_phi * cls.size_psi ** T <= 100_000
        yield fam, cls, gen_dataset(fam, pols, int(rng.integers(5, 400)), rng)


def test_mle_oracle():
    mismatches = dominance = total = 0
    for fam, cls, ds in _mle_instances():
        truth = [t.mu for t in fam.tasks]
        for h in range(ds.H):
            sel = mle_fit(cls, ds, h)
            ll, (i, js) = brute_force_mle(cls, ds, h)
            mismatches += (sel.phi_index, sel.mu_index, sel.loglik) != (i, js, ll)
            dominance += sel.loglik < joint_log_likelihood(fam.shared_phi, truth, ds, h)
            total += 1
    dom = checks.check_mle_dominance()
    _record(checks.CheckResult("MLE oracle", mismatches == 0 and dominance == 0 and dom.passed,
                               mismatches + dominance + dom.failures, total + dom.total,
                               f"{mismatches} enumeration mismatches, {dominance + dom.failures} dominance failures"))


@pytest.mark.slow
def test_transition_rate(tmp_path):
    _record(checks.tv_rate_check(20, out_dir=tmp_path))


@pytest.mark.slow
def test_multitask_benefit():
    _record(checks.multitask_check(20, 2000))


@pytest.mark.slow
def test_pessimism_lemma():
    _record(checks.pessimism_check(200, 1000, 0.88))


@pytest.mark.slow
def test_morl_suboptimality():
    _record(checks.suboptimality_check(20))


@pytest.mark.slow
def test_reward_free_exploration():
    _record(checks.rfe_check(20))


@pytest.mark.slow
def test_pevi_and_lsvi():
    _record(checks.pevi_lsvi_check(20, online_c_beta=0.1))


def test_determinism():
    _record(checks.determinism_check())
