"""Invariant battery behind ``morl verify``.

The fast scope runs exact identities on random instances; the statistical
scope runs the seeded sweeps that check pessimism, optimism and the scaling
trends, each judged on medians over seeds with a fixed slack.
"""

from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envgen import (
    gen_behavior_policy,
    gen_dataset,
    gen_model_class,
    gen_task_family,
)
from .harness import ExperimentConfig, _context, _downstream_features, build_context, run_sweep
from .io import load_mdp
from .linear import RidgeState, bonus, elliptical_potential_check
from .mdp import (
    DeterministicPolicy,
    StochasticPolicy,
    TabularLowRankMDP,
    check_invariants,
    evaluate_policy,
    initial_value,
    occupancy_measures,
    optimal_plan,
    simulation_lemma_sides,
)
from .model_class import OfflineDataset, joint_log_likelihood, mle_fit
from .offline_online import LSVIConfig, PEVIConfig, lsvi_ucb, optimism_monitor, pevi
from .rfe import RFEConfig, rfe_explore, rfe_optimism_violations

VERIFY_SEED = 7


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    failures: int
    total: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: {self.total - self.failures}/{self.total} ok{extra}"


def _result(name, failures, total, detail="", passed=None) -> CheckResult:
    return CheckResult(name, failures == 0 if passed is None else passed, int(failures), int(total), detail)


def _random_kernel(rng, H, S, K):
    return rng.dirichlet(np.ones(S), size=(H, S, K))


def _random_policy(rng, H, S, K):
    if rng.random() < 0.5:
        return DeterministicPolicy(rng.integers(K, size=(H, S)))
    return StochasticPolicy(rng.dirichlet(np.ones(K), size=(H, S)))


# --------------------------------------------------------------------------
# exact battery


def check_distributions(num_families: int = 20, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad = total = 0
    for _ in range(num_families):
        S, K, H = (int(x) for x in rng.integers(2, 6, size=3))
        d = int(rng.integers(1, S + 1))
        for task in gen_task_family(S, K, H, d, 3, rng).tasks:
            total += 1
            bad += bool(check_invariants(task))
    return _result("distribution invariants", bad, total)


def check_mdp_file(path) -> CheckResult:
    try:
        problems = check_invariants(load_mdp(path, validate=False))
    except (OSError, ValueError, KeyError) as exc:
        problems = [f"unreadable: {exc}"]
    return _result(f"distribution invariants ({path})", len(problems) > 0, 1, "; ".join(problems))


def check_simulation_lemma(num: int = 100, tol: float = 1e-8, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad, worst = 0, 0.0
    for _ in range(num):
        H, S, K = (int(x) for x in rng.integers(1, 6, size=3))
        P1, P2 = _random_kernel(rng, H, S, K), _random_kernel(rng, H, S, K)
        r1, r2 = rng.random((H, S, K)), rng.random((H, S, K))
        lhs, a, b = simulation_lemma_sides(P1, r1, P2, r2, _random_policy(rng, H, S, K))
        err = max(abs(lhs - a), abs(lhs - b))
        worst = max(worst, err)
        bad += err > tol
    return _result("simulation lemma", bad, num, f"max err {worst:.2e}")


def check_occupancy_duality(num: int = 100, tol: float = 1e-9, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad, worst = 0, 0.0
    for _ in range(num):
        H, S, K = (int(x) for x in rng.integers(1, 6, size=3))
        P, r = _random_kernel(rng, H, S, K), rng.random((H, S, K))
        pol = _random_policy(rng, H, S, K)
        init = rng.dirichlet(np.ones(S))
        v = init @ evaluate_policy(P, r, pol).V[0]
        err = abs(v - float(np.sum(occupancy_measures(P, pol, init) * r)))
        worst = max(worst, err)
        bad += err > tol
    return _result("occupancy/value duality", bad, num, f"max err {worst:.2e}")


def check_elliptical_potential(num: int = 1000, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad = 0
    for _ in range(num):
        d = int(rng.integers(1, 6))
        N = int(rng.integers(1, 60))
        lam = float(rng.uniform(1.0, 5.0))
        mats = []
        for _ in range(N):
            # PSD with trace <= 1: a random convex mix of rank-one unit outer products
            V = rng.normal(size=(int(rng.integers(1, d + 1)), d))
            V /= np.linalg.norm(V, axis=1, keepdims=True)
            w = rng.dirichlet(np.ones(len(V))) * rng.uniform(0.0, 1.0)
            mats.append(np.einsum("k,ki,kj->ij", w, V, V))
        lhs, rhs = elliptical_potential_check(mats, lam)
        bad += lhs > rhs
    return _result("elliptical potential", bad, num)


def check_bonus_monotone(num: int = 200, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad = 0
    for _ in range(num):
        d = int(rng.integers(1, 6))
        state = RidgeState(d, float(rng.uniform(0.1, 2.0)))
        probes = rng.normal(size=(8, d))
        prev = bonus(probes, state)
        for _ in range(int(rng.integers(1, 20))):
            state.add(rng.normal(size=d))
            cur = bonus(probes, state)
            bad += bool(np.any(cur > prev + 1e-12))
            prev = cur
    return _result("bonus monotonicity", bad, num)


def check_ridge_incremental(num: int = 200, tol: float = 1e-9, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad = 0
    for _ in range(num):
        d = int(rng.integers(1, 6))
        X = rng.normal(size=(int(rng.integers(0, 40)), d))
        inc = RidgeState(d, 1.0)
        for x in X:
            inc.add(x)
        bad += np.abs(inc.Lambda - RidgeState.from_batch(X.reshape(-1, d), 1.0).Lambda).max() > tol
    return _result("ridge incremental = batch", bad, num)


def check_mle_dominance(num: int = 30, rng=None) -> CheckResult:
    """The selected log-likelihood is never below the true model's (truth is in the class)."""
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad = 0
    for _ in range(num):
        fam = gen_task_family(4, 2, 2, 2, 2, rng)
        pols = [gen_behavior_policy(task, 0.2, rng)[0] for task in fam.tasks]
        cls = gen_model_class(fam, 3, 3, 0.3, rng)
        ds = gen_dataset(fam, pols, int(rng.integers(1, 200)), rng)
        for h in range(2):
            sel = mle_fit(cls, ds, h)
            truth = joint_log_likelihood(fam.shared_phi, [t.mu for t in fam.tasks], ds, h)
            bad += sel.loglik < truth
    return _result("MLE realizability dominance", bad, 2 * num)


def check_lsvi_mixture(num: int = 5, tol: float = 1e-12, rng=None) -> CheckResult:
    rng = rng or np.random.default_rng(VERIFY_SEED)
    bad, worst = 0, 0.0
    for _ in range(num):
        task = gen_task_family(4, 2, 3, 2, 1, rng)[0]
        res = lsvi_ucb(task, task.phi, task.reward, LSVIConfig(50), rng)
        members = [initial_value(evaluate_policy(task, task.reward, res.policy(i)), task)
                   for i in range(len(res.policies))]
        err = abs(res.mixture_value - float(np.mean(members)))
        worst = max(worst, err)
        bad += err > tol
    return _result("LSVI mixture value = member mean", bad, num, f"max err {worst:.2e}")


def fast_checks() -> list[CheckResult]:
    return [check_distributions(), check_simulation_lemma(), check_occupancy_duality(),
            check_elliptical_potential(), check_bonus_monotone(), check_ridge_incremental(),
            check_mle_dominance(), check_lsvi_mixture()]


# --------------------------------------------------------------------------
# statistical suites


def _per_h_violation(rows, value: str, bound: str) -> dict:
    out = {}
    for r in rows:
        out.setdefault(r["h"], []).append(r[value] > r[bound])
    return {h: float(np.mean(v)) for h, v in sorted(out.items())}


def _nonincreasing(values) -> bool:
    vals = list(values)
    return all(b <= a for a, b in zip(vals, vals[1:]))


def tv_rate_check(seeds: int = 20, out_dir=None) -> CheckResult:
    cfg = ExperimentConfig(n_grid=(250, 1000, 4000, 16000), T_grid=(4,), seeds=tuple(range(seeds)),
                           experiments=("upstream",), output_dir=str(out_dir or "."), tag="tv_rate")
    res = run_sweep(cfg, write=out_dir is not None)
    rows = [r for r in res.rows["upstream"] if not r["error"]]
    viol = _per_h_violation(rows, "avg_tv", "tv_bound")
    slope, stderr = res.slopes["upstream"]
    ok = max(viol.values()) <= cfg.delta + 0.02 and -0.65 <= slope <= -0.35 and not res.errors()
    detail = f"slope {slope:.3f} (se {stderr:.3f}); per-h violation {viol}"
    return _result("transition TV rate in nT", sum(v > cfg.delta + 0.02 for v in viol.values()), len(viol),
                   detail, ok)


def multitask_check(seeds: int = 20, n: int = 2000) -> CheckResult:
    cfg = ExperimentConfig(n_grid=(n,), T_grid=(1, 2, 4, 8), seeds=tuple(range(seeds)), experiments=("upstream",))
    res = run_sweep(cfg, write=False)
    med = [res.medians("upstream", T=T)[n] for T in cfg.T_grid]
    ok = _nonincreasing(med) and not res.errors()
    return _result("multitask benefit", 0 if ok else 1, 1, "median avg_tv by T " + _fmt(dict(zip(cfg.T_grid, med))), ok)


def pessimism_check(seeds: int = 200, n: int = 1000, level: float = 0.88) -> CheckResult:
    cfg = ExperimentConfig(n_grid=(n,), T_grid=(4,), seeds=tuple(range(seeds)), experiments=("upstream",))
    res = run_sweep(cfg, write=False)
    rows = [r for r in res.rows["upstream"] if r["h"] == 0 and not r["error"]]
    held = sum(r["pessimism_gap"] <= r["pessimism_bound"] for r in rows)
    ok = held >= level * seeds
    return _result("pessimism gap bound", seeds - held, seeds, f"held in {held / seeds:.1%}", ok)


def suboptimality_check(seeds: int = 20) -> CheckResult:
    cfg = ExperimentConfig(n_grid=(250, 1000, 4000, 16000), T_grid=(4,), seeds=tuple(range(seeds)),
                           experiments=("upstream",))
    res = run_sweep(cfg, write=False)
    rows = [r for r in res.rows["upstream"] if r["h"] == 0 and not r["error"]]
    med = res.medians("upstream", "subopt")
    viol = float(np.mean([r["subopt"] > r["subopt_bound"] for r in rows]))
    mono = _nonincreasing(med.values())
    ok = mono and viol <= cfg.delta + 0.02 and not res.errors()
    return _result("MORL suboptimality", 0 if ok else 1, 1,
                   f"median by n {_fmt(med)}; nonincreasing={mono}; bound violation {viol:.1%}", ok)


def _downstream(seeds: int, **kw):
    cfg = ExperimentConfig(seeds=tuple(range(seeds)), **kw)
    return cfg, run_sweep(cfg, write=False)


def rfe_check(seeds: int = 20) -> CheckResult:
    cfg, res = _downstream(seeds, experiments=("rfe",), K_grid=(4000, 16000))
    med = res.medians("rfe")
    trend = med[16000] < med[4000]
    monitor = rfe_optimism_check()
    ok = trend and monitor.passed and not res.errors()
    return _result("reward-free exploration", 0 if ok else 1, 1,
                   f"median subopt by K {_fmt(med)}; optimism violations in {monitor.failures}/{monitor.total} seeds",
                   ok)


def pevi_lsvi_check(seeds: int = 20, online_c_beta: float = 0.1) -> CheckResult:
    cfg, res = _downstream(seeds, experiments=("offline", "online"), N_off_grid=(500, 2000, 8000),
                           N_on_grid=(1000, 4000), c_beta_online=online_c_beta)
    off = res.medians("offline")
    on = res.medians("online")
    off_ok = _nonincreasing(off.values())
    on_ok = on[4000] < on[1000]
    exact = pevi_exact_recovery()
    ok = off_ok and on_ok and exact <= 1e-6 and not res.errors()
    return _result("PEVI and LSVI-UCB", 0 if ok else 1, 1,
                   f"PEVI median subopt {_fmt(off)} nonincreasing={off_ok}; "
                   f"LSVI avg regret {_fmt(on)} decreasing={on_ok}; exact-recovery gap {exact:.1e}", ok)


def shift_chain(S: int = 3, K: int = 2, H: int = 3, rng=None) -> TabularLowRankMDP:
    """Deterministic chain ``s -> (s + a) mod S`` with one-hot features of the next state.

    The reward depends on the next state only, so it is linear in the features.
    """
    rng = rng or np.random.default_rng(VERIFY_SEED)
    phi = np.zeros((H, S, K, S))
    for s in range(S):
        for a in range(K):
            phi[:, s, a, (s + a) % S] = 1.0
    mu = np.broadcast_to(np.eye(S), (H, S, S)).copy()
    theta = rng.random((H, S))
    return TabularLowRankMDP(phi, mu, np.einsum("hskj,hj->hsk", phi, theta))


def exhaustive_episodes(mdp: TabularLowRankMDP) -> OfflineDataset:
    """Every action sequence from every start state, so each (h, s, a) appears in the data."""
    H, S, K = mdp.H, mdp.S, mdp.K
    paths = list(itertools.product(range(S), itertools.product(range(K), repeat=H)))
    states = np.empty((1, len(paths), H + 1), dtype=np.int64)
    actions = np.empty((1, len(paths), H), dtype=np.int64)
    rewards = np.empty((1, len(paths), H))
    for i, (s, acts) in enumerate(paths):
        states[0, i, 0] = s
        for h, a in enumerate(acts):
            actions[0, i, h] = a
            rewards[0, i, h] = mdp.reward[h, s, a]
            s = int(np.argmax(mdp.kernel[h, s, a]))
            states[0, i, h + 1] = s
    return OfflineDataset(states, actions, rewards, S, K)


def pevi_exact_recovery() -> float:
    """Suboptimality of PEVI with true features, exhaustive noiseless data and no penalty."""
    mdp = shift_chain()
    policy, _ = pevi(exhaustive_episodes(mdp), mdp.phi, PEVIConfig(beta=0.0, lambda_d=1e-9))
    v_star = initial_value(optimal_plan(mdp, mdp.reward)[1], mdp)
    return v_star - initial_value(evaluate_policy(mdp, mdp.reward, policy), mdp)


def rfe_optimism_check(seeds: int = 20, episodes: int = 500) -> CheckResult:
    """True features, no misspecification: count seeds with any optimism violation."""
    cfg = ExperimentConfig()
    tgt = build_context(cfg).target
    rc = RFEConfig.from_theory(episodes, cfg.d, cfg.H, cfg.delta)
    bad = total = 0
    for seed in range(seeds):
        _, trace = rfe_explore(tgt, tgt.phi, rc, np.random.default_rng([cfg.family_seed, VERIFY_SEED, seed]),
                               keep_bonus_tables=True)
        v = rfe_optimism_violations(trace, tgt)
        bad += v > 0
        total += v
    return _result("reward-free optimism", bad, seeds, f"{total} violating episodes", bad <= cfg.delta * seeds)


def lsvi_optimism_check(seeds: int = 20, N_on: int = 500, level: float = 0.12) -> CheckResult:
    cfg = ExperimentConfig()
    tgt = build_context(cfg).target
    bad = 0
    for seed in range(seeds):
        res = lsvi_ucb(tgt, tgt.phi, tgt.reward, LSVIConfig(N_on),
                       np.random.default_rng([cfg.family_seed, VERIFY_SEED, seed]), keep_q=True)
        bad += optimism_monitor(res, tgt, tgt.reward) > 0
    return _result("LSVI-UCB optimism", bad, seeds, passed=bad <= level * seeds)


def determinism_check() -> CheckResult:
    cfg = ExperimentConfig(n_grid=(100, 400), seeds=(0, 1), experiments=("upstream", "rfe", "offline", "online"),
                           K_grid=(200,), N_off_grid=(200,), N_on_grid=(100,), n_upstream=500, tag="det")
    blobs = []
    for _ in range(2):
        _context.cache_clear()
        _downstream_features.cache_clear()
        with tempfile.TemporaryDirectory() as tmp:
            res = run_sweep(cfg.replace(output_dir=tmp))
            blobs.append({k: Path(p).read_bytes() for k, p in res.paths.items()})
    diff = [k for k in blobs[0] if blobs[0][k] != blobs[1][k]]
    return _result("sweep determinism", len(diff), len(blobs[0]), ", ".join(diff))


def statistical_checks() -> list[CheckResult]:
    return [tv_rate_check(), multitask_check(), pessimism_check(), suboptimality_check(), rfe_check(),
            lsvi_optimism_check(), pevi_lsvi_check(), determinism_check()]


def verify(scope: str = "fast", mdp_files=()) -> list[CheckResult]:
    if scope not in ("fast", "statistical", "all"):
        raise ValueError("scope must be fast, statistical or all")
    results = [check_mdp_file(p) for p in mdp_files]
    if scope in ("fast", "all"):
        results += fast_checks()
    if scope in ("statistical", "all"):
        results += statistical_checks()
    return results


def _fmt(d: dict) -> str:
    return "{" + ", ".join(f"{k}: {v:.4g}" for k, v in d.items()) + "}"

