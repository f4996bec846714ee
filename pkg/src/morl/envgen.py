"""Seeded generators: task families sharing phi*, behavior policies, model classes,
downstream target tasks and offline datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import (
    StochasticPolicy,
    TabularLowRankMDP,
    occupancy_measures,
    sample_episodes,
)
from .model_class import ModelClass, OfflineDataset


@dataclass(frozen=True)
class TaskFamily:
    tasks: tuple[TabularLowRankMDP, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        first = self.tasks[0]
        for task in self.tasks[1:]:
            if task.phi.shape != first.phi.shape or not np.array_equal(task.phi, first.phi):
                raise ValueError("tasks must share the feature table bit-exactly")

    @property
    def shared_phi(self) -> np.ndarray:
        return self.tasks[0].phi

    @property
    def rewards(self) -> np.ndarray:
        return np.stack([t.reward for t in self.tasks])

    @property
    def T(self) -> int:
        return len(self.tasks)

    def __getitem__(self, t: int) -> TabularLowRankMDP:
        return self.tasks[t]

    def __len__(self) -> int:
        return len(self.tasks)

    def subset(self, count: int) -> "TaskFamily":
        return TaskFamily(self.tasks[:count])


@dataclass(frozen=True)
class CoverageCertificate:
    omega: float
    kappa: float
    state_occupancy: np.ndarray  # (H, S) marginal state probabilities under the behavior policy

    @property
    def reachable(self) -> bool:
        return self.kappa > 0


@dataclass(frozen=True)
class TargetTaskSpec:
    coeffs: np.ndarray
    C_L: float
    xi: float


def _simplex(rng: np.random.Generator, size, dim: int, alpha: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(dim, alpha), size=size)


def _corner_tables(S, K, H, d):
    phi = np.zeros((H, S, K, d))
    for s in range(S):
        phi[:, s, :, s % d] = 1.0
    q = np.zeros((H, S, d))
    for j in range(d):
        q[:, j % S, j] = 1.0
    return phi, q


def gen_task_family(S: int, K: int, H: int, d: int, T: int, rng: np.random.Generator,
                    corners: bool = False) -> TaskFamily:
    """Random family of ``T`` low-rank MDPs sharing one feature table.

    Features live on the probability simplex and each embedding coordinate is a
    distribution over next states, so every kernel is valid by construction.
    ``corners=True`` builds the degenerate one-hot family instead (the identity
    chain when ``S == d``).
    """
    if min(S, K, H, d, T) < 1:
        raise ValueError("sizes must be positive")
    if d > min(S, S * K):
        raise ValueError("rank d must not exceed min(S, S*K)")
    if corners:
        phi, q = _corner_tables(S, K, H, d)
        return TaskFamily(tuple(TabularLowRankMDP(phi, q, np.ones((H, S, K))) for _ in range(T)))
    phi = _simplex(rng, (H, S, K), d)
    tasks = []
    for _ in range(T):
        # mu[h, s', j] = q_j(s'), each q_j a distribution over next states
        mu = np.swapaxes(_simplex(rng, (H, d), S), 1, 2)
        reward = rng.uniform(0.0, 1.0, (H, S, K))
        tasks.append(TabularLowRankMDP(phi, mu, reward))
    return TaskFamily(tuple(tasks))


def identity_chain(H: int = 1, K: int = 1, reward: float = 1.0) -> TabularLowRankMDP:
    """Two absorbing states, one-hot features; the start state never changes."""
    phi, q = _corner_tables(2, K, H, 2)
    return TabularLowRankMDP(phi, q, np.full((H, 2, K), reward))


def certify(mdp: TabularLowRankMDP, policy: StochasticPolicy) -> CoverageCertificate:
    """Measure omega and kappa for one (environment, behavior policy) pair.

    kappa is the minimum marginal state probability over steps ``h >= 1``; the
    first step is excluded because the start state is a point mass.  For a
    single-step horizon the first step is all there is.
    """
    omega = float(np.max(1.0 / policy.prob))
    occ = occupancy_measures(mdp, policy).sum(axis=2)
    rows = occ[1:] if mdp.H > 1 else occ
    return CoverageCertificate(omega, float(rows.min()), occ)


def merge_certificates(certs) -> CoverageCertificate:
    certs = list(certs)
    return CoverageCertificate(
        omega=max(c.omega for c in certs),
        kappa=min(c.kappa for c in certs),
        state_occupancy=np.min([c.state_occupancy for c in certs], axis=0),
    )


def gen_behavior_policy(mdp: TabularLowRankMDP, min_action_prob: float,
                        rng: np.random.Generator) -> tuple[StochasticPolicy, CoverageCertificate]:
    """Random softmax policy mixed with uniform so every action has at least ``min_action_prob``."""
    K = mdp.K
    if not 0 < min_action_prob <= 1.0 / K + 1e-15:
        raise ValueError("min_action_prob must lie in (0, 1/K]")
    eps = min(1.0, K * min_action_prob)
    logits = rng.normal(size=(mdp.H, mdp.S, K))
    soft = np.exp(logits - logits.max(axis=2, keepdims=True))
    soft /= soft.sum(axis=2, keepdims=True)
    prob = (1.0 - eps) * soft + eps / K
    if eps == 1.0:
        prob = np.full((mdp.H, mdp.S, K), 1.0 / K)
    policy = StochasticPolicy(prob)
    return policy, certify(mdp, policy)


def gen_behavior_policies(family: TaskFamily, min_action_prob: float, rng: np.random.Generator):
    pairs = [gen_behavior_policy(task, min_action_prob, rng) for task in family.tasks]
    return [p for p, _ in pairs], merge_certificates(c for _, c in pairs)


def decoy_scales(count: int, perturb_scale: float, scale_decay: float = 1.0) -> np.ndarray:
    return np.minimum(1.0, perturb_scale * scale_decay ** np.arange(count))


def gen_model_class(family: TaskFamily, num_phi_decoys: int, num_psi_decoys: int,
                    perturb_scale: float, rng: np.random.Generator,
                    scale_decay: float = 1.0) -> ModelClass:
    """Finite realizable class: truths first, then mixture-perturbed decoys.

    Decoy ``k`` mixes the truth with a fresh random simplex draw at weight
    ``perturb_scale * scale_decay**k``.  Embedding decoys cycle over the tasks'
    true embeddings as bases.
    """
    if perturb_scale <= 0:
        raise ValueError("perturb_scale must be positive")
    phi_star = family.shared_phi
    H, S, K, d = phi_star.shape
    phis = [phi_star]
    for eps in decoy_scales(num_phi_decoys, perturb_scale, scale_decay):
        phis.append((1.0 - eps) * phi_star + eps * _simplex(rng, (H, S, K), d))
    psis = [task.mu for task in family.tasks]
    for k, eps in enumerate(decoy_scales(num_psi_decoys, perturb_scale, scale_decay)):
        base = family.tasks[k % family.T].mu
        noise = np.swapaxes(_simplex(rng, (H, d), S), 1, 2)
        psis.append((1.0 - eps) * base + eps * noise)
    return ModelClass(phis, psis)


def random_linear_reward(phi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reward ``<phi[h,s,a], theta_h>`` clipped to [0,1], ``theta_h`` nonnegative with norm <= 1."""
    H, _, _, d = phi.shape
    theta = rng.uniform(0.0, 1.0, (H, d))
    theta /= np.maximum(1.0, np.linalg.norm(theta, axis=1, keepdims=True))
    return np.clip(np.einsum("hskd,hd->hsk", phi, theta), 0.0, 1.0)


def max_tv(P: np.ndarray, Q: np.ndarray) -> float:
    return float(0.5 * np.abs(P - Q).sum(axis=-1).max())


def gen_target_task(family: TaskFamily, coeffs, perturbation_weight: float, rng: np.random.Generator,
                    C_L: float = 1.0) -> tuple[TabularLowRankMDP, TargetTaskSpec]:
    """Target kernel ``(1-w) sum_t c_t P_t + w Q`` with ``Q`` a fresh rank-d kernel on phi*.

    Because every term shares phi*, the target is itself low rank with the
    shared features; ``xi`` is the measured worst-case TV to the convex
    combination.
    """
    c = np.asarray(coeffs, dtype=float)
    if c.shape != (family.T,) or np.any(c < 0):
        raise ValueError("coeffs must be T nonnegative numbers")
    if abs(c.sum() - 1.0) > 1e-9:
        raise ValueError("coeffs must sum to 1")
    if c.sum() > C_L + 1e-12:
        raise ValueError("coefficient mass exceeds C_L")
    w = float(perturbation_weight)
    if not 0.0 <= w < 1.0:
        raise ValueError("perturbation_weight must lie in [0, 1)")
    phi = family.shared_phi
    H, S, K, d = phi.shape
    mix_mu = np.einsum("t,thsd->hsd", c, np.stack([task.mu for task in family.tasks]))
    noise_mu = np.swapaxes(_simplex(rng, (H, d), S), 1, 2)
    mu = (1.0 - w) * mix_mu + w * noise_mu if w > 0 else mix_mu
    reward = random_linear_reward(phi, rng)
    target = TabularLowRankMDP(phi, mu, reward)
    combo = np.einsum("t,thska->hska", c, np.stack([task.kernel for task in family.tasks]))
    xi = max_tv(target.kernel, combo)
    return target, TargetTaskSpec(c, float(C_L), xi)


def gen_dataset(family: TaskFamily, behavior_policies, n: int, rng: np.random.Generator) -> OfflineDataset:
    """``n`` i.i.d. episodes per task, each task on its own child stream."""
    if len(behavior_policies) != family.T:
        raise ValueError("need one behavior policy per task")
    streams = rng.spawn(family.T)
    H = family[0].H
    states = np.empty((family.T, n, H + 1), dtype=np.int64)
    actions = np.empty((family.T, n, H), dtype=np.int64)
    rewards = np.empty((family.T, n, H))
    for t, (task, pol, stream) in enumerate(zip(family.tasks, behavior_policies, streams)):
        states[t], actions[t], rewards[t] = sample_episodes(task, pol, n, stream)
    return OfflineDataset(states, actions, rewards, family[0].S, family[0].K)


def measure_c_r(model_class: ModelClass, rng: np.random.Generator, num_pairs: int = 64) -> float:
    """Largest pointwise-TV / mean-TV ratio over random pairs of class models.

    Pairs whose mean TV is zero are skipped.
    """
    best = 1.0
    nphi, npsi = len(model_class.phis), len(model_class.psis)
    H = model_class.phis[0].shape[0]
    for _ in range(num_pairs):
        i1, i2 = rng.integers(nphi, size=2)
        j1, j2 = rng.integers(npsi, size=2)
        h = int(rng.integers(H))
        P1 = np.einsum("skd,td->skt", model_class.phis[i1][h], model_class.psis[j1][h])
        P2 = np.einsum("skd,td->skt", model_class.phis[i2][h], model_class.psis[j2][h])
        tv = 0.5 * np.abs(P1 - P2).sum(axis=-1)
        mean = tv.mean()
        if mean > 1e-14:
            best = max(best, float(tv.max() / mean))
    return best

