"""Finite-horizon tabular low-rank MDPs: representation, sampling and exact DP.

Conventions used throughout the package:

* steps are 0-based, ``h = 0 .. H-1``; value tables carry an extra terminal row
  ``V[H] = 0``;
* a transition kernel is an array of shape ``(H, S, K, S)`` with
  ``P[h, s, a, s'] = <phi[h, s, a], mu[h, s']>``;
* rewards are ``(H, S, K)`` arrays; policies are either deterministic
  ``(H, S)`` action tables or stochastic ``(H, S, K)`` probability tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

NEG_TOL = 1e-12
SUM_TOL = 1e-9
NUM_BATTERY_DRAWS = 64
BATTERY_SEED = 20240601


class InvalidModelError(ValueError):
    """Raised when an MDP table violates the low-rank kernel invariants."""


@dataclass(frozen=True)
class DeterministicPolicy:
    action: np.ndarray  # (H, S) int

    def __post_init__(self):
        object.__setattr__(self, "action", np.asarray(self.action, dtype=np.int64))
        if self.action.ndim != 2:
            raise ValueError("action table must have shape (H, S)")

    def probs(self, num_actions: int) -> np.ndarray:
        if self.action.size and (self.action.min() < 0 or self.action.max() >= num_actions):
            raise ValueError("action index out of range")
        H, S = self.action.shape
        out = np.zeros((H, S, num_actions))
        np.put_along_axis(out, self.action[..., None], 1.0, axis=2)
        return out


@dataclass(frozen=True)
class StochasticPolicy:
    prob: np.ndarray  # (H, S, K)

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=float)
        if prob.ndim != 3:
            raise ValueError("prob table must have shape (H, S, K)")
        if np.any(prob < 0) or np.any(np.abs(prob.sum(axis=2) - 1.0) > SUM_TOL):
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "prob", prob)

    def probs(self, num_actions: int) -> np.ndarray:
        if self.prob.shape[2] != num_actions:
            raise ValueError("policy action dimension does not match the MDP")
        return self.prob


Policy = Union[DeterministicPolicy, StochasticPolicy]


@dataclass(frozen=True)
class ValueTable:
    V: np.ndarray  # (H+1, S)
    Q: np.ndarray  # (H, S, K)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (H+1,)
    actions: np.ndarray  # (H,)
    rewards: np.ndarray  # (H,)

    @property
    def steps(self) -> list[tuple[int, int, int, float, int]]:
        return [
            (h, int(self.states[h]), int(self.actions[h]), float(self.rewards[h]), int(self.states[h + 1]))
            for h in range(len(self.actions))
        ]

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TabularLowRankMDP:
    """Finite MDP whose kernel factors as ``<phi[h,s,a], mu[h,s']>``.

    ``init_dist`` overrides the fixed start state ``s1`` when given.
    """

    phi: np.ndarray  # (H, S, K, d)
    mu: np.ndarray  # (H, S, d)
    reward: np.ndarray  # (H, S, K)
    s1: int = 0
    init_dist: np.ndarray | None = field(default=None)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        reward = np.asarray(self.reward, dtype=float)
        if phi.ndim != 4 or mu.ndim != 3 or reward.ndim != 3:
            raise ValueError("phi must be (H,S,K,d), mu (H,S,d), reward (H,S,K)")
        H, S, K, d = phi.shape
        if mu.shape != (H, S, d) or reward.shape != (H, S, K):
            raise ValueError(f"inconsistent shapes phi={phi.shape} mu={mu.shape} reward={reward.shape}")
        if not 0 <= int(self.s1) < S:
            raise ValueError("initial state out of range")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "s1", int(self.s1))
        if self.init_dist is not None:
            init = np.asarray(self.init_dist, dtype=float)
            if init.shape != (S,) or np.any(init < 0) or abs(init.sum() - 1.0) > SUM_TOL:
                raise ValueError("init_dist must be a probability vector over states")
            object.__setattr__(self, "init_dist", init)

    @property
    def H(self) -> int:
        return self.phi.shape[0]

    @property
    def S(self) -> int:
        return self.phi.shape[1]

    @property
    def K(self) -> int:
        return self.phi.shape[2]

    @property
    def d(self) -> int:
        return self.phi.shape[3]

    @property
    def initial_distribution(self) -> np.ndarray:
        if self.init_dist is not None:
            return self.init_dist
        out = np.zeros(self.S)
        out[self.s1] = 1.0
        return out

    @cached_property
    def kernel(self) -> np.ndarray:
        return kernel_from_factors(self.phi, self.mu)

    def with_reward(self, reward: np.ndarray) -> "TabularLowRankMDP":
        return TabularLowRankMDP(self.phi, self.mu, reward, self.s1, self.init_dist)

    def validate(self) -> None:
        problems = check_invariants(self)
        if problems:
            raise InvalidModelError("; ".join(problems))


def kernel_from_factors(phi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Inner-product kernel with tiny negative mass clamped and rows renormalized.

    Entries below ``-1e-12`` raise :class:`InvalidModelError`.
    """
    raw = np.einsum("hskd,htd->hskt", phi, mu)
    if np.any(raw < -NEG_TOL):
        raise InvalidModelError("kernel has negative mass below -1e-12")
    neg = raw < 0
    if np.any(neg):
        raw = np.where(neg, 0.0, raw)
        raw = raw / raw.sum(axis=-1, keepdims=True)
    return raw


def normalization_battery(num_states: int) -> np.ndarray:
    """Test functions g: S -> [0,1] used to check the mu normalization bound."""
    rng = np.random.default_rng(BATTERY_SEED)
    rows = [np.ones(num_states), *np.eye(num_states), *rng.uniform(0.0, 1.0, (NUM_BATTERY_DRAWS, num_states))]
    return np.array(rows)


def check_phi(phi: np.ndarray) -> list[str]:
    norms = np.linalg.norm(phi, axis=-1)
    if np.any(norms > 1.0 + SUM_TOL):
        return [f"feature norm {norms.max():.6g} exceeds 1"]
    return []


def check_mu(mu: np.ndarray) -> list[str]:
    H, S, d = mu.shape
    battery = normalization_battery(S)
    worst = np.linalg.norm(np.einsum("gs,hsd->hgd", battery, mu), axis=-1).max()
    if worst > np.sqrt(d) + SUM_TOL:
        return [f"embedding battery norm {worst:.6g} exceeds sqrt(d)"]
    return []


def check_invariants(mdp: TabularLowRankMDP) -> list[str]:
    """Return human-readable descriptions of every violated invariant."""
    problems = []
    raw = np.einsum("hskd,htd->hskt", mdp.phi, mdp.mu)
    if not np.all(np.isfinite(raw)):
        problems.append("kernel has non-finite entries")
    else:
        if np.any(raw < -NEG_TOL):
            problems.append(f"kernel has negative entries (min {raw.min():.3g})")
        dev = np.abs(raw.sum(axis=-1) - 1.0).max()
        if dev > SUM_TOL:
            problems.append(f"kernel rows do not sum to 1 (max deviation {dev:.3g})")
    problems += check_phi(mdp.phi)
    problems += check_mu(mdp.mu)
    if np.any(mdp.reward < 0) or np.any(mdp.reward > 1):
        problems.append("reward outside [0, 1]")
    return problems


# --------------------------------------------------------------------------
# kernel / policy plumbing


def as_kernel(model) -> np.ndarray:
    if isinstance(model, TabularLowRankMDP):
        return model.kernel
    P = np.asarray(model, dtype=float)
    if P.ndim != 4 or P.shape[1] != P.shape[3]:
        raise ValueError("raw kernel must have shape (H, S, K, S)")
    return P


def _initial(model, init) -> np.ndarray:
    if init is not None:
        if np.isscalar(init):
            S = as_kernel(model).shape[1]
            out = np.zeros(S)
            out[int(init)] = 1.0
            return out
        return np.asarray(init, dtype=float)
    if isinstance(model, TabularLowRankMDP):
        return model.initial_distribution
    out = np.zeros(as_kernel(model).shape[1])
    out[0] = 1.0
    return out


def policy_probs(policy: Policy, num_actions: int) -> np.ndarray:
    return policy.probs(num_actions)


# --------------------------------------------------------------------------
# operations


def transition_distribution(mdp: TabularLowRankMDP, h: int, s: int, a: int) -> np.ndarray:
    if not (0 <= h < mdp.H and 0 <= s < mdp.S and 0 <= a < mdp.K):
        raise IndexError(f"index (h={h}, s={s}, a={a}) out of range")
    return mdp.kernel[h, s, a].copy()


def sample_episodes(mdp: TabularLowRankMDP, policy: Policy, n: int, rng: np.random.Generator):
    """Draw ``n`` i.i.d. episodes; returns ``(states (n,H+1), actions (n,H), rewards (n,H))``.

    Sampling is by inverse CDF on one uniform per draw, so results depend only
    on the generator state.
    """
    probs = policy_probs(policy, mdp.K)
    if probs.shape[:2] != (mdp.H, mdp.S):
        raise ValueError("policy dimensions do not match the MDP")
    P = mdp.kernel
    H, S = mdp.H, mdp.S
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    init = mdp.initial_distribution
    if mdp.init_dist is None:
        states[:, 0] = mdp.s1
    else:
        states[:, 0] = _inverse_cdf(np.broadcast_to(init, (n, S)), rng.random(n))
    for h in range(H):
        s = states[:, h]
        a = _inverse_cdf(probs[h, s], rng.random(n))
        actions[:, h] = a
        rewards[:, h] = mdp.reward[h, s, a]
        states[:, h + 1] = _inverse_cdf(P[h, s, a], rng.random(n))
    return states, actions, rewards


def _inverse_cdf(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    # guard against cdf[-1] < 1 by rounding: fall back to the last positive entry
    over = idx >= rows.shape[-1]
    if np.any(over):
        last = rows.shape[-1] - 1 - np.argmax(rows[over][:, ::-1] > 0, axis=-1)
        idx[over] = last
    return idx


def sample_episode(mdp: TabularLowRankMDP, policy: Policy, rng: np.random.Generator) -> Trajectory:
    states, actions, rewards = sample_episodes(mdp, policy, 1, rng)
    return Trajectory(states[0], actions[0], rewards[0])


def evaluate_policy(model, reward: np.ndarray, policy: Policy) -> ValueTable:
    """Exact backward induction of a fixed policy; rewards may be negative."""
    P = as_kernel(model)
    reward = np.asarray(reward, dtype=float)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(reward))):
        raise FloatingPointError("non-finite kernel or reward")
    H, S, K, _ = P.shape
    probs = policy_probs(policy, K)
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, K))
    for h in range(H - 1, -1, -1):
        Q[h] = reward[h] + P[h] @ V[h + 1]
        V[h] = np.sum(probs[h] * Q[h], axis=1)
    return ValueTable(V, Q)


def optimal_plan(model, reward: np.ndarray) -> tuple[DeterministicPolicy, ValueTable]:
    """Backward-induction argmax; ties go to the lowest action index."""
    P = as_kernel(model)
    reward = np.asarray(reward, dtype=float)
    H, S, K, _ = P.shape
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, K))
    act = np.zeros((H, S), dtype=np.int64)
    for h in range(H - 1, -1, -1):
        Q[h] = reward[h] + P[h] @ V[h + 1]
        act[h] = np.argmax(Q[h], axis=1)
        V[h] = np.take_along_axis(Q[h], act[h][:, None], axis=1)[:, 0]
    return DeterministicPolicy(act), ValueTable(V, Q)


def occupancy_measures(model, policy: Policy, init=None) -> np.ndarray:
    """State-action visitation probabilities ``d[h, s, a]`` from the start distribution."""
    P = as_kernel(model)
    H, S, K, _ = P.shape
    probs = policy_probs(policy, K)
    occ = np.zeros((H, S, K))
    state = _initial(model, init)
    for h in range(H):
        occ[h] = state[:, None] * probs[h]
        state = np.einsum("sa,sat->t", occ[h], P[h])
    return occ


def initial_value(vt: ValueTable, start=0) -> float:
    """Value of the start: an MDP (its start distribution), a state index or a distribution."""
    if isinstance(start, TabularLowRankMDP):
        return float(start.initial_distribution @ vt.V[0])
    if np.isscalar(start):
        return float(vt.V[0, int(start)])
    return float(np.asarray(start, dtype=float) @ vt.V[0])


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("length mismatch")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("inputs must be probability vectors")
    return 0.5 * float(np.abs(p - q).sum())


def simulation_lemma_sides(P1, r1, P2, r2, policy: Policy, init=None) -> tuple[float, float, float]:
    """Both expansions of the value difference between two models.

    ``rhs1`` weights by occupancy under ``P2`` and continues with ``V(P1, r1)``;
    ``rhs2`` swaps the roles.
    """
    K1, K2 = as_kernel(P1), as_kernel(P2)
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    start = _initial(P1, init)
    v1 = evaluate_policy(K1, r1, policy)
    v2 = evaluate_policy(K2, r2, policy)
    lhs = float(start @ v1.V[0] - start @ v2.V[0])
    d2 = occupancy_measures(K2, policy, start)
    d1 = occupancy_measures(K1, policy, start)
    dP = K1 - K2
    H = K1.shape[0]
    rhs1 = rhs2 = 0.0
    for h in range(H):
        rhs1 += float(np.sum(d2[h] * (r1[h] - r2[h] + dP[h] @ v1.V[h + 1])))
        rhs2 += float(np.sum(d1[h] * (r1[h] - r2[h] + dP[h] @ v2.V[h + 1])))
    return lhs, rhs1, rhs2
