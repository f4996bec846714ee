"""Pessimistic value iteration (offline) and LSVI-UCB (online) on a learned feature map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linear import RidgeState, bonus
from .mdp import DeterministicPolicy, TabularLowRankMDP, evaluate_policy, initial_value, optimal_plan
from .model_class import OfflineDataset


def pevi_beta(H: int, d: int, N_off: int, xi_down: float = 0.0, delta: float = 0.1, c_beta: float = 1.0) -> float:
    iota = math.log(H * d * max(N_off, 1) * max(xi_down, 1.0) / delta)
    return c_beta * (H * d * math.sqrt(iota) + H * math.sqrt(d * N_off) * xi_down)


def lsvi_beta(n: int, H: int, d: int, xi_down: float = 0.0, C_L: float = 1.0, delta: float = 0.1,
              c_beta: float = 1.0) -> float:
    """Episode-``n`` bonus scale (``n`` counts from 1)."""
    iota = math.log(H * d * n * max(xi_down, 1.0) / delta)
    return c_beta * (H * d * math.sqrt(iota) + H * math.sqrt(d * n) * xi_down + C_L * math.sqrt(H * d))


@dataclass(frozen=True)
class PEVIConfig:
    beta: float
    lambda_d: float = 1.0
    xi_down: float = 0.0
    delta: float = 0.1

    def __post_init__(self):
        if self.lambda_d <= 0:
            raise ValueError("lambda_d must be positive")


def pevi(dataset: OfflineDataset, phi_hat: np.ndarray, config: PEVIConfig,
         task: int = 0) -> tuple[DeterministicPolicy, np.ndarray]:
    """Pessimistic backward pass over one task's offline tuples; returns ``(policy, Q)``.

    The greedy action on Q realizes the maximizing (point-mass) policy.
    """
    H, S, K, d = phi_hat.shape
    Q_all = np.empty((H, S, K))
    act = np.empty((H, S), dtype=np.int64)
    V_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        s = dataset.states[task, :, h]
        a = dataset.actions[task, :, h]
        r = dataset.rewards[task, :, h]
        s_next = dataset.states[task, :, h + 1]
        feats = phi_hat[h][s, a]
        state = RidgeState.from_batch(feats, config.lambda_d)
        w = state.solve(feats.T @ (r + V_next[s_next])) if len(feats) else np.zeros(d)
        gamma = H * config.xi_down + config.beta * bonus(phi_hat[h], state)
        Q = np.clip(phi_hat[h] @ w - gamma, 0.0, H - h)
        Q_all[h] = Q
        act[h] = np.argmax(Q, axis=1)
        V_next = Q.max(axis=1)
    return DeterministicPolicy(act), Q_all


def feature_coverage(phi_hat: np.ndarray, occupancy: np.ndarray) -> float:
    """Smallest eigenvalue over steps of the behavior feature second moment."""
    mins = [np.linalg.eigvalsh(np.einsum("sa,sai,saj->ij", occupancy[h], phi_hat[h], phi_hat[h])).min()
            for h in range(phi_hat.shape[0])]
    return float(min(mins))


@dataclass(frozen=True)
class LSVIConfig:
    N_on: int
    lambda_d: float = 1.0
    c_beta: float = 1.0
    xi_down: float = 0.0
    C_L: float = 1.0
    delta: float = 0.1

    def beta(self, n: int, H: int, d: int) -> float:
        return lsvi_beta(n, H, d, self.xi_down, self.C_L, self.delta, self.c_beta)


@dataclass
class LSVIResult:
    policies: np.ndarray  # (N_on, H, S) greedy actions per episode
    values: np.ndarray  # (N_on,) exact value of each episode's policy
    mixture_value: float
    optimal_value: float
    q_tables: np.ndarray | None  # (N_on, H, S, K)
    betas: np.ndarray

    def policy(self, n: int) -> DeterministicPolicy:
        return DeterministicPolicy(self.policies[n])

    @property
    def regret(self) -> np.ndarray:
        return self.optimal_value - self.values

    @property
    def average_regret(self) -> float:
        return float(self.regret.mean())


def lsvi_ucb(target: TabularLowRankMDP, phi_hat: np.ndarray, reward: np.ndarray, config: LSVIConfig,
             rng: np.random.Generator, keep_q: bool = False) -> LSVIResult:
    H, S, K, d = phi_hat.shape
    reward = np.asarray(reward, dtype=float)
    P = target.kernel
    ridge = [RidgeState(d, config.lambda_d) for _ in range(H)]
    next_feat = np.zeros((H, S, d))
    reward_feat = np.zeros((H, d))
    N = config.N_on
    policies = np.empty((N, H, S), dtype=np.int64)
    q_tables = np.empty((N, H, S, K)) if keep_q else None
    betas = np.empty(N)
    init = target.initial_distribution
    cdf_init = np.cumsum(init)
    for n in range(N):
        beta = config.beta(n + 1, H, d)
        betas[n] = beta
        V_next = np.zeros(S)
        for h in range(H - 1, -1, -1):
            w = ridge[h].solve(reward_feat[h] + next_feat[h].T @ V_next)
            Q = np.clip(phi_hat[h] @ w + beta * bonus(phi_hat[h], ridge[h]), 0.0, H - h)
            if q_tables is not None:
                q_tables[n, h] = Q
            policies[n, h] = np.argmax(Q, axis=1)
            V_next = Q.max(axis=1)
        s = target.s1 if target.init_dist is None else min(int(np.searchsorted(cdf_init, rng.random(), "right")), S - 1)
        for h in range(H):
            a = int(policies[n, h, s])
            cdf = np.cumsum(P[h, s, a])
            s_next = min(int(np.searchsorted(cdf, rng.random(), side="right")), S - 1)
            f = phi_hat[h, s, a]
            ridge[h].add(f)
            reward_feat[h] += f * reward[h, s, a]
            next_feat[h, s_next] += f
            s = s_next
    values = np.array([initial_value(evaluate_policy(target, reward, DeterministicPolicy(p)), target)
                       for p in policies])
    v_star = initial_value(optimal_plan(target, reward)[1], target)
    return LSVIResult(policies, values, float(values.mean()), v_star, q_tables, betas)


def optimism_monitor(result: LSVIResult, target: TabularLowRankMDP, reward: np.ndarray,
                     xi_down: float = 0.0, tol: float = 1e-6) -> int:
    """Count (n, h, s, a) where the optimistic Q falls below ``Q* - 2H(H-h+1) xi_down``."""
    if result.q_tables is None:
        raise ValueError("run was recorded without Q tables")
    _, vt = optimal_plan(target, reward)
    H = target.H
    slack = np.array([2 * H * (H - h) * xi_down for h in range(H)])[None, :, None, None]
    return int(np.sum(result.q_tables < vt.Q[None] - slack - tol))
