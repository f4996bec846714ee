"""Downstream reward-free exploration with a learned feature map.

Exploration runs optimistic value iteration with the elliptical bonus as the
reward; planning reuses the collected transitions for any reward revealed later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linear import RidgeState, bonus
from .mdp import DeterministicPolicy, TabularLowRankMDP


def beta_rfe(d: int, H: int, K_RFE: int, delta: float, C_L: float = 1.0, xi_down: float = 0.0) -> float:
    return (C_L * H * math.sqrt(d)
            + d * H * math.sqrt(math.log(d * K_RFE * H * max(xi_down, 1.0) / delta))
            + H * xi_down * math.sqrt(d * K_RFE))


@dataclass(frozen=True)
class RFEConfig:
    K_RFE: int
    beta: float
    delta: float = 0.1
    epsilon: float = 0.1
    C_L: float = 1.0
    xi_down: float = 0.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.K_RFE < 1 or self.beta < 0:
            raise ValueError("K_RFE must be >= 1 and beta >= 0")

    @classmethod
    def from_theory(cls, K_RFE, d, H, delta=0.1, C_L=1.0, xi_down=0.0, **kw) -> "RFEConfig":
        return cls(K_RFE, beta_rfe(d, H, K_RFE, delta, C_L, xi_down), delta, C_L=C_L, xi_down=xi_down, **kw)


@dataclass
class RFEDataset:
    states: np.ndarray  # (K, H+1); next states kept for the regression targets
    actions: np.ndarray  # (K, H)
    ridge: list[RidgeState]  # per step, accumulated over all episodes

    @property
    def num_episodes(self) -> int:
        return self.actions.shape[0]

    def pairs(self) -> list[list[tuple[int, int]]]:
        return [list(zip(s.tolist(), a.tolist())) for s, a in zip(self.states[:, :-1], self.actions)]


@dataclass
class RFETrace:
    first_q: np.ndarray  # (H, S, K) optimistic Q of the first episode
    visited_bonus: np.ndarray  # (K, H) unscaled bonus at the visited pair
    v1: np.ndarray  # (K,) optimistic value at the start state
    bonus_tables: np.ndarray | None = field(default=None)  # (K, H, S, K) exploration rewards u^k


def _rollout_step(P_row: np.ndarray, u: float) -> int:
    cdf = np.cumsum(P_row)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, len(P_row) - 1)


def rfe_explore(target: TabularLowRankMDP, phi_hat: np.ndarray, config: RFEConfig,
                rng: np.random.Generator, keep_bonus_tables: bool = False) -> tuple[RFEDataset, RFETrace]:
    H, S, K, d = phi_hat.shape
    if (H, S, K) != (target.H, target.S, target.K):
        raise ValueError("feature map does not match the target environment")
    P = target.kernel
    init = target.initial_distribution
    beta = config.beta
    ridge = [RidgeState(d, config.lambda_d) for _ in range(H)]
    # next_feat[h][s'] = sum of phi_hat over stored step-h transitions landing in s'
    next_feat = np.zeros((H, S, d))
    n_ep = config.K_RFE
    states = np.empty((n_ep, H + 1), dtype=np.int64)
    actions = np.empty((n_ep, H), dtype=np.int64)
    visited = np.empty((n_ep, H))
    v1 = np.empty(n_ep)
    tables = np.empty((n_ep, H, S, K)) if keep_bonus_tables else None
    first_q = np.empty((H, S, K))
    for k in range(n_ep):
        V_next = np.zeros(S)
        policy = np.empty((H, S), dtype=np.int64)
        bon = np.empty((H, S, K))
        for h in range(H - 1, -1, -1):
            bon[h] = bonus(phi_hat[h], ridge[h])
            u = beta * bon[h]
            w = ridge[h].solve(next_feat[h].T @ V_next)
            Q = np.minimum(phi_hat[h] @ w + u + u, H)
            if k == 0:
                first_q[h] = Q
            if tables is not None:
                tables[k, h] = u
            policy[h] = np.argmax(Q, axis=1)
            V_next = Q.max(axis=1)
        s = target.s1 if target.init_dist is None else _rollout_step(init, rng.random())
        v1[k] = float(V_next[s]) if target.init_dist is None else float(init @ V_next)
        states[k, 0] = s
        for h in range(H):
            a = int(policy[h, s])
            s_next = _rollout_step(P[h, s, a], rng.random())
            actions[k, h] = a
            visited[k, h] = bon[h, s, a]
            f = phi_hat[h, s, a]
            ridge[h].add(f)
            next_feat[h, s_next] += f
            s = s_next
            states[k, h + 1] = s
    dataset = RFEDataset(states, actions, ridge)
    return dataset, RFETrace(first_q, visited, v1, tables)


def rfe_plan(dataset: RFEDataset, phi_hat: np.ndarray, reward: np.ndarray, beta: float,
             lambda_d: float = 1.0) -> tuple[DeterministicPolicy, np.ndarray]:
    """Single optimistic backward pass over all exploration data; returns ``(policy, Q)``."""
    H, S, K, d = phi_hat.shape
    reward = np.asarray(reward, dtype=float)
    Q_all = np.empty((H, S, K))
    act = np.empty((H, S), dtype=np.int64)
    V_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        s, a, s_next = dataset.states[:, h], dataset.actions[:, h], dataset.states[:, h + 1]
        feats = phi_hat[h][s, a]
        state = RidgeState.from_batch(feats, lambda_d)
        u = np.minimum(beta * bonus(phi_hat[h], state), H)
        w = state.solve(feats.T @ V_next[s_next]) if len(feats) else np.zeros(d)
        Q = np.minimum(phi_hat[h] @ w + reward[h] + u, H)
        Q_all[h] = Q
        act[h] = np.argmax(Q, axis=1)
        V_next = Q.max(axis=1)
    return DeterministicPolicy(act), Q_all


def truncated_optimal_value(kernel: np.ndarray, reward: np.ndarray, cap: float) -> np.ndarray:
    """Optimal value with ``min(., cap)`` applied after each step's max; returns V (H+1, S)."""
    H, S = kernel.shape[:2]
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        V[h] = np.minimum((reward[h] + kernel[h] @ V[h + 1]).max(axis=1), cap)
    return V


def rfe_optimism_violations(trace: RFETrace, target: TabularLowRankMDP, xi_down: float = 0.0,
                            tol: float = 1e-6) -> int:
    """Episodes whose truncated optimal bonus value exceeds the optimistic start value."""
    if trace.bonus_tables is None:
        raise ValueError("trace was recorded without bonus tables")
    H = target.H
    start = target.initial_distribution
    count = 0
    for k in range(len(trace.v1)):
        Vt = truncated_optimal_value(target.kernel, trace.bonus_tables[k], H)
        if float(start @ Vt[0]) > trace.v1[k] + H * H * xi_down + tol:
            count += 1
    return count
