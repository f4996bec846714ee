"""Finite model classes and the joint maximum-likelihood oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import check_mu, check_phi, kernel_from_factors

LOG_FLOOR = 1e-300


class IncompatibleClassError(RuntimeError):
    """Every candidate in the class assigns zero probability to some observed transition."""


@dataclass(frozen=True)
class ModelClass:
    """Candidate feature tables ``phis[i]`` (H,S,K,d) and embedding tables ``psis[j]`` (H,S,d)."""

    phis: tuple[np.ndarray, ...]
    psis: tuple[np.ndarray, ...]

    def __post_init__(self):
        phis = tuple(np.asarray(p, dtype=float) for p in self.phis)
        psis = tuple(np.asarray(p, dtype=float) for p in self.psis)
        if not phis or not psis:
            raise ValueError("model class needs at least one feature and one embedding candidate")
        object.__setattr__(self, "phis", phis)
        object.__setattr__(self, "psis", psis)

    @property
    def size_phi(self) -> int:
        return len(self.phis)

    @property
    def size_psi(self) -> int:
        return len(self.psis)

    def check(self) -> list[str]:
        problems = []
        for i, phi in enumerate(self.phis):
            problems += [f"phi[{i}]: {p}" for p in check_phi(phi)]
        for j, psi in enumerate(self.psis):
            problems += [f"psi[{j}]: {p}" for p in check_mu(psi)]
        for i, phi in enumerate(self.phis):
            for j, psi in enumerate(self.psis):
                raw = np.einsum("hskd,htd->hskt", phi, psi)
                if raw.min() < -1e-12 or np.abs(raw.sum(-1) - 1).max() > 1e-9:
                    problems.append(f"pair ({i}, {j}) is not a valid kernel")
        return problems


@dataclass(frozen=True)
class OfflineDataset:
    """Per-task episodes: ``states[t, i, h]`` for h in 0..H, ``actions``/``rewards`` for h < H.

    The step-``h`` tuples of task ``t`` are
    ``(states[t,:,h], actions[t,:,h], rewards[t,:,h], states[t,:,h+1])``.
    """

    states: np.ndarray  # (T, n, H+1)
    actions: np.ndarray  # (T, n, H)
    rewards: np.ndarray  # (T, n, H)
    num_states: int
    num_actions: int

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def H(self) -> int:
        return self.actions.shape[2]

    def tuples(self, t: int, h: int) -> list[tuple[int, int, float, int]]:
        return list(zip(self.states[t, :, h].tolist(), self.actions[t, :, h].tolist(),
                        self.rewards[t, :, h].tolist(), self.states[t, :, h + 1].tolist()))

    def transition_counts(self, h: int) -> np.ndarray:
        """``C[t, s, a, s']`` = number of step-h tuples of task t."""
        S, K = self.num_states, self.num_actions
        out = np.zeros((self.T, S, K, S))
        for t in range(self.T):
            flat = (self.states[t, :, h] * K + self.actions[t, :, h]) * S + self.states[t, :, h + 1]
            out[t] = np.bincount(flat, minlength=S * K * S).reshape(S, K, S)
        return out

    def state_action_counts(self, t: int, h: int) -> np.ndarray:
        S, K = self.num_states, self.num_actions
        flat = self.states[t, :, h] * K + self.actions[t, :, h]
        return np.bincount(flat, minlength=S * K).reshape(S, K).astype(float)

    def task(self, t: int) -> "OfflineDataset":
        return OfflineDataset(self.states[t:t + 1], self.actions[t:t + 1], self.rewards[t:t + 1],
                              self.num_states, self.num_actions)


def _task_loglik(phi_h: np.ndarray, mu_h: np.ndarray, counts: np.ndarray) -> float:
    """Count-weighted log-likelihood of one task's step tuples; -inf if any observed
    transition gets probability at most the floor."""
    P = phi_h @ mu_h.T  # (S, K, S)
    seen = counts > 0
    if not np.any(seen):
        return 0.0
    p = P[seen]
    if np.any(p <= LOG_FLOOR):
        return -math.inf
    return float(np.dot(counts[seen], np.log(p)))


def joint_log_likelihood(phi: np.ndarray, mus, dataset: OfflineDataset, h: int,
                         counts: np.ndarray | None = None) -> float:
    """Sum over tasks and step-h tuples of ``log <phi_h(s,a), mu^t_h(s')>``."""
    if len(mus) != dataset.T:
        raise ValueError("need one embedding per task")
    if counts is None:
        counts = dataset.transition_counts(h)
    total = 0.0
    for t, mu in enumerate(mus):
        total += _task_loglik(phi[h], mu[h], counts[t])
    return total


@dataclass(frozen=True)
class Selection:
    phi_index: int
    mu_index: tuple[int, ...]
    loglik: float


def mle_fit(model_class: ModelClass, dataset: OfflineDataset, h: int) -> Selection:
    """Exact joint MLE at step ``h`` by enumeration.

    For a fixed feature candidate the objective separates across tasks, so each
    task's embedding is chosen independently.  Ties go to the lowest index.
    """
    counts = dataset.transition_counts(h)
    T = dataset.T
    best = None
    for i, phi in enumerate(model_class.phis):
        table = np.array([[_task_loglik(phi[h], psi[h], counts[t]) for t in range(T)]
                          for psi in model_class.psis])  # (|Psi|, T)
        choice = tuple(int(j) for j in np.argmax(table, axis=0))
        total = 0.0
        for t, j in enumerate(choice):
            total += table[j, t]
        if total == -math.inf:
            continue
        if best is None or total > best.loglik:
            best = Selection(i, choice, total)
    if best is None:
        raise IncompatibleClassError(f"class incompatible with data at step {h}")
    return best


@dataclass(frozen=True)
class LearnedModel:
    phi_index: np.ndarray  # (H,)
    mu_index: np.ndarray  # (T, H)
    phi_hat: np.ndarray  # (H, S, K, d)
    mu_hat: np.ndarray  # (T, H, S, d)
    p_hat: np.ndarray  # (T, H, S, K, S)
    loglik: np.ndarray  # (H,)

    @property
    def T(self) -> int:
        return self.mu_hat.shape[0]


def reconstruct_kernels(model_class: ModelClass, selections) -> LearnedModel:
    """Assemble per-step selections (one :class:`Selection` per h) into full kernels."""
    selections = list(selections)
    H = len(selections)
    T = len(selections[0].mu_index)
    phi_index = np.array([sel.phi_index for sel in selections])
    mu_index = np.array([sel.mu_index for sel in selections]).T
    phi_hat = np.stack([model_class.phis[phi_index[h]][h] for h in range(H)])
    mu_hat = np.stack([np.stack([model_class.psis[mu_index[t, h]][h] for h in range(H)]) for t in range(T)])
    p_hat = np.stack([kernel_from_factors(phi_hat, mu_hat[t]) for t in range(T)])
    loglik = np.array([sel.loglik for sel in selections])
    return LearnedModel(phi_index, mu_index, phi_hat, mu_hat, p_hat, loglik)


def fit_all_steps(model_class: ModelClass, dataset: OfflineDataset) -> LearnedModel:
    return reconstruct_kernels(model_class, [mle_fit(model_class, dataset, h) for h in range(dataset.H)])
