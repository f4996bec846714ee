"""Upstream multitask offline representation learning (MORL) and its diagnostics.

The pipeline per step h: joint MLE over the finite class, then per task the
empirical feature covariance, the clipped elliptical penalty and planning in
the learned model under the penalized reward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .envgen import TaskFamily
from .mdp import (
    DeterministicPolicy,
    evaluate_policy,
    initial_value,
    occupancy_measures,
    optimal_plan,
)
from .model_class import LearnedModel, ModelClass, OfflineDataset, fit_all_steps

log = logging.getLogger(__name__)

COND_WARN = 1e12
RANGE_TOL = 1e-10


def log_class_term(size_phi: int, size_psi: int, T: int, n: int, H: int, delta: float) -> float:
    """``log(2 |Phi| |Psi|^T n H / delta)`` evaluated without forming the product."""
    if min(size_phi, size_psi, T, n, H) <= 0 or not 0 < delta < 1:
        raise ValueError("sizes must be positive and delta in (0, 1)")
    val = math.log(2) + math.log(size_phi) + T * math.log(size_psi) + math.log(n) + math.log(H) - math.log(delta)
    if not math.isfinite(val):
        raise OverflowError("class term overflowed")
    return val


def zeta(n, size_phi, size_psi, T, H, delta) -> float:
    return 2.0 * log_class_term(size_phi, size_psi, T, n, H, delta) / n


def alpha_from_theory(n, omega, lam, d, size_phi, size_psi, T, H, delta) -> tuple[float, float]:
    """Penalty scale ``sqrt(2 n omega zeta_n + lambda d)``; returns ``(alpha, zeta_n)``."""
    z = zeta(n, size_phi, size_psi, T, H, delta)
    return math.sqrt(2.0 * n * omega * z + lam * d), z


def default_lambda(size_phi, size_psi, T, n, H, delta, const: float = 1.0) -> float:
    """Ridge ``const * log(|Phi| |Psi|^T n H / delta)``."""
    return const * (log_class_term(size_phi, size_psi, T, n, H, delta) - math.log(2))


def empirical_covariance(phi_hat: np.ndarray, dataset: OfflineDataset, t: int, h: int, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    counts = dataset.state_action_counts(t, h)
    f = phi_hat[h]  # (S, K, d)
    cov = np.einsum("sa,sai,saj->ij", counts, f, f)
    cov = 0.5 * (cov + cov.T)
    return cov + lam * np.eye(f.shape[-1])


def inverse_norms(features: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``sqrt(x^T cov^{-1} x)`` for every feature vector in ``features[..., d]``."""
    flat = features.reshape(-1, features.shape[-1])
    factor = linalg.cho_factor(cov, lower=True)
    sol = linalg.cho_solve(factor, flat.T)
    quad = np.einsum("ij,ji->i", flat, sol)
    return np.sqrt(np.maximum(quad, 0.0)).reshape(features.shape[:-1])


@dataclass(frozen=True)
class PenaltyTable:
    b_hat: np.ndarray  # (T, H, S, K)
    alpha: float


def penalty_table(phi_hat: np.ndarray, covariances: np.ndarray, alpha: float) -> PenaltyTable:
    """``min(alpha * ||phi_hat||_{Sigma^{-1}}, 1)`` for every task, step and pair.

    ``covariances`` has shape (T, H, d, d).
    """
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    T, H = covariances.shape[:2]
    b = np.empty((T, H) + phi_hat.shape[1:3])
    for t in range(T):
        for h in range(H):
            b[t, h] = np.minimum(alpha * inverse_norms(phi_hat[h], covariances[t, h]), 1.0)
    return PenaltyTable(b, float(alpha))


@dataclass
class MorlResult:
    learned: LearnedModel
    covariances: np.ndarray  # (T, H, d, d)
    penalties: PenaltyTable
    policies: list[DeterministicPolicy]
    lam: float
    zeta_n: float | None = None
    warnings: list[str] = field(default_factory=list)


def run_morl(dataset: OfflineDataset, model_class: ModelClass, rewards: np.ndarray, lam: float,
             alpha: float | str = "theory", omega: float | None = None, delta: float = 0.1) -> MorlResult:
    """Fit the shared representation and return pessimistic per-task policies.

    ``alpha="theory"`` needs the behavior coverage ``omega``; a number is used as is.
    """
    learned = fit_all_steps(model_class, dataset)
    T, H = dataset.T, dataset.H
    d = learned.phi_hat.shape[-1]
    zeta_n = None
    if alpha == "theory":
        if omega is None:
            raise ValueError("theory alpha requires omega")
        alpha, zeta_n = alpha_from_theory(max(dataset.n, 1), omega, lam, d, model_class.size_phi,
                                          model_class.size_psi, T, H, delta)
    warnings = []
    cov = np.empty((T, H, d, d))
    for t in range(T):
        for h in range(H):
            cov[t, h] = empirical_covariance(learned.phi_hat, dataset, t, h, lam)
            cond = np.linalg.cond(cov[t, h])
            if cond > COND_WARN:
                warnings.append(f"covariance (t={t}, h={h}) condition number {cond:.3g}")
    penalties = penalty_table(learned.phi_hat, cov, float(alpha))
    policies = [optimal_plan(learned.p_hat[t], rewards[t] - penalties.b_hat[t])[0] for t in range(T)]
    for w in warnings:
        log.warning(w)
    return MorlResult(learned, cov, penalties, policies, lam, zeta_n, warnings)


# --------------------------------------------------------------------------
# diagnostics evaluated against the true family


def avg_tv_error(learned: LearnedModel, family: TaskFamily, behavior_policies, h: int) -> float:
    """Task-averaged expected TV error at step h under each task's behavior occupancy."""
    total = 0.0
    for t, (task, pol) in enumerate(zip(family.tasks, behavior_policies)):
        occ = occupancy_measures(task, pol)[h]
        tv = 0.5 * np.abs(learned.p_hat[t, h] - task.kernel[h]).sum(axis=-1)
        total += float(np.sum(occ * tv))
    return total / family.T


def task_values(family: TaskFamily, rewards: np.ndarray, policies) -> np.ndarray:
    return np.array([initial_value(evaluate_policy(task, rewards[t], pol), task)
                     for t, (task, pol) in enumerate(zip(family.tasks, policies))])


def optimal_policies(family: TaskFamily, rewards: np.ndarray) -> list[DeterministicPolicy]:
    return [optimal_plan(task, rewards[t])[0] for t, task in enumerate(family.tasks)]


def avg_suboptimality(policies, comparators, family: TaskFamily, rewards: np.ndarray) -> float:
    if comparators is None:
        comparators = optimal_policies(family, rewards)
    gap = task_values(family, rewards, comparators) - task_values(family, rewards, policies)
    return float(gap.mean())


def feature_second_moment(mdp, policy, phi: np.ndarray, h: int) -> np.ndarray:
    occ = occupancy_measures(mdp, policy)[h]
    return np.einsum("sa,sai,saj->ij", occ, phi[h], phi[h])


def generalized_max_eig(A: np.ndarray, B: np.ndarray) -> float:
    """``sup_x x^T A x / x^T B x`` for PSD A, B; +inf when A has mass outside range(B)."""
    w, U = np.linalg.eigh(0.5 * (B + B.T))
    scale = max(1.0, float(np.abs(w).max()))
    keep = w > RANGE_TOL * scale
    if not np.any(keep):
        return math.inf if np.abs(A).max() > RANGE_TOL else 0.0
    Ur, Un = U[:, keep], U[:, ~keep]
    if Un.size and np.abs(Un.T @ A @ Un).max() > RANGE_TOL * max(1.0, np.abs(A).max()):
        return math.inf
    # whitened A restricted to range(B)
    W = Ur / np.sqrt(w[keep])
    M = W.T @ A @ W
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).max())


def relative_condition_number(family: TaskFamily, t: int, policy, behavior, h: int) -> float:
    phi = family.shared_phi
    A = feature_second_moment(family[t], policy, phi, h)
    B = feature_second_moment(family[t], behavior, phi, h)
    return generalized_max_eig(A, B)


def c_star(family: TaskFamily, comparators, behavior_policies) -> float:
    H = family[0].H
    return max(relative_condition_number(family, t, comparators[t], behavior_policies[t], h)
               for t in range(family.T) for h in range(H))


def pessimism_gap(learned: LearnedModel, penalties: PenaltyTable, comparators, family: TaskFamily,
                  rewards: np.ndarray, omega: float, zeta_n: float) -> tuple[float, float]:
    """Task-averaged ``V(P_hat, r - b_hat) - V(P*, r)`` and its bound ``H sqrt(omega zeta_n / T)``."""
    T = family.T
    diffs = []
    for t, task in enumerate(family.tasks):
        pess = evaluate_policy(learned.p_hat[t], rewards[t] - penalties.b_hat[t], comparators[t])
        true = evaluate_policy(task, rewards[t], comparators[t])
        diffs.append(initial_value(pess, task) - initial_value(true, task))
    H = family[0].H
    return float(np.mean(diffs)), H * math.sqrt(omega * zeta_n / T)


def tv_bound(n, T, size_phi, size_psi, H, delta) -> float:
    return math.sqrt(2.0 * log_class_term(size_phi, size_psi, T, n, H, delta) / (n * T))


def subopt_bound(H, d, omega, cstar, n, size_phi, size_psi, T, delta) -> float:
    """Suboptimality rate with its hidden constant set to 1."""
    if math.isinf(cstar):
        return math.inf
    logterm = log_class_term(size_phi, size_psi, T, n, H, delta) - math.log(2)
    return H ** 2 * d ** 1.5 * omega * math.sqrt(cstar / n * logterm)


@dataclass(frozen=True)
class UpstreamReport:
    avg_tv_error: np.ndarray  # (H,)
    tv_bound: float
    avg_subopt: float
    subopt_bound: float
    c_star: float
    omega: float
    pessimism_gap: float
    pessimism_bound: float
    alpha: float
    zeta_n: float

    def rows(self) -> list[dict]:
        return [
            {
                "h": h,
                "avg_tv": float(self.avg_tv_error[h]),
                "tv_bound": self.tv_bound,
                "subopt": self.avg_subopt,
                "subopt_bound": self.subopt_bound,
                "pessimism_gap": self.pessimism_gap,
                "pessimism_bound": self.pessimism_bound,
                "c_star": self.c_star,
                "omega": self.omega,
                "alpha": self.alpha,
                "zeta_n": self.zeta_n,
            }
            for h in range(len(self.avg_tv_error))
        ]


def upstream_report(result: MorlResult, family: TaskFamily, behavior_policies, rewards: np.ndarray,
                    model_class: ModelClass, n: int, omega: float, delta: float,
                    comparators=None) -> UpstreamReport:
    T, H, d = family.T, family[0].H, family[0].d
    if comparators is None:
        comparators = optimal_policies(family, rewards)
    z = zeta(n, model_class.size_phi, model_class.size_psi, T, H, delta)
    tv = np.array([avg_tv_error(result.learned, family, behavior_policies, h) for h in range(H)])
    cs = c_star(family, comparators, behavior_policies)
    gap, gap_bound = pessimism_gap(result.learned, result.penalties, comparators, family, rewards, omega, z)
    return UpstreamReport(
        avg_tv_error=tv,
        tv_bound=tv_bound(n, T, model_class.size_phi, model_class.size_psi, H, delta),
        avg_subopt=avg_suboptimality(result.policies, comparators, family, rewards),
        subopt_bound=subopt_bound(H, d, omega, cs, n, model_class.size_phi, model_class.size_psi, T, delta),
        c_star=cs,
        omega=omega,
        pessimism_gap=gap,
        pessimism_bound=gap_bound,
        alpha=result.penalties.alpha,
        zeta_n=z,
    )
