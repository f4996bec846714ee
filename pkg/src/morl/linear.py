"""Ridge regression, elliptical bonuses and approximate-feature diagnostics shared
by the downstream learners."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .upstream import log_class_term

log = logging.getLogger(__name__)


class ReachabilityError(ValueError):
    """The behavior policies do not reach every state (kappa = 0)."""


class RidgeState:
    """Running ``Lambda = lambda_d I + sum phi phi^T``; single writer."""

    def __init__(self, d: int, lambda_d: float = 1.0):
        if lambda_d <= 0:
            raise ValueError("lambda_d must be positive")
        self.lambda_d = float(lambda_d)
        self.Lambda = self.lambda_d * np.eye(d)
        self.count = 0
        self._factor = None

    @property
    def d(self) -> int:
        return self.Lambda.shape[0]

    def add(self, phi: np.ndarray) -> None:
        phi = np.asarray(phi, dtype=float)
        self.Lambda += np.outer(phi, phi)
        self.count += 1
        self._factor = None

    def add_batch(self, phis: np.ndarray, weights: np.ndarray | None = None) -> None:
        phis = np.asarray(phis, dtype=float).reshape(-1, self.d)
        w = np.ones(len(phis)) if weights is None else np.asarray(weights, dtype=float).ravel()
        self.Lambda += np.einsum("n,ni,nj->ij", w, phis, phis)
        self.count += int(round(w.sum()))
        self._factor = None

    def factor(self):
        if self._factor is None:
            self._factor = linalg.cho_factor(self.Lambda, lower=True)
        return self._factor

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.factor(), rhs)

    def snapshot(self) -> "RidgeState":
        copy = RidgeState(self.d, self.lambda_d)
        copy.Lambda = self.Lambda.copy()
        copy.count = self.count
        return copy

    @classmethod
    def from_batch(cls, phis: np.ndarray, lambda_d: float = 1.0) -> "RidgeState":
        phis = np.asarray(phis, dtype=float)
        state = cls(phis.shape[-1], lambda_d)
        if len(phis):
            state.add_batch(phis)
        return state


def ridge_weights(phi_list, target_list, lambda_d: float = 1.0) -> np.ndarray:
    """``Lambda^{-1} sum_i phi_i y_i`` with ``Lambda = lambda_d I + sum phi_i phi_i^T``."""
    phis = np.asarray(phi_list, dtype=float)
    ys = np.asarray(target_list, dtype=float)
    if len(phis) != len(ys):
        raise ValueError("features and targets differ in length")
    if len(phis) == 0:
        return np.zeros(0) if phis.ndim < 2 else np.zeros(phis.shape[-1])
    state = RidgeState.from_batch(phis, lambda_d)
    return state.solve(phis.T @ ys)


def bonus(phi: np.ndarray, state: RidgeState) -> np.ndarray:
    """``sqrt(phi^T Lambda^{-1} phi)``; vectorized over leading axes of ``phi``."""
    phi = np.asarray(phi, dtype=float)
    flat = phi.reshape(-1, state.d)
    quad = np.einsum("ij,ji->i", flat, state.solve(flat.T))
    out = np.sqrt(np.maximum(quad, 0.0)).reshape(phi.shape[:-1])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class XiDown:
    value: float
    xi: float
    C_L: float
    C_R: float
    nu: float
    kappa: float
    T: int
    n: int
    size_phi: int
    size_psi: int
    H: int
    delta: float


def xi_down(xi: float, C_L: float, C_R: float, nu: float, kappa: float, T: int, n: int,
            size_phi: int, size_psi: int, H: int, delta: float) -> XiDown:
    """Downstream feature misspecification inflated by the upstream estimation error."""
    if kappa <= 0:
        raise ReachabilityError("reachability violated: kappa must be positive")
    if n < 1:
        raise ValueError("n must be at least 1")
    logterm = log_class_term(size_phi, size_psi, T, n, H, delta)
    value = xi + (C_L * C_R * nu / kappa) * math.sqrt(2.0 * T * logterm / n)
    return XiDown(value, xi, C_L, C_R, nu, kappa, T, n, size_phi, size_psi, H, delta)


def approx_feature_error(phi_hat: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, bool]:
    """Per-step worst TV between the kernel and its least-squares fit on ``phi_hat``.

    Returns ``(errors (H,), regularized)``; the flag is set when some step's
    feature matrix was rank deficient and a 1e-8 ridge was used.
    """
    H, S, K, d = phi_hat.shape
    errs = np.empty(H)
    regularized = False
    for h in range(H):
        X = phi_hat[h].reshape(S * K, d)
        Y = kernel[h].reshape(S * K, S)
        gram = X.T @ X
        if np.linalg.matrix_rank(X) < d:
            regularized = True
            gram = gram + 1e-8 * np.eye(d)
            log.warning("rank-deficient features at step %d; using a regularized fit", h)
        mu = np.linalg.solve(gram, X.T @ Y)  # (d, S)
        errs[h] = 0.5 * np.abs(Y - X @ mu).sum(axis=1).max()
    return errs, regularized


def elliptical_potential_check(matrices, lam: float) -> tuple[float, float]:
    """``(sum_n Tr(X_n M_{n-1}^{-1}), 2 d log(1 + N / (lam d)))`` for a PSD stream."""
    mats = [np.asarray(X, dtype=float) for X in matrices]
    if not mats:
        return 0.0, 0.0
    d = mats[0].shape[0]
    M = lam * np.eye(d)
    lhs = 0.0
    for X in mats:
        lhs += float(np.trace(np.linalg.solve(M, X)))
        M = M + X
    return lhs, 2.0 * d * math.log(1.0 + len(mats) / (lam * d))
