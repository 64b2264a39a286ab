"""Least-squares SVM classifier solved in closed form from a Gram matrix.

The dual coefficients are stored label-absorbed: ``alpha_i = y_i * a_i`` where
``a_i`` are the Lagrange multipliers, so the decision function is
``f(x) = sum_i alpha_i k(x_i, x) + b`` and ``sum_i alpha_i = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class LssvmDual:
    alpha: np.ndarray
    b: float
    C: float
    residual: float = 0.0
    jitter: float = 0.0


def kkt_system(K, C: float):
    N = len(K)
    A = np.empty((N + 1, N + 1))
    A[0, 0] = 0.0
    A[0, 1:] = A[1:, 0] = 1.0
    A[1:, 1:] = K
    A[1:, 1:][np.diag_indices(N)] += 1.0 / C
    return A


def solve(K, y, C: float) -> LssvmDual:
    """Solve ``[[0, 1'], [1, K + I/C]] [b; alpha] = [0; y]``.

    Escalates a diagonal jitter from 1e-10 to 1e-6 if the bordered system is
    singular or the relative residual exceeds 1e-8.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(y)
    if K.shape != (N, N):
        raise ValueError(f"Gram matrix shape {K.shape} does not match {N} labels")
    if N < 2:
        raise ValueError("need at least two training points")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("both classes must be present")
    if not C > 0:
        raise ValueError("C must be positive")
    rhs = np.concatenate([[0.0], y])
    A0 = kkt_system(K, C)
    scale = np.linalg.norm(rhs)
    for jitter in JITTERS:
        A = A0.copy()
        if jitter:
            A[1:, 1:][np.diag_indices(N)] += jitter
        try:
            sol = linalg.solve(A, rhs, assume_a="sym", check_finite=False)
        except (linalg.LinAlgError, ValueError):
            continue
        if not np.all(np.isfinite(sol)):
            continue
        res = float(np.linalg.norm(A @ sol - rhs) / scale)
        if res <= RESIDUAL_TOL:
            return LssvmDual(sol[1:], float(sol[0]), float(C), res, jitter)
    raise np.linalg.LinAlgError("LSSVM system is singular even after diagonal jitter of 1e-6")


def predict(dual: LssvmDual, K_test) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``K_test @ alpha + b`` and their signs (0 counts as +1)."""
    K_test = np.atleast_2d(np.asarray(K_test, dtype=float))
    if K_test.shape[1] != len(dual.alpha):
        raise ValueError(f"cross-Gram has {K_test.shape[1]} columns, model has {len(dual.alpha)} points")
    scores = K_test @ dual.alpha + dual.b
    return scores, np.where(scores >= 0, 1, -1)


def dual_objective(dual: LssvmDual, K, y) -> float:
    """``y'alpha - 1/2 alpha'(K + I/C)alpha``, the value maximized by :func:`solve`."""
    a = dual.alpha
    return float(np.asarray(y) @ a - 0.5 * (a @ (np.asarray(K) @ a) + a @ a / dual.C))
