"""Per-channel base kernels and their convex combination."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GAMMA_POLICIES = ("median", "inverse-dimension")


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is 'linear' or 'rbf'; ``gamma`` a number or one of GAMMA_POLICIES."""

    kind: str = "rbf"
    gamma: float | str = "median"
    per_channel: bool = True

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if isinstance(self.gamma, str) and self.gamma not in GAMMA_POLICIES:
            raise ValueError(f"unknown gamma policy {self.gamma!r}")


def sq_dists(X, Z) -> np.ndarray:
    X, Z = np.asarray(X, dtype=float), np.asarray(Z, dtype=float)
    d2 = np.sum(X**2, 1)[:, None] + np.sum(Z**2, 1)[None, :] - 2 * X @ Z.T
    return np.clip(d2, 0.0, None)


def gram_channel(spec: KernelSpec, X_m, Z_m, gamma: float | None = None) -> np.ndarray:
    """Kernel matrix between row sets ``X_m`` (N x d) and ``Z_m`` (N' x d) of one channel."""
    X_m, Z_m = np.atleast_2d(X_m), np.atleast_2d(Z_m)
    if X_m.shape[1] != Z_m.shape[1]:
        raise ValueError(f"block dimensions differ: {X_m.shape[1]} vs {Z_m.shape[1]}")
    same = X_m is Z_m
    if spec.kind == "linear":
        K = X_m @ Z_m.T
    else:
        g = spec.gamma if gamma is None else gamma
        if isinstance(g, str):
            raise ValueError(f"gamma policy {g!r} must be resolved before building a Gram matrix")
        K = np.exp(-g * sq_dists(X_m, Z_m))
        if same:
            np.fill_diagonal(K, 1.0)
    return (K + K.T) / 2 if same else K


def resolve_gamma(policy, X_m, seed: int = 0, max_pairs: int = 1000) -> float:
    """Concrete RBF width for one channel block, computed on training rows only."""
    if not isinstance(policy, str):
        if not policy > 0:
            raise ValueError("gamma must be positive")
        return float(policy)
    X_m = np.atleast_2d(np.asarray(X_m, dtype=float))
    n, d = X_m.shape
    if policy == "inverse-dimension":
        return 1.0 / d
    if n < 2:
        raise ValueError("median heuristic needs at least 2 rows")
    i, j = np.triu_indices(n, k=1)
    if len(i) > max_pairs:
        pick = np.random.default_rng(seed).choice(len(i), size=max_pairs, replace=False)
        i, j = i[pick], j[pick]
    d2 = np.sum((X_m[i] - X_m[j]) ** 2, axis=1)
    med = float(np.median(d2))
    if med <= 0:
        nonzero = d2[d2 > 0]
        if nonzero.size == 0:
            logger.warning("all pairwise distances are zero; falling back to 1/d")
            return 1.0 / d
        med = float(np.median(nonzero))
    return 1.0 / med


def resolve_gammas(spec: KernelSpec, X, seed: int = 0) -> np.ndarray:
    """One gamma per channel of ``X`` (N x M x d); zeros for the linear kernel."""
    if spec.kind == "linear":
        return np.zeros(X.shape[1])
    return np.array([resolve_gamma(spec.gamma, X[:, m], seed + m) for m in range(X.shape[1])])


def channel_grams(spec: KernelSpec, X, Z=None, gammas=None) -> np.ndarray:
    """Stack of per-channel Gram matrices, shape (M, N, N')."""
    X = np.asarray(X, dtype=float)
    same = Z is None
    Z = X if same else np.asarray(Z, dtype=float)
    M = X.shape[1]
    if Z.shape[1] != M:
        raise ValueError("X and Z have different channel counts")
    out = np.empty((M, X.shape[0], Z.shape[0]))
    for m in range(M):
        g = None if gammas is None else gammas[m]
        Xm = X[:, m]
        out[m] = gram_channel(spec, Xm, Xm if same else Z[:, m], g)
    return out


def check_eta(eta, tol: float = 1e-9) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < -tol) or abs(eta.sum() - 1) > tol:
        raise ValueError("kernel weights must be nonnegative and sum to 1")
    return eta


def combine(grams, eta) -> np.ndarray:
    """``sum_m eta_m K_m`` over a list or (M, N, N') stack of Gram matrices."""
    eta = check_eta(eta)
    shapes = {np.shape(g) for g in grams}
    if len(shapes) != 1:
        raise ValueError(f"Gram matrices differ in shape: {sorted(shapes)}")
    if len(eta) != len(grams):
        raise ValueError(f"{len(eta)} weights for {len(grams)} kernels")
    return np.tensordot(eta, np.asarray(grams), axes=1)
