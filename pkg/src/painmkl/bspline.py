"""Clamped uniform b-spline bases and penalized least-squares smoothing.

The smoother minimizes ``||w - Phi c||^2 + lam * c' R c`` where ``R`` is the
curvature Gram matrix ``R_jk = int B_j''(t) B_k''(t) dt``; ``lam`` is picked
by generalized cross-validation.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import linalg

DEFAULT_LAMBDA_GRID = (0.0,) + tuple(10.0**k for k in range(-6, 5))
GCV_TIE_TOL = 1e-12


@dataclass(frozen=True)
class SplineBasis:
    order: int
    n_coeffs: int
    knots: tuple[float, ...]

    @property
    def t_min(self) -> float:
        return self.knots[0]

    @property
    def t_max(self) -> float:
        return self.knots[-1]

    @property
    def n_intervals(self) -> int:
        return self.n_coeffs - self.order + 1

    @property
    def interior_knots(self) -> tuple[float, ...]:
        return self.knots[self.order : self.n_coeffs]


def build_basis(m: int = 4, K: int = 10, t_min: float = 0.0, t_max: float = 20.0) -> SplineBasis:
    """Order-``m`` basis with ``K`` functions on equally spaced knots.

    ``K = m + L - 1`` with ``L`` subintervals, so there are ``K - m`` interior
    knots and the boundary knots are repeated ``m`` times.
    """
    if m < 1:
        raise ValueError("order must be >= 1")
    if K < m:
        raise ValueError(f"need n_coeffs >= order, got K={K} < m={m}")
    if not t_max > t_min:
        raise ValueError("t_max must exceed t_min")
    L = K - m + 1
    breaks = np.linspace(t_min, t_max, L + 1)
    breaks[0], breaks[-1] = t_min, t_max
    knots = np.concatenate([np.full(m - 1, t_min), breaks, np.full(m - 1, t_max)])
    return SplineBasis(m, K, tuple(float(k) for k in knots))


def _ratio(num, den):
    # 0/0 terms of the recursion are defined as zero
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _bsplines(knots: np.ndarray, x: np.ndarray, k: int, deriv: int) -> np.ndarray:
    """All order-``k`` b-splines (or their ``deriv``-th derivative) at ``x``."""
    n_fun = len(knots) - k
    if deriv == 0:
        if k == 1:
            left, right = knots[:-1], knots[1:]
            B = ((x[:, None] >= left) & (x[:, None] < right)).astype(float)
            # close the last nonempty interval on the right
            last = np.nonzero(right > left)[0][-1]
            B[x == knots[-1], last] = 1.0
            return B
        lower = _bsplines(knots, x, k - 1, 0)
        t_j, t_jk1 = knots[:n_fun], knots[k - 1 : k - 1 + n_fun]
        t_j1, t_jk = knots[1 : 1 + n_fun], knots[k : k + n_fun]
        a = _ratio(x[:, None] - t_j, t_jk1 - t_j)
        b = _ratio(t_jk - x[:, None], t_jk - t_j1)
        return a * lower[:, :n_fun] + b * lower[:, 1 : n_fun + 1]
    if k == 1:
        return np.zeros((len(x), n_fun))
    lower = _bsplines(knots, x, k - 1, deriv - 1)
    d1 = knots[k - 1 : k - 1 + n_fun] - knots[:n_fun]
    d2 = knots[k : k + n_fun] - knots[1 : 1 + n_fun]
    return (k - 1) * (_ratio(lower[:, :n_fun], d1) - _ratio(lower[:, 1 : n_fun + 1], d2))


def eval_basis(basis: SplineBasis, t, deriv: int = 0) -> np.ndarray:
    """Evaluate the basis (Cox-de Boor) at ``t``; returns a ``len(t) x K`` matrix."""
    x = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.t_min, basis.t_max
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError(f"evaluation points must lie in [{lo}, {hi}]")
    return _bsplines(np.asarray(basis.knots), x, basis.order, deriv)


def roughness_matrix(basis: SplineBasis) -> np.ndarray:
    """Curvature penalty ``R_jk = int B_j'' B_k'' dt``, integrated exactly by Gauss-Legendre."""
    if basis.order < 3:
        raise ValueError("curvature penalty needs order >= 3")
    breaks = np.unique(basis.knots)
    # B'' has degree m-3, so the products have degree 2m-6 < 2m-1
    nodes, weights = np.polynomial.legendre.leggauss(basis.order)
    half = np.diff(breaks) / 2
    mid = (breaks[:-1] + breaks[1:]) / 2
    x = (mid[:, None] + half[:, None] * nodes).ravel()
    w = (half[:, None] * weights).ravel()
    D2 = eval_basis(basis, x, deriv=2)
    R = D2.T @ (w[:, None] * D2)
    return (R + R.T) / 2


@dataclass(frozen=True)
class SmoothFit:
    coefficients: np.ndarray
    lam: float
    sse: float
    df: float
    gcv: float


def gcv_score(sse, df, n):
    """``(n / (n - df)) * (sse / (n - df))``; +inf once ``df >= n``."""
    sse, df = np.asarray(sse, dtype=float), np.asarray(df, dtype=float)
    resid_df = n - df
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(resid_df > 0, n * sse / resid_df**2, np.inf)
    return g if g.ndim else float(g)


def _check_abscissae(basis, w, t):
    w = np.asarray(w, dtype=float)
    t = np.asarray(t, dtype=float)
    if w.shape != t.shape or w.ndim != 1:
        raise ValueError("w and t must be 1-D sequences of equal length")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t must be strictly increasing")
    return w, t


def _penalty_root(basis: SplineBasis) -> np.ndarray:
    """``P`` with ``P'P = R``."""
    d, V = linalg.eigh(roughness_matrix(basis))
    # round-off eigenvalues of the linear null space would be amplified by sqrt(lam)
    d = np.where(d > 1e-10 * d.max(), d, 0.0)
    return np.sqrt(d)[:, None] * V.T


def smooth(basis: SplineBasis, w, t, lam: float) -> SmoothFit:
    """Penalized least-squares fit of samples ``w`` taken at times ``t``.

    Solved as the augmented least-squares problem ``[Phi; sqrt(lam) P] c ~ [w; 0]``
    by QR, which keeps ``df`` accurate for very large ``lam``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    w, t = _check_abscissae(basis, w, t)
    Phi = eval_basis(basis, t)
    n, K = Phi.shape
    X = Phi if lam == 0 else np.vstack([Phi, np.sqrt(lam) * _penalty_root(basis)])
    if X.shape[0] < K:
        raise np.linalg.LinAlgError(f"normal matrix is singular (W={n}, K={K}, lambda={lam})")
    Q, Rq = np.linalg.qr(X)
    diag = np.abs(np.diag(Rq))
    if diag.min() <= 1e-12 * diag.max():
        raise np.linalg.LinAlgError(f"normal matrix is singular (W={n}, K={K}, lambda={lam})")
    Q1 = Q[:n]
    c = linalg.solve_triangular(Rq, Q1.T @ w)
    resid = w - Phi @ c
    sse = float(resid @ resid)
    # hat matrix is Q1 Q1'
    df = float(np.sum(Q1 * Q1))
    return SmoothFit(c, float(lam), sse, df, gcv_score(sse, df, n))


def _pick(gcv: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the GCV minimum along the last axis; near-ties go to the larger lambda."""
    best = np.min(gcv, axis=-1, keepdims=True)
    tied = gcv <= best + GCV_TIE_TOL * np.maximum(1.0, np.abs(best))
    lam_if_tied = np.where(tied, grid, -np.inf)
    return np.argmax(lam_if_tied, axis=-1)


def select_lambda(basis: SplineBasis, w, t, grid=DEFAULT_LAMBDA_GRID) -> tuple[float, SmoothFit]:
    """Grid point minimizing GCV (ties broken toward the smoother, larger lambda)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("lambda grid is empty")
    fits = []
    for lam in grid:
        try:
            fits.append(smooth(basis, w, t, lam))
        except np.linalg.LinAlgError:
            fits.append(None)
    gcv = np.array([f.gcv if f is not None else np.inf for f in fits])
    if not np.any(np.isfinite(gcv)):
        raise ValueError("GCV is infinite at every grid point")
    i = int(_pick(gcv, grid))
    return float(grid[i]), fits[i]


class PenalizedSmoother:
    """Batch smoother for many series sharing one basis and one time grid.

    Uses the generalized eigenbasis ``R v = d (Phi'Phi) v``, so for each lambda
    the hat matrix trace is ``sum 1 / (1 + lam d)``.
    """

    chunk = 256

    def __init__(self, basis: SplineBasis, t):
        t = np.asarray(t, dtype=float)
        if len(t) < basis.n_coeffs:
            raise ValueError(f"need at least K={basis.n_coeffs} samples, got {len(t)}")
        self.basis = basis
        self.t = t
        self.Phi = eval_basis(basis, t)
        self.R = roughness_matrix(basis) if basis.order >= 3 else np.zeros((basis.n_coeffs,) * 2)
        d, V = linalg.eigh(self.R, self.Phi.T @ self.Phi)
        self.eigvals = np.where(d > 1e-10 * max(d.max(), 0.0), d, 0.0)
        self.V = V

    def df(self, lam: float) -> float:
        return float(np.sum(1.0 / (1.0 + lam * self.eigvals)))

    def _fit(self, Y: np.ndarray, grid: np.ndarray):
        """Coefficients, SSE and GCV for every (series, lambda) pair."""
        proj = Y @ self.Phi @ self.V  # (n_series, K)
        shrink = 1.0 / (1.0 + grid[:, None] * self.eigvals[None, :])  # (n_grid, K)
        coef = np.einsum("gk,sk,jk->sgj", shrink, proj, self.V)
        resid = Y[:, None, :] - coef @ self.Phi.T
        sse = np.einsum("sgw,sgw->sg", resid, resid)
        df = shrink.sum(axis=1)
        return coef, sse, df, gcv_score(sse, df[None, :], Y.shape[-1])

    def fit(self, Y, lam: float) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        shrink = 1.0 / (1.0 + float(lam) * self.eigvals)
        return ((Y @ self.Phi @ self.V) * shrink) @ self.V.T

    def fit_gcv(self, Y, grid=DEFAULT_LAMBDA_GRID) -> tuple[np.ndarray, np.ndarray]:
        """Per-series GCV selection; returns ``(coefficients, chosen lambdas)``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        grid = np.asarray(grid, dtype=float)
        coefs, lams = [], []
        for start in range(0, len(Y), self.chunk):
            coef, _, _, gcv = self._fit(Y[start : start + self.chunk], grid)
            if not np.all(np.any(np.isfinite(gcv), axis=1)):
                raise ValueError("GCV is infinite at every grid point")
            idx = _pick(gcv, grid)
            coefs.append(coef[np.arange(len(idx)), idx])
            lams.append(grid[idx])
        return np.concatenate(coefs), np.concatenate(lams)


@dataclass(frozen=True)
class LambdaPolicy:
    """Fixed smoothing parameter, or per-series GCV over ``grid`` when ``fixed`` is None."""

    fixed: float | None = None
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID


@functools.lru_cache(maxsize=16)
def _smoother(basis: SplineBasis, n: int) -> PenalizedSmoother:
    return PenalizedSmoother(basis, np.linspace(basis.t_min, basis.t_max, n))


def spline_features(basis: SplineBasis, window, lambda_policy: LambdaPolicy = LambdaPolicy()) -> np.ndarray:
    """``M x K`` coefficient matrix, one smoothed fit per channel of the window.

    Samples are placed on an even grid spanning the basis domain.
    """
    samples = window.samples if hasattr(window, "samples") else np.asarray(window, dtype=float)
    samples = np.atleast_2d(samples)
    sm = _smoother(basis, samples.shape[1])
    if lambda_policy.fixed is not None:
        return sm.fit(samples, lambda_policy.fixed)
    coef, _ = sm.fit_gcv(samples, lambda_policy.grid)
    return coef
