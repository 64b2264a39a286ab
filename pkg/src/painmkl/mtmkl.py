"""Multi-task multiple kernel learning with LSSVM base learners.

Each task ``r`` owns a kernel-weight vector ``eta[r]`` on the probability
simplex over the M channel kernels. Training alternates between solving every
task's LSSVM against its combined kernel and a projected gradient step on the
weights, where tasks are coupled through a regularizer ``omega``.

The surrogate minimized over the weights is ``sum_r J_r(alpha_r, eta_r) - omega(eta)``
with ``J_r = y'alpha - 1/2 alpha'(K_eta + I/C) alpha`` at the current dual solution;
its partial derivative with respect to ``eta[r]`` is
``-2 * omega_grad(eta, r) - 1/2 [alpha' K_m alpha]_m``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import lssvm
from .cluster import TaskAssignment
from .features import Scaler, fit_scaler
from .kernels import KernelSpec, channel_grams, combine, resolve_gammas

logger = logging.getLogger(__name__)

REGULARIZERS = ("l1", "l2")


def omega(eta, kind: str, nu: float) -> float:
    """Task-coupling term over all ordered task pairs.

    ``l1``: ``-nu sum_r sum_s eta_r . eta_s``;
    ``l2``: ``-nu sum_r sum_s ||eta_r - eta_s||^2``.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if kind == "l1":
        total = eta.sum(axis=0)
        return float(-nu * total @ total)
    if kind == "l2":
        diff = eta[:, None, :] - eta[None, :, :]
        return float(-nu * np.sum(diff**2))
    raise ValueError(f"unknown regularizer {kind!r}")


def omega_grad(eta, kind: str, nu: float, r: int) -> np.ndarray:
    """Per-task gradient of ``omega`` for row ``r``.

    ``l1``: ``-nu sum_s eta_s``; ``l2``: ``-nu sum_s 2 (eta_r - eta_s)``.
    Each unordered pair appears twice in ``omega``, so the full partial
    derivative of :func:`omega` is twice this value.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if kind == "l1":
        return -nu * eta.sum(axis=0)
    if kind == "l2":
        return -nu * 2 * (len(eta) * eta[r] - eta.sum(axis=0))
    raise ValueError(f"unknown regularizer {kind!r}")


def quadratic_terms(alpha, grams) -> np.ndarray:
    """``alpha' K_m alpha`` for every channel ``m`` of the (M, N, N) stack."""
    return np.einsum("mij,i,j->m", grams, alpha, alpha, optimize=True)


def objective_grad(eta_r, dual: lssvm.LssvmDual, grams, y, kind: str, nu: float, eta_all, r: int) -> np.ndarray:
    """Gradient of the weight-step surrogate with respect to ``eta[r]``.

    With multipliers ``a = y * alpha`` the data term ``-1/2 a' Y K_m Y a``
    equals ``-1/2 alpha' K_m alpha``.
    """
    a = np.asarray(y, dtype=float) * dual.alpha
    data = 0.5 * quadratic_terms(np.asarray(y, dtype=float) * a, grams)
    return -2.0 * omega_grad(eta_all, kind, nu, r) - data


def task_objective(dual: lssvm.LssvmDual, K, y) -> float:
    return lssvm.dual_objective(dual, K, y)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{x : x >= 0, sum x = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project non-finite values")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    x = np.maximum(v - theta, 0.0)
    # absorb the rounding residue into the largest entry so the sum is exact to ~1 ulp
    x[np.argmax(x)] += 1.0 - x.sum()
    return x


STEP_RULES = ("fixed", "scaled")


@dataclass(frozen=True)
class FitOptions:
    """``step_rule='fixed'`` steps by ``step_size * grad``; ``'scaled'`` divides each
    task's gradient by its largest absolute component first, so ``step_size`` is
    the largest per-iteration weight change before projection. Dividing by a
    positive scalar leaves the fixed points of the projected step unchanged.
    """

    step_size: float = 0.01
    max_iter: int = 200
    tol: float = 1e-4
    step_rule: str = "scaled"

    def __post_init__(self):
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class IterationTrace:
    objective: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    max_kkt_residual: list = field(default_factory=list)
    simplex_error: list = field(default_factory=list)


@dataclass
class MtMklModel:
    eta: np.ndarray  # (T, M)
    duals: list
    kernel_spec: KernelSpec
    gammas: np.ndarray
    C: float
    nu: float
    regularizer: str
    X_train: list  # per-task standardized training blocks (N_r, M, d)
    y_train: list
    scaler: Scaler | None = None
    assignment: TaskAssignment | None = None
    feature_set: str = ""
    options: FitOptions = FitOptions()
    n_iter: int = 0
    converged: bool = False
    trace: IterationTrace = field(default_factory=IterationTrace)
    seeds: dict = field(default_factory=dict)
    train_rows: list = field(default_factory=list)  # per-task row indices into the fitted X

    @property
    def n_tasks(self) -> int:
        return len(self.eta)

    def to_dict(self) -> dict:
        from . import FORMAT_VERSION, __version__

        return {
            "library_version": __version__,
            "format_version": FORMAT_VERSION,
            "feature_set": self.feature_set,
            "kernel": {"kind": self.kernel_spec.kind, "gamma_policy": self.kernel_spec.gamma},
            "gammas": self.gammas.tolist(),
            "C": self.C,
            "nu": self.nu,
            "regularizer": self.regularizer,
            "options": vars(self.options).copy(),
            "n_iter": self.n_iter,
            "converged": self.converged,
            "seeds": self.seeds,
            "eta": self.eta.tolist(),
            "tasks": [
                {"alpha": d.alpha.tolist(), "b": d.b, "X": X.tolist(), "y": y.tolist()}
                for d, X, y in zip(self.duals, self.X_train, self.y_train)
            ],
            "scaler": None if self.scaler is None else {
                "mean": self.scaler.mean.tolist(), "scale": self.scaler.scale.tolist()},
            "assignment": None if self.assignment is None else {
                "n_tasks": self.assignment.n_tasks, "map": self.assignment.mapping},
            "trace": {"objective": self.trace.objective, "delta": self.trace.delta},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MtMklModel":
        gamma = d["kernel"]["gamma_policy"]
        tasks = d["tasks"]
        return cls(
            eta=np.array(d["eta"]),
            duals=[lssvm.LssvmDual(np.array(t["alpha"]), t["b"], d["C"]) for t in tasks],
            kernel_spec=KernelSpec(d["kernel"]["kind"], gamma),
            gammas=np.array(d["gammas"]),
            C=d["C"],
            nu=d["nu"],
            regularizer=d["regularizer"],
            X_train=[np.array(t["X"]) for t in tasks],
            y_train=[np.array(t["y"], dtype=int) for t in tasks],
            scaler=None if d["scaler"] is None else Scaler(np.array(d["scaler"]["mean"]), np.array(d["scaler"]["scale"])),
            assignment=None if d["assignment"] is None else TaskAssignment(d["assignment"]["n_tasks"], d["assignment"]["map"]),
            feature_set=d["feature_set"],
            options=FitOptions(**d["options"]),
            n_iter=d["n_iter"],
            converged=d["converged"],
            trace=IterationTrace(d["trace"]["objective"], d["trace"]["delta"]),
            seeds=d["seeds"],
        )


def fit_arrays(
    X,
    y,
    task_index,
    n_tasks: int,
    kernel_spec: KernelSpec = KernelSpec(),
    C: float = 1.0,
    nu: float = 0.0,
    regularizer: str = "l1",
    options: FitOptions = FitOptions(),
    gammas=None,
    gamma_seed: int = 0,
    grams=None,
) -> MtMklModel:
    """Alternating optimization on already-scaled features ``X`` (N, M, d).

    ``grams`` may hold the precomputed (M, N, N) channel Grams of all rows of
    ``X`` (built with ``gammas``); task blocks are sliced from it.
    """
    if regularizer not in REGULARIZERS:
        raise ValueError(f"unknown regularizer {regularizer!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    task_index = np.asarray(task_index, dtype=int)
    M = X.shape[1]
    if gammas is None:
        gammas = resolve_gammas(kernel_spec, X, gamma_seed)
    Xs, ys, task_grams = [], [], []
    for r in range(n_tasks):
        rows = task_index == r
        yr = y[rows]
        if not (np.any(yr == 1) and np.any(yr == -1)):
            raise ValueError(f"task {r} needs both classes, has labels {sorted(set(yr.tolist()))}")
        Xs.append(X[rows])
        ys.append(yr)
        if grams is None:
            task_grams.append(channel_grams(kernel_spec, X[rows], gammas=gammas))
        else:
            idx = np.nonzero(rows)[0]
            task_grams.append(grams[:, idx[:, None], idx[None, :]])
    grams = task_grams

    eta = np.full((n_tasks, M), 1.0 / M)
    trace = IterationTrace()
    converged = False
    it = 0
    for it in range(1, options.max_iter + 1):
        duals = [lssvm.solve(combine(grams[r], eta[r]), ys[r], C) for r in range(n_tasks)]
        obj = sum(task_objective(duals[r], combine(grams[r], eta[r]), ys[r]) for r in range(n_tasks))
        obj -= omega(eta, regularizer, nu)
        if not np.isfinite(obj):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        new = np.empty_like(eta)
        for r in range(n_tasks):
            g = objective_grad(eta[r], duals[r], grams[r], ys[r], regularizer, nu, eta, r)
            if options.step_rule == "scaled":
                peak = np.max(np.abs(g))
                g = g / peak if peak > 0 else g
            new[r] = project_simplex(eta[r] - options.step_size * g)
        delta = float(np.max(np.abs(new - eta)))
        eta = new
        trace.objective.append(float(obj))
        trace.delta.append(delta)
        trace.max_kkt_residual.append(max(d.residual for d in duals))
        trace.simplex_error.append(float(np.max(np.abs(eta.sum(axis=1) - 1))))
        if delta < options.tol:
            converged = True
            break
    duals = [lssvm.solve(combine(grams[r], eta[r]), ys[r], C) for r in range(n_tasks)]
    return MtMklModel(
        eta=eta, duals=duals, kernel_spec=kernel_spec, gammas=np.asarray(gammas, dtype=float),
        C=float(C), nu=float(nu), regularizer=regularizer, X_train=Xs, y_train=ys,
        options=options, n_iter=it, converged=converged, trace=trace,
        seeds={"gamma_seed": gamma_seed},
        train_rows=[np.nonzero(task_index == r)[0] for r in range(n_tasks)],
    )


def fit(
    table,
    assignment: TaskAssignment,
    kernel_spec: KernelSpec = KernelSpec(),
    C: float = 1.0,
    nu: float = 0.0,
    regularizer: str = "l1",
    options: FitOptions = FitOptions(),
    gamma_seed: int = 0,
) -> MtMklModel:
    """Standardize, route windows to tasks by session and run :func:`fit_arrays`."""
    scaler = fit_scaler(table.X)
    Z = scaler.transform(table.X)
    tasks = assignment.tasks_for(table.session_ids)
    model = fit_arrays(Z, table.y, tasks, assignment.n_tasks, kernel_spec, C, nu, regularizer,
                       options, gamma_seed=gamma_seed)
    model.scaler = scaler
    model.assignment = assignment
    model.feature_set = table.feature_set
    return model


def task_scores(model: MtMklModel, Z, task: int, eta=None) -> np.ndarray:
    """Decision values of task ``task`` for scaled rows ``Z`` (n, M, d)."""
    eta = model.eta[task] if eta is None else eta
    cross = channel_grams(model.kernel_spec, np.asarray(Z, dtype=float), model.X_train[task], model.gammas)
    scores, _ = lssvm.predict(model.duals[task], combine(cross, eta))
    return scores


def scores_from_cross_grams(model: MtMklModel, cross, tasks) -> np.ndarray:
    """Scores from precomputed (M, n, N) cross-Grams against all fitted rows."""
    tasks = np.asarray(tasks, dtype=int)
    scores = np.empty(cross.shape[1])
    for r in np.unique(tasks):
        rows = np.nonzero(tasks == r)[0]
        cols = model.train_rows[r]
        K = combine(cross[:, rows[:, None], cols[None, :]], model.eta[r])
        scores[rows], _ = lssvm.predict(model.duals[r], K)
    return scores


def predict(model: MtMklModel, X, session_ids, tasks=None):
    """Route raw feature rows to their session's task and score them.

    Returns ``(scores, labels, tasks)``. ``tasks`` may be given explicitly to
    bypass the session lookup (e.g. for sessions routed by nearest centroid).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    Z = model.scaler.transform(X) if model.scaler is not None else X
    if tasks is None:
        if model.assignment is None:
            raise ValueError("model has no task assignment; pass tasks explicitly")
        if isinstance(session_ids, str):
            session_ids = [session_ids] * len(Z)
        tasks = model.assignment.tasks_for(session_ids)
    tasks = np.asarray(tasks, dtype=int)
    scores = np.empty(len(Z))
    for r in np.unique(tasks):
        rows = tasks == r
        scores[rows] = task_scores(model, Z[rows], int(r))
    return scores, np.where(scores >= 0, 1, -1), tasks
