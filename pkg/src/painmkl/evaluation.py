"""Cross-validation protocol: balancing, stratified folds, grid search, metrics, t-tests.

Everything fitted inside a fold (class balancing, descriptors and clusters,
scaler, kernel widths, hyperparameters) sees training rows only.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import FORMAT_VERSION, __version__
from .bspline import LambdaPolicy
from .cluster import TaskAssignment, assign_tasks
from .features import FeatureTable, featurize, fit_scaler, session_descriptor, session_descriptors
from .kernels import GAMMA_POLICIES, KernelSpec, channel_grams, resolve_gammas
from .mtmkl import FitOptions, fit_arrays, predict, scores_from_cross_grams

logger = logging.getLogger(__name__)

PAPER_GRID = tuple(10.0**k for k in range(-4, 4))


def balance(y, seed: int = 0) -> np.ndarray:
    """Indices keeping all of the minority class and an equal random subset of the majority.

    Returned in ascending (original) order.
    """
    y = np.asarray(y)
    pos, neg = np.nonzero(y == 1)[0], np.nonzero(y == -1)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes are needed to balance")
    rng = np.random.default_rng(seed)
    if len(pos) > len(neg):
        pos = rng.choice(pos, size=len(neg), replace=False)
    elif len(neg) > len(pos):
        neg = rng.choice(neg, size=len(pos), replace=False)
    return np.sort(np.concatenate([pos, neg]))


def make_folds(y, session_ids, n_folds: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Folds stratified jointly by label and session.

    Each (label, session) stratum is shuffled and dealt round-robin, with the
    dealing position carried over between strata, so small strata merge
    gracefully and fold sizes differ by at most one.
    """
    y = np.asarray(y)
    sids = np.asarray(session_ids, dtype=object)
    n = len(y)
    if n < n_folds:
        raise ValueError(f"{n} windows cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    keys = sorted({(-int(l), str(s)) for l, s in zip(y, sids)})
    assign = np.empty(n, dtype=int)
    pos = 0
    for neg_label, sid in keys:
        idx = np.nonzero((y == -neg_label) & (sids == sid))[0]
        idx = rng.permutation(idx)
        assign[idx] = (pos + np.arange(len(idx))) % n_folds
        pos = (pos + len(idx)) % n_folds
    return [np.nonzero(assign == f)[0] for f in range(n_folds)]


def make_session_folds(session_ids, n_folds: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Folds that hold out whole sessions."""
    sids = np.asarray(session_ids, dtype=object)
    uniq = list(dict.fromkeys(sids))
    if len(uniq) < n_folds:
        raise ValueError(f"{len(uniq)} sessions cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    fold_of = {uniq[j]: i % n_folds for i, j in enumerate(order)}
    f = np.array([fold_of[s] for s in sids])
    return [np.nonzero(f == k)[0] for k in range(n_folds)]


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    f_score: float
    undefined: tuple[str, ...] = ()


def metrics(y_true, y_pred) -> Metrics:
    """Accuracy, sensitivity, specificity and F1 for +-1 labels; undefined ratios are 0 and flagged."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    if len(y_true) == 0:
        raise ValueError("no predictions")
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    tn = int(np.sum((y_true == -1) & (y_pred == -1)))
    fp = int(np.sum((y_true == -1) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == -1)))
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    sens = ratio(tp, tp + fn, "sensitivity")
    spec = ratio(tn, tn + fp, "specificity")
    f = ratio(2 * tp, 2 * tp + fp + fn, "f_score")
    return Metrics((tp + tn) / len(y_true), sens, spec, f, tuple(undefined))


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    degenerate: bool = False


def paired_ttest(acc_a, acc_b) -> TTest:
    """Two-tailed paired t-test on fold-wise differences ``a - b`` (df = n - 1).

    All-zero differences give ``t = 0, p = 1``; constant nonzero differences
    give an infinite t with the ``p = 0`` sentinel and ``degenerate`` set.
    """
    a, b = np.asarray(acc_a, dtype=float), np.asarray(acc_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd <= 1e-15 * max(1.0, np.abs(d).max()):
        if np.all(d == 0):
            return TTest(0.0, 1.0)
        return TTest(float(np.copysign(np.inf, mean)), 0.0, degenerate=True)
    t = mean / (sd / np.sqrt(n))
    p = 2 * stats.t.sf(abs(t), df=n - 1)
    return TTest(float(t), float(p))


@dataclass
class ExperimentConfig:
    feature_sets: tuple[str, ...] = ("spline",)
    T_values: tuple[int, ...] = (1, 2, 3)
    kernels: tuple[str, ...] = ("rbf",)
    regularizers: tuple[str, ...] = ("l1",)
    C_grid: tuple[float, ...] = PAPER_GRID
    nu_grid: tuple[float, ...] = PAPER_GRID
    outer_folds: int = 10
    inner_folds: int = 5
    seed: int = 0
    gamma_policy: str = "median"
    cluster_gamma: float = 0.10
    n_restarts: int = 10
    descriptor_filter: str = "positive"
    descriptor_normalization: str = "l1"
    cv_mode: str = "window"
    step_size: float = 0.01
    step_rule: str = "scaled"
    max_iter: int = 200
    tol: float = 1e-4
    lambda_fixed: float | None = None

    def fit_options(self) -> FitOptions:
        return FitOptions(self.step_size, self.max_iter, self.tol, self.step_rule)

    def lambda_policy(self) -> LambdaPolicy:
        return LambdaPolicy(fixed=self.lambda_fixed)

    def variants(self):
        for fs, k, reg, T in itertools.product(self.feature_sets, self.kernels, self.regularizers, self.T_values):
            yield Variant(fs, k, reg, int(T))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Variant:
    feature_set: str
    kernel: str
    regularizer: str
    T: int

    @property
    def name(self) -> str:
        return f"{self.feature_set}/{self.kernel}/{self.regularizer}/T={self.T}"


@dataclass
class FoldModel:
    model: object
    C: float
    nu: float
    grid_scores: dict
    assignment: TaskAssignment
    descriptors: dict  # session_id -> descriptor over all windows, for routing unseen sessions
    normalization: str = "l1"


def cluster_sessions(table: FeatureTable, T: int, config: ExperimentConfig) -> TaskAssignment:
    """Task assignment from the descriptors of the windows in ``table``."""
    desc = session_descriptors(table, config.descriptor_filter, config.descriptor_normalization)
    if T == 1:
        return TaskAssignment(1, {d.session_id: 0 for d in desc})
    if T > len(desc):
        raise ValueError(f"cannot form {T} tasks from {len(desc)} sessions")
    return assign_tasks(desc, T, config.cluster_gamma, config.seed, config.n_restarts).assignment


def grid_search(
    table: FeatureTable,
    assignment: TaskAssignment,
    kernel: KernelSpec,
    regularizer: str,
    config: ExperimentConfig,
    seed: int = 0,
) -> tuple[float, float, dict]:
    """Inner stratified CV over the (C, nu) grid.

    Picks the best mean inner accuracy; ties go to the smaller nu, then the
    smaller C. A cell whose fit fails scores 0 on that fold.
    """
    cells = [(C, nu) for C in config.C_grid for nu in config.nu_grid]
    if not cells:
        raise ValueError("empty hyperparameter grid")
    scores = {cell: [] for cell in cells}
    if len(cells) > 1:
        tasks_all = assignment.tasks_for(table.session_ids)
        for val_idx in make_folds(table.y, table.session_ids, config.inner_folds, seed):
            tr_idx = np.setdiff1d(np.arange(len(table)), val_idx)
            scaler = fit_scaler(table.X[tr_idx])
            Ztr, Zval = scaler.transform(table.X[tr_idx]), scaler.transform(table.X[val_idx])
            gammas = resolve_gammas(kernel, Ztr, seed)
            grams = channel_grams(kernel, Ztr, gammas=gammas)
            cross = channel_grams(kernel, Zval, Ztr, gammas=gammas)
            for C, nu in cells:
                try:
                    model = fit_arrays(Ztr, table.y[tr_idx], tasks_all[tr_idx], assignment.n_tasks, kernel,
                                       C, nu, regularizer, config.fit_options(), gammas=gammas, grams=grams)
                    s = scores_from_cross_grams(model, cross, tasks_all[val_idx])
                    acc = float(np.mean(np.where(s >= 0, 1, -1) == table.y[val_idx]))
                except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    logger.warning("grid cell C=%g nu=%g failed: %s", C, nu, exc)
                    acc = 0.0
                scores[(C, nu)].append(acc)
    mean = {cell: float(np.mean(v)) if v else 0.0 for cell, v in scores.items()}
    best = max(mean.values())
    winners = [cell for cell, v in mean.items() if v >= best - 1e-12]
    C_best, nu_best = min(winners, key=lambda c: (c[1], c[0]))
    return C_best, nu_best, mean


def train_fold(
    table: FeatureTable,
    train_idx,
    variant: Variant,
    config: ExperimentConfig,
    fold: int = 0,
) -> FoldModel:
    """Everything fitted for one outer fold, using only rows ``train_idx`` of ``table``."""
    train_idx = np.asarray(train_idx)
    keep = train_idx[balance(table.y[train_idx], config.seed + fold)]
    train = table.subset(keep)
    assignment = cluster_sessions(train, variant.T, config)
    gamma = config.gamma_policy if config.gamma_policy in GAMMA_POLICIES else float(config.gamma_policy)
    kernel = KernelSpec(variant.kernel, gamma)
    C, nu, grid = grid_search(train, assignment, kernel, variant.regularizer, config,
                              seed=config.seed + 1000 + fold)
    scaler = fit_scaler(train.X)
    Z = scaler.transform(train.X)
    model = fit_arrays(Z, train.y, assignment.tasks_for(train.session_ids), assignment.n_tasks,
                       kernel, C, nu, variant.regularizer, config.fit_options(),
                       gamma_seed=config.seed + fold)
    model.scaler = scaler
    model.assignment = assignment
    model.feature_set = variant.feature_set
    model.seeds.update({"balance": config.seed + fold, "inner_folds": config.seed + 1000 + fold,
                        "kmeans": config.seed})
    routing = {d.session_id: d.p for d in session_descriptors(train, "all", config.descriptor_normalization)}
    return FoldModel(model, C, nu, {f"{c:g},{n:g}": v for (c, n), v in grid.items()}, assignment, routing,
                     config.descriptor_normalization)


def route_sessions(fold_model: FoldModel, table: FeatureTable) -> np.ndarray:
    """Task per row; sessions unseen in training go to the task whose descriptor centroid is nearest."""
    asg = fold_model.assignment
    tasks = np.empty(len(table), dtype=int)
    known = asg.mapping
    centroids = {}
    for r in range(asg.n_tasks):
        members = [fold_model.descriptors[s] for s in asg.sessions_in(r) if s in fold_model.descriptors]
        centroids[r] = np.mean(members, axis=0)
    for sid in dict.fromkeys(table.session_ids):
        rows = table.session_ids == sid
        if sid in known:
            tasks[rows] = known[sid]
            continue
        p = session_descriptor(table.flat, table.y, table.session_ids, sid, "all", fold_model.normalization).p
        tasks[rows] = min(centroids, key=lambda r: float(np.sum((centroids[r] - p) ** 2)))
    return tasks


@dataclass
class VariantResult:
    variant: Variant
    fold_metrics: list = field(default_factory=list)
    chosen: list = field(default_factory=list)  # (C, nu) per fold
    eta: list = field(default_factory=list)  # T x M per fold
    cluster_accuracy: list = field(default_factory=list)  # per fold: {task: acc}
    cluster_counts: list = field(default_factory=list)
    test_counts: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.fold_metrics])

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(m, name) for m in self.fold_metrics])) if self.fold_metrics else float("nan")

    def mean_eta(self) -> np.ndarray:
        """Fold-averaged kernel weights, averaged over tasks."""
        return np.mean([np.mean(e, axis=0) for e in self.eta], axis=0)

    def to_dict(self) -> dict:
        return {
            "variant": asdict(self.variant),
            "name": self.variant.name,
            "folds": [
                {
                    "accuracy": m.accuracy, "sensitivity": m.sensitivity,
                    "specificity": m.specificity, "f_score": m.f_score, "undefined": list(m.undefined),
                    "C": c[0], "nu": c[1], "eta": np.asarray(e).tolist(),
                    "cluster_accuracy": {str(k): v for k, v in ca.items()},
                    "cluster_counts": {str(k): v for k, v in cc.items()},
                    "test_count": n, "assignment": a,
                }
                for m, c, e, ca, cc, n, a in zip(self.fold_metrics, self.chosen, self.eta, self.cluster_accuracy,
                                                 self.cluster_counts, self.test_counts, self.assignments)
            ],
            "mean": {k: self.mean(k) for k in ("accuracy", "sensitivity", "specificity", "f_score")},
            "failures": self.failures,
        }


@dataclass
class EvalReport:
    config: ExperimentConfig
    results: list
    ttests: list = field(default_factory=list)  # (name_a, name_b, TTest)
    config_hash: str | None = None  # overrides the experiment digest, e.g. with a run-config hash

    def result(self, **match) -> VariantResult:
        for r in self.results:
            if all(getattr(r.variant, k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def to_dict(self) -> dict:
        return {
            "library_version": __version__,
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash or self.config.digest(),
            "config": self.config.to_dict(),
            "variants": [r.to_dict() for r in self.results],
            "ttests": [{"a": a, "b": b, "t": t.t, "p": t.p, "degenerate": t.degenerate} for a, b, t in self.ttests],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True)

    def table(self) -> str:
        return format_table(self.to_dict())


def format_table(report: dict) -> str:
    """Rows kernel x regularizer x T, columns feature sets; mean accuracy (sd) over folds."""
    variants = report["variants"]
    fsets = list(dict.fromkeys(v["variant"]["feature_set"] for v in variants))
    rows = list(dict.fromkeys((v["variant"]["kernel"], v["variant"]["regularizer"], v["variant"]["T"]) for v in variants))
    cell = {}
    for v in variants:
        accs = [f["accuracy"] for f in v["folds"]]
        key = (v["variant"]["kernel"], v["variant"]["regularizer"], v["variant"]["T"], v["variant"]["feature_set"])
        cell[key] = f"{np.mean(accs):.3f} ({np.std(accs, ddof=1) if len(accs) > 1 else 0.0:.3f})" if accs else "failed"
    head = f"{'kernel':<8}{'reg':<5}{'T':>3}  " + "".join(f"{fs:>18}" for fs in fsets)
    lines = [f"# config {report['config_hash']}", head, "-" * len(head)]
    for k, reg, T in rows:
        lines.append(f"{k:<8}{reg:<5}{T:>3}  " + "".join(f"{cell.get((k, reg, T, fs), '-'):>18}" for fs in fsets))
    if report["ttests"]:
        lines.append("")
        lines.append("paired two-tailed t-tests on fold accuracies")
        for t in report["ttests"]:
            lines.append(f"  {t['a']} vs {t['b']}: t = {t['t']:.4f}, p = {t['p']:.4g}")
    return "\n".join(lines) + "\n"


def _evaluate_fold(table, test_idx, fold_model: FoldModel):
    test = table.subset(test_idx)
    tasks = route_sessions(fold_model, test)
    _, pred, _ = predict(fold_model.model, test.X, test.session_ids, tasks=tasks)
    per_acc, per_n = {}, {}
    for r in range(fold_model.assignment.n_tasks):
        rows = tasks == r
        per_n[r] = int(rows.sum())
        if rows.any():
            per_acc[r] = float(np.mean(pred[rows] == test.y[rows]))
    return metrics(test.y, pred), per_acc, per_n


def _fold_job(table, test_idx, variant, config, fold):
    train_idx = np.setdiff1d(np.arange(len(table)), test_idx)
    try:
        fm = train_fold(table, train_idx, variant, config, fold)
        m, per_acc, per_n = _evaluate_fold(table, test_idx, fm)
    except (ValueError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        return fold, None, str(exc)
    out = {
        "metrics": m, "chosen": (fm.C, fm.nu), "eta": fm.model.eta, "per_acc": per_acc,
        "per_n": per_n, "n_test": len(test_idx), "assignment": dict(fm.assignment.mapping),
    }
    return fold, out, None


def run_experiment(windows, config: ExperimentConfig, tables: dict | None = None, progress=None,
                   jobs: int = 1) -> EvalReport:
    """Outer CV for every variant in ``config``; identical folds across variants.

    With ``jobs > 1`` outer folds run in worker processes; results are keyed
    by fold index, so the report does not depend on ``jobs``.
    """
    tables = dict(tables or {})
    for fs in config.feature_sets:
        if fs not in tables:
            tables[fs] = featurize(windows, fs, lambda_policy=config.lambda_policy())
    any_table = tables[config.feature_sets[0]]
    if config.cv_mode == "window":
        folds = make_folds(any_table.y, any_table.session_ids, config.outer_folds, config.seed)
    elif config.cv_mode == "session":
        folds = make_session_folds(any_table.session_ids, config.outer_folds, config.seed)
    else:
        raise ValueError(f"unknown cv_mode {config.cv_mode!r}")

    results = []
    for variant in config.variants():
        table = tables[variant.feature_set]
        args = [(table, test_idx, variant, config, f) for f, test_idx in enumerate(folds)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(_fold_job, *zip(*args)))
        else:
            outcomes = [_fold_job(*a) for a in args]
        res = VariantResult(variant)
        for f, out, err in sorted(outcomes, key=lambda o: o[0]):
            if err is not None:
                logger.error("%s fold %d failed: %s", variant.name, f, err)
                res.failures.append({"fold": f, "error": err})
                continue
            res.fold_metrics.append(out["metrics"])
            res.chosen.append(out["chosen"])
            res.eta.append(out["eta"])
            res.cluster_accuracy.append(out["per_acc"])
            res.cluster_counts.append(out["per_n"])
            res.test_counts.append(out["n_test"])
            res.assignments.append(out["assignment"])
            if progress:
                progress(variant, f, out["metrics"])
        results.append(res)

    ttests = []
    for a, b in itertools.combinations(results, 2):
        va, vb = a.variant, b.variant
        same = (va.feature_set, va.kernel, va.regularizer) == (vb.feature_set, vb.kernel, vb.regularizer)
        if same and len(a.fold_metrics) == len(b.fold_metrics) == len(folds):
            hi, lo = (b, a) if vb.T > va.T else (a, b)
            ttests.append((hi.variant.name, lo.variant.name, paired_ttest(hi.accuracies, lo.accuracies)))
    return EvalReport(config, results, ttests)
