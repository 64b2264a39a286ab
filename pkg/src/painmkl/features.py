"""Per-channel window features, standardization and per-session descriptors.

Feature layout is channel-major: for each channel the spline coefficients
come first and then the 11 statistics (``STAT_NAMES`` order), so a window of
the combined set flattens to ``M * (K + 11)`` values.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .bspline import LambdaPolicy, SplineBasis, build_basis, spline_features
from .ingest import LabeledWindow, atomic_write_text

STAT_NAMES = (
    "mean", "std", "max", "min", "range", "slope",
    "argmax", "argmin", "kurtosis", "skewness", "auc",
)
FEATURE_SETS = ("spline", "stats", "combined")


def stat_features(series, dt: float) -> np.ndarray:
    """The 11 window statistics, computed along the last axis.

    Standard deviation is sample-normalized (N-1); kurtosis is Fisher excess
    kurtosis and skewness the Fisher-Pearson coefficient. On zero-variance
    input std, kurtosis, skewness and slope are 0. Locations of the extrema are
    0-based sample indices (first occurrence). Area uses the trapezoid rule.
    """
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not dt > 0:
        raise ValueError("dt must be positive")
    mean = x.mean(axis=-1)
    std = x.std(axis=-1, ddof=1)
    mx, mn = x.max(axis=-1), x.min(axis=-1)
    t = np.arange(n) * dt
    tc = t - t.mean()
    slope = (x - mean[..., None]) @ tc / (tc @ tc)
    flat = np.ptp(x, axis=-1) == 0
    # flat rows are overwritten below, so scipy's precision warning is noise
    with np.errstate(divide="ignore", invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        kurt = stats.kurtosis(x, axis=-1, fisher=True, bias=True)
        skew = stats.skew(x, axis=-1, bias=True)
    kurt = np.where(flat, 0.0, kurt)
    skew = np.where(flat, 0.0, skew)
    slope = np.where(flat, 0.0, slope)
    std = np.where(flat, 0.0, std)
    auc = np.trapezoid(x, dx=dt, axis=-1)
    return np.stack(
        [mean, std, mx, mn, mx - mn, slope,
         np.argmax(x, axis=-1).astype(float), np.argmin(x, axis=-1).astype(float),
         kurt, skew, auc],
        axis=-1,
    )


@dataclass(frozen=True)
class FeatureVector:
    session_id: str
    label: int
    blocks: np.ndarray  # (M, d)
    feature_set: str

    @property
    def values(self) -> np.ndarray:
        return self.blocks.reshape(-1)


@dataclass
class FeatureTable:
    """Stacked feature vectors of many windows."""

    X: np.ndarray  # (N, M, d)
    y: np.ndarray  # (N,) of +-1
    session_ids: np.ndarray  # (N,) of str
    feature_set: str
    onsets: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        self.session_ids = np.asarray(self.session_ids, dtype=object)
        if self.onsets is None:
            self.onsets = np.zeros(len(self.y))

    def __len__(self):
        return len(self.y)

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.X.reshape(len(self.X), -1)

    def subset(self, idx) -> "FeatureTable":
        idx = np.asarray(idx)
        return FeatureTable(self.X[idx], self.y[idx], self.session_ids[idx], self.feature_set, self.onsets[idx])

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(s, int(l), x, self.feature_set) for s, l, x in zip(self.session_ids, self.y, self.X)]


def _blocks(samples: np.ndarray, rate: float, feature_set: str, basis, lambda_policy) -> np.ndarray:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; expected one of {FEATURE_SETS}")
    parts = []
    if feature_set in ("spline", "combined"):
        parts.append(spline_features(basis, samples, lambda_policy))
    if feature_set in ("stats", "combined"):
        parts.append(stat_features(samples, 1.0 / rate))
    return np.concatenate(parts, axis=1)


def default_basis(window: LabeledWindow) -> SplineBasis:
    return build_basis(4, 10, 0.0, window.samples.shape[1] / window.sample_rate_hz)


def assemble(
    window: LabeledWindow,
    feature_set: str = "spline",
    basis: SplineBasis | None = None,
    lambda_policy: LambdaPolicy = LambdaPolicy(),
) -> FeatureVector:
    basis = basis or default_basis(window)
    blocks = _blocks(window.samples, window.sample_rate_hz, feature_set, basis, lambda_policy)
    return FeatureVector(window.session_id, window.label, blocks, feature_set)


def featurize(
    windows: list[LabeledWindow],
    feature_set: str = "spline",
    basis: SplineBasis | None = None,
    lambda_policy: LambdaPolicy = LambdaPolicy(),
) -> FeatureTable:
    """Feature table for a list of windows of equal shape, batched over windows."""
    if not windows:
        raise ValueError("no windows to featurize")
    basis = basis or default_basis(windows[0])
    S = np.stack([w.samples for w in windows])  # (N, M, W)
    N, M, W = S.shape
    rates = {w.sample_rate_hz for w in windows}
    if len(rates) != 1:
        raise ValueError("windows have different sample rates")
    blocks = _blocks(S.reshape(N * M, W), rates.pop(), feature_set, basis, lambda_policy)
    return FeatureTable(
        blocks.reshape(N, M, -1),
        [w.label for w in windows],
        [w.session_id for w in windows],
        feature_set,
        np.array([w.onset_s for w in windows]),
    )


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray  # 0 marks a zero-variance dimension

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        shape = X.shape
        Z = X.reshape(shape[0], -1) - self.mean
        ok = self.scale > 0
        Z = np.where(ok, Z / np.where(ok, self.scale, 1.0), 0.0)
        return Z.reshape(shape)

    def inverse_transform(self, Z):
        Z = np.asarray(Z, dtype=float)
        shape = Z.shape
        return (Z.reshape(shape[0], -1) * self.scale + self.mean).reshape(shape)

    def to_text(self) -> str:
        lines = [f"n_dims = {len(self.mean)}"]
        for i, (m, s) in enumerate(zip(self.mean, self.scale)):
            lines.append(f"mean.{i} = {float(m)!r}")
            lines.append(f"scale.{i} = {float(s)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Scaler":
        kv = {}
        for line in text.splitlines():
            if line.strip() and not line.startswith("#"):
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        n = int(kv["n_dims"])
        mean = np.array([float(kv[f"mean.{i}"]) for i in range(n)])
        scale = np.array([float(kv[f"scale.{i}"]) for i in range(n)])
        return cls(mean, scale)


def fit_scaler(train) -> Scaler:
    X = np.asarray(train, dtype=float)
    if len(X) == 0:
        raise ValueError("cannot fit a scaler on an empty training set")
    X = X.reshape(len(X), -1)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    # treat round-off spread of a repeated value as zero variance
    sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 0.0)
    return Scaler(mean, sd)


def standardize(train, apply_to=()):
    """Fit a zero-mean unit-variance scaler on ``train`` and apply it.

    Returns ``(scaler, transformed_train, [transformed arrays of apply_to])``.
    """
    scaler = fit_scaler(train)
    return scaler, scaler.transform(train), [scaler.transform(a) for a in apply_to]


@dataclass(frozen=True)
class SessionDescriptor:
    session_id: str
    p: np.ndarray
    normalized: bool = True


def session_descriptor(
    vectors,
    labels,
    session_ids,
    session_id: str,
    label_filter: str = "positive",
    normalization: str = "sum",
) -> SessionDescriptor:
    """Mean feature vector of one session's windows, normalized to unit sum.

    ``label_filter`` is ``"positive"`` (pain windows only) or ``"all"``;
    ``normalization`` is ``"sum"`` (divide by the signed sum), ``"l1"``
    (divide by the sum of absolute values) or ``"none"``.
    """
    V = np.asarray(vectors, dtype=float)
    V = V.reshape(len(V), -1)
    mask = np.asarray(session_ids, dtype=object) == session_id
    if label_filter == "positive":
        mask &= np.asarray(labels) == 1
    elif label_filter != "all":
        raise ValueError(f"label_filter must be 'positive' or 'all', got {label_filter!r}")
    if not mask.any():
        raise ValueError(f"session {session_id} has no training windows matching filter {label_filter!r}")
    p = V[mask].mean(axis=0)
    if normalization == "none":
        return SessionDescriptor(session_id, p, normalized=False)
    total = p.sum() if normalization == "sum" else np.abs(p).sum()
    if abs(total) < 1e-9:
        raise ValueError(
            f"descriptor of session {session_id} sums to {total:.3g}; "
            "use normalization='l1' for features with mixed signs"
        )
    return SessionDescriptor(session_id, p / total, normalized=True)


def session_descriptors(table: FeatureTable, label_filter="positive", normalization="sum") -> list[SessionDescriptor]:
    """Descriptors for every session in ``table``, in order of first appearance."""
    order = list(dict.fromkeys(table.session_ids))
    return [
        session_descriptor(table.flat, table.y, table.session_ids, s, label_filter, normalization)
        for s in order
    ]


def write_feature_csv(table: FeatureTable, path, header_comment: str | None = None) -> Path:
    path = Path(path)
    D = table.flat.shape[1]
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append(",".join(["session_id", "label"] + [f"f_{i + 1:04d}" for i in range(D)]))
    for sid, label, row in zip(table.session_ids, table.y, table.flat):
        lines.append(",".join([str(sid), str(int(label))] + [repr(float(v)) for v in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_feature_csv(path, n_channels: int, feature_set: str = "spline") -> FeatureTable:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    D = len(header) - 2
    if D % n_channels:
        raise ValueError(f"{path}: {D} features do not split into {n_channels} channels")
    X = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), n_channels, -1)
    return FeatureTable(X, [int(r[1]) for r in body], [r[0] for r in body], feature_set)
