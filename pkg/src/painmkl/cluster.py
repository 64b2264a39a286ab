"""Normalized spectral clustering of session descriptors into tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .features import SessionDescriptor


@dataclass(frozen=True)
class SimilarityGraph:
    W: np.ndarray
    gamma: float
    degrees: np.ndarray
    session_ids: tuple[str, ...]


@dataclass(frozen=True)
class SpectralEmbedding:
    U: np.ndarray  # random-walk eigenvectors, (S, T)
    U_sym: np.ndarray  # orthonormal eigenvectors of the symmetric Laplacian
    eigenvalues: np.ndarray  # all S eigenvalues, ascending


@dataclass(frozen=True)
class TaskAssignment:
    n_tasks: int
    mapping: dict[str, int]

    def __post_init__(self):
        for sid, task in self.mapping.items():
            if not 0 <= task < self.n_tasks:
                raise ValueError(f"session {sid} mapped to task {task} outside [0, {self.n_tasks})")

    def task_of(self, session_id: str) -> int:
        try:
            return self.mapping[session_id]
        except KeyError:
            raise KeyError(f"session {session_id!r} is not in the task assignment") from None

    def tasks_for(self, session_ids) -> np.ndarray:
        return np.array([self.task_of(s) for s in session_ids], dtype=int)

    def sessions_in(self, task: int) -> list[str]:
        return [s for s, t in self.mapping.items() if t == task]


def build_similarity(descriptors: list[SessionDescriptor], gamma: float = 0.10) -> SimilarityGraph:
    """Fully connected RBF graph ``w_ij = exp(-gamma ||p_i - p_j||^2)`` (self-loops kept)."""
    if not descriptors:
        raise ValueError("need at least one descriptor")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    P = np.stack([d.p for d in descriptors])
    sq = np.sum(P**2, axis=1)
    d2 = np.clip(sq[:, None] + sq[None, :] - 2 * P @ P.T, 0.0, None)
    np.fill_diagonal(d2, 0.0)
    W = np.exp(-gamma * d2)
    W = (W + W.T) / 2
    return SimilarityGraph(W, float(gamma), W.sum(axis=1), tuple(d.session_id for d in descriptors))


def spectral_embed(graph: SimilarityGraph, T: int) -> SpectralEmbedding:
    """First ``T`` eigenvectors of ``L = I - D^-1 W``.

    Solved through ``L_sym = I - D^-1/2 W D^-1/2`` (same spectrum); the
    random-walk eigenvectors are ``D^-1/2`` times the symmetric ones. Rows are
    not renormalized.
    """
    S = len(graph.degrees)
    if not 1 <= T <= S:
        raise ValueError(f"need 1 <= T <= S={S}, got T={T}")
    inv_sqrt = 1.0 / np.sqrt(graph.degrees)
    L_sym = np.eye(S) - inv_sqrt[:, None] * graph.W * inv_sqrt[None, :]
    L_sym = (L_sym + L_sym.T) / 2
    try:
        vals, vecs = linalg.eigh(L_sym)
    except linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed: {exc}") from None
    vals = np.clip(vals, 0.0, 2.0)
    U_sym = vecs[:, :T]
    # fix eigenvector signs for reproducibility
    signs = np.sign(U_sym[np.argmax(np.abs(U_sym), axis=0), np.arange(T)])
    U_sym = U_sym * np.where(signs == 0, 1.0, signs)
    return SpectralEmbedding(inv_sqrt[:, None] * U_sym, U_sym, vals)


def _wcss(points, labels, centers):
    return float(np.sum((points - centers[labels]) ** 2))


def _kmeans_pp(points, T, rng):
    S = len(points)
    centers = [points[rng.integers(S)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, T):
        total = d2.sum()
        idx = rng.choice(S, p=d2 / total) if total > 0 else rng.integers(S)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(points, centers, max_iter=300):
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(len(centers)):
            members = points[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    return labels, centers


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    labels = np.asarray(labels)
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=int)


def kmeans(points, T: int, seed: int = 0, n_restarts: int = 10, session_ids=None) -> TaskAssignment:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_restarts`` by WCSS."""
    labels, _ = kmeans_labels(points, T, seed, n_restarts)
    ids = session_ids if session_ids is not None else [str(i) for i in range(len(labels))]
    return TaskAssignment(T, dict(zip(ids, (int(l) for l in labels))))


def kmeans_labels(points, T: int, seed: int = 0, n_restarts: int = 10) -> tuple[np.ndarray, float]:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    S = len(X)
    if not 1 <= T <= S:
        raise ValueError(f"need 1 <= T <= S={S}, got T={T}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_restarts)):
        labels, centers = _lloyd(X, _kmeans_pp(X, T, rng))
        if len(np.unique(labels)) < T:
            continue
        score = _wcss(X, labels, centers)
        # strict improvement keeps the lowest restart index on ties
        if best is None or score < best[1]:
            best = (labels, score)
    if best is None:
        raise RuntimeError(f"k-means produced an empty cluster in all {n_restarts} restarts")
    return canonical_labels(best[0]), best[1]


@dataclass(frozen=True)
class ClusteringResult:
    assignment: TaskAssignment
    graph: SimilarityGraph
    embedding: SpectralEmbedding
    order: np.ndarray  # session order grouping clusters together
    permuted_W: np.ndarray


def assign_tasks(
    descriptors: list[SessionDescriptor],
    T: int,
    gamma: float = 0.10,
    seed: int = 0,
    n_restarts: int = 10,
) -> ClusteringResult:
    """Similarity graph, spectral embedding and k-means in one call."""
    graph = build_similarity(descriptors, gamma)
    emb = spectral_embed(graph, T)
    labels, _ = kmeans_labels(emb.U, T, seed, n_restarts)
    ids = graph.session_ids
    assignment = TaskAssignment(T, dict(zip(ids, (int(l) for l in labels))))
    order = np.argsort(labels, kind="stable")
    return ClusteringResult(assignment, graph, emb, order, graph.W[np.ix_(order, order)])


def eigengaps(embedding: SpectralEmbedding) -> np.ndarray:
    """``lambda_{k+1} - lambda_k``; a large gap after k suggests k clusters."""
    return np.diff(embedding.eigenvalues)


def silhouette(points, labels) -> float:
    X = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2 or len(ks) == len(X):
        return 0.0
    D = np.sqrt(np.sum((X[:, None] - X[None]) ** 2, axis=2))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == k].mean() for k in ks if k != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def sweep_tasks(descriptors, T_values, gamma=0.10, seed=0, n_restarts=10) -> list[dict]:
    """Eigengap and silhouette diagnostics for a range of task counts."""
    out = []
    for T in T_values:
        res = assign_tasks(descriptors, T, gamma, seed, n_restarts)
        labels = res.assignment.tasks_for(res.graph.session_ids)
        vals = res.embedding.eigenvalues
        out.append({
            "T": int(T),
            "eigengap": float(vals[T] - vals[T - 1]) if T < len(vals) else 0.0,
            "silhouette": silhouette(res.embedding.U, labels),
        })
    return out


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected agreement between two partitions (1 = identical)."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return np.sum(x * (x - 1) / 2)

    n = len(a)
    total = n * (n - 1) / 2
    sum_ij, sum_a, sum_b = pairs(table), pairs(table.sum(1)), pairs(table.sum(0))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
