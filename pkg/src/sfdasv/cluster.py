"""K-means++ / Lloyd and average-linkage agglomerative clustering of embeddings."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import l2_normalize, make_rng


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterConfig:
    k: int
    method: str = "kmeans"  # or "ahc"
    n_init: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.n_init < 1 or self.max_iter < 1:
            raise ValueError("n_init and max_iter must be >= 1")
        if self.method not in ("kmeans", "ahc"):
            raise ValueError(f"unknown clustering method {self.method!r}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    inertia: Optional[float] = None
    # diagnostics: per-run Lloyd inertia traces (k-means) or merge list (AHC)
    history: list = field(default_factory=list, repr=False)

    @property
    def n_items(self) -> int:
        return int(self.labels.shape[0])


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding: first centre uniform, later ones with probability ~ squared distance."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ClusteringError(f"fewer than k={k} distinct points")
        idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total), side="right"))
        idx = min(idx, n - 1)
        while closest[idx] == 0.0:  # guard against landing on a zero-mass point at the edge
            idx -= 1
        centers[c] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[c:c + 1])[:, 0])
    return centers


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    """Run Lloyd iterations; returns (labels, centers, inertia trace).

    Each trace entry is the inertia right after an assignment step (with
    empty clusters repaired), so the sequence never increases.
    """
    k = centers.shape[0]
    centers = centers.copy()
    trace = []
    for _ in range(max_iter):
        d = _sq_dists(X, centers)
        labels = np.argmin(d, axis=1)
        cost = d[np.arange(len(X)), labels]
        for c in range(k):
            if not np.any(labels == c):
                # reseed at the point worst served by its current centre
                far = int(np.argmax(cost))
                labels[far] = c
                centers[c] = X[far]
                cost[far] = 0.0
        trace.append(float(cost.sum()))
        new_centers = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    # labels from the last assignment step, scored against their own means
    inertia = float(sum(((X[labels == c] - centers[c]) ** 2).sum() for c in range(k)))
    trace.append(inertia)
    return labels, centers, trace


def kmeans(items: Sequence, cfg: ClusterConfig, normalize: bool = True) -> ClusterAssignment:
    """Best of ``cfg.n_init`` k-means++ seeded Lloyd runs by inertia.

    Items are L2-normalised first (``normalize=True``) so Euclidean distance
    tracks cosine geometry.
    """
    X = np.asarray(items, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("items must form a 2-D array")
    n = X.shape[0]
    if n < cfg.k:
        raise ClusteringError(f"{n} items cannot fill k={cfg.k} clusters")
    if normalize:
        X = l2_normalize(X)
    n_distinct = len(np.unique(X, axis=0))
    if n_distinct < cfg.k:
        raise ClusteringError(f"only {n_distinct} distinct points for k={cfg.k} clusters")

    best = None
    traces = []
    for run, rng in enumerate(make_rng(cfg.seed).spawn(cfg.n_init)):
        centers = kmeans_plusplus(X, cfg.k, rng)
        labels, centers, trace = lloyd(X, centers, cfg.max_iter, cfg.tol)
        traces.append(trace)
        inertia = trace[-1]
        if best is None or inertia < best[0]:
            best = (inertia, run, labels)
    return ClusterAssignment(labels=best[2].astype(np.int64), k=cfg.k, inertia=best[0], history=traces)


def cosine_distance_matrix(X: np.ndarray) -> np.ndarray:
    U = l2_normalize(X)
    D = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(D, 0.0)
    return D


def ahc(items: Sequence, k: int) -> ClusterAssignment:
    """Average-linkage agglomeration under cosine distance down to ``k`` clusters.

    Cluster distances follow the Lance-Williams average update; each row keeps
    its nearest neighbour cached, so a merge costs O(n) plus any rows whose
    neighbour vanished. Ties merge the lexicographically smallest slot pair.
    The merge list ``(slot_i, slot_j, distance)`` is kept in ``history``.
    """
    X = np.asarray(items, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ClusteringError(f"{n} items cannot form k={k} clusters")
    D = cosine_distance_matrix(X)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = {i: [i] for i in range(n)}
    nn = np.argmin(D, axis=1) if n > 1 else np.zeros(1, dtype=np.int64)
    nn_d = D[np.arange(n), nn]
    merges = []
    for _ in range(n - k):
        i = int(np.argmin(np.where(active, nn_d, np.inf)))
        j = int(nn[i])
        dist = float(D[i, j])
        merges.append((i, j, dist))
        # slot i absorbs slot j
        new_row = (size[i] * D[i] + size[j] * D[j]) / (size[i] + size[j])
        new_row[i] = np.inf
        D[i, :] = new_row
        D[:, i] = new_row
        D[j, :] = np.inf
        D[:, j] = np.inf
        size[i] += size[j]
        active[j] = False
        members[i].extend(members.pop(j))
        nn_d[j] = np.inf
        # rows whose cached neighbour was i or j, plus i itself, need a rescan;
        # others only need to see whether the new cluster i is now closer
        stale = np.flatnonzero(active & ((nn == i) | (nn == j)))
        stale = np.union1d(stale, [i])
        for r in stale:
            nn[r] = int(np.argmin(D[r]))
            nn_d[r] = D[r, nn[r]]
        others = np.flatnonzero(active)
        closer = (D[others, i] < nn_d[others]) | ((D[others, i] == nn_d[others]) & (i < nn[others]))
        for r in others[closer]:
            if r != i:
                nn[r] = i
                nn_d[r] = D[r, i]
    labels = np.empty(n, dtype=np.int64)
    # cluster ids in order of each cluster's smallest member
    for cid, slot in enumerate(sorted(members, key=lambda s: min(members[s]))):
        labels[members[slot]] = cid
    return ClusterAssignment(labels=labels, k=k, history=merges)


def cluster(items: Sequence, cfg: ClusterConfig) -> ClusterAssignment:
    if cfg.method == "kmeans":
        return kmeans(items, cfg)
    return ahc(items, cfg.k)


def purity(assignment, truth: Sequence) -> float:
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    if len(labels) != len(truth):
        raise ValueError("truth must cover every item")
    groups = defaultdict(Counter)
    for lab, spk in zip(labels, truth):
        groups[int(lab)][spk] += 1
    return sum(max(c.values()) for c in groups.values()) / len(labels)


def same_partition(a: Sequence, b: Sequence) -> bool:
    """True when two label vectors describe the same partition up to relabelling."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def write_assignment(path, item_ids: Sequence[str], assignment: ClusterAssignment) -> None:
    with open(path, "w") as fh:
        for item, lab in zip(item_ids, assignment.labels):
            fh.write(f"{item}\t{int(lab)}\n")
        if assignment.inertia is not None:
            fh.write(f"# inertia={assignment.inertia!r}\n")


def read_assignment(path) -> tuple[list[str], np.ndarray, Optional[float]]:
    ids, labels, inertia = [], [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# inertia="):
                inertia = float(line.split("=", 1)[1])
                continue
            item, lab = line.split("\t")
            ids.append(item)
            labels.append(int(lab))
    return ids, np.asarray(labels, dtype=np.int64), inertia
