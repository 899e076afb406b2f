"""Embedding-space analysis: HDBSCAN clusters/outliers and SMACOF metric MDS.

HDBSCAN here follows the usual pipeline (core distances, mutual
reachability, minimum spanning tree, single-linkage dendrogram, condensed
tree, excess-of-mass selection). Two conventions matter for the small
parameter values used on byte embeddings:

* the core distance with ``min_samples=k`` is the distance to the k-th
  nearest *other* point, so ``min_samples=1`` means nearest-neighbour
  distance;
* a split at distance zero never creates clusters, so exact duplicates stay
  together, and when the hierarchy never splits into two clusters the whole
  data set is reported as one cluster.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import svg
from .errors import InputError
from .model import PAD, Model

logger = logging.getLogger(__name__)

NOISE = -1


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def pairwise_distances(points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    # recompute exactly where cancellation could leave tiny nonzero values
    close = d < 1e-6 * (1.0 + np.sqrt(np.maximum(sq[:, None], sq[None, :])))
    if np.any(close):
        i, j = np.nonzero(close)
        d[i, j] = np.linalg.norm(x[i] - x[j], axis=1)
    np.fill_diagonal(d, 0.0)
    return (d + d.T) / 2.0


def validate_distance_matrix(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise InputError(f"distance matrix must be square, got shape {d.shape}")
    if np.any(np.diag(d) != 0) or np.any(d < 0) or not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise InputError("distance matrix must be symmetric, nonnegative, with zero diagonal")
    return d


def core_distances(d: np.ndarray, min_samples: int) -> np.ndarray:
    n = len(d)
    k = min(min_samples, n - 1)
    if k < 1:
        return np.zeros(n)
    return np.sort(d, axis=1)[:, k]  # column 0 is the point itself


def mutual_reachability(d: np.ndarray, min_samples: int) -> np.ndarray:
    core = core_distances(d, min_samples)
    mr = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


def minimum_spanning_tree(w: np.ndarray) -> np.ndarray:
    """Prim's algorithm on a dense weight matrix; rows are (u, v, weight)."""
    n = len(w)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1)
    edges = []
    current = 0
    in_tree[0] = True
    for _ in range(n - 1):
        closer = ~in_tree & (w[current] < best)
        best[closer] = w[current][closer]
        parent[closer] = current
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges.append((parent[nxt], nxt, best[nxt]))
        in_tree[nxt] = True
        current = nxt
    return np.array(edges, dtype=float).reshape(-1, 3)


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Dendrogram rows (left, right, distance, size); node n+i is row i."""
    order = np.argsort(mst[:, 2], kind="stable")
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    rows = []
    for i, e in enumerate(order):
        u, v, dist = int(mst[e, 0]), int(mst[e, 1]), float(mst[e, 2])
        ru, rv = find(u), find(v)
        node = n + i
        parent[ru] = parent[rv] = node
        size[node] = size[ru] + size[rv]
        rows.append((ru, rv, dist, size[node]))
    return np.array(rows, dtype=float).reshape(-1, 4)


# ---------------------------------------------------------------------------
# condensed tree and cluster selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CondensedEdge:
    parent: int  # cluster id
    child: int  # point index (< n) or cluster id (>= n)
    lambda_val: float
    size: int


def _to_lambda(dist: float) -> float:
    return np.inf if dist <= 0 else 1.0 / dist


def condense_tree(dendrogram: np.ndarray, n: int, min_cluster_size: int) -> list[CondensedEdge]:
    """Walk the dendrogram from the root; cluster ids start at ``n`` (the root)."""
    if n == 1:
        return [CondensedEdge(n, 0, np.inf, 1)]
    root = 2 * n - 2

    def children(node: int) -> tuple[int, int, float]:
        row = dendrogram[node - n]
        return int(row[0]), int(row[1]), float(row[2])

    def size_of(node: int) -> int:
        return 1 if node < n else int(dendrogram[node - n, 3])

    def leaves(node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < n:
                out.append(x)
            else:
                a, b, _ = children(x)
                stack += [b, a]
        return out

    def parts(node: int) -> tuple[list[int], float]:
        """Subtrees left when every merge at this node's distance is undone at once."""
        dist = children(node)[2]
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x >= n and children(x)[2] == dist:
                a, b, _ = children(x)
                stack += [b, a]
            else:
                out.append(x)
        return out, dist

    edges: list[CondensedEdge] = []
    next_label = n + 1
    stack = [(root, n)]
    while stack:
        node, label = stack.pop()
        if node < n:
            edges.append(CondensedEdge(label, node, np.inf, 1))
            continue
        subtrees, dist = parts(node)
        lam = _to_lambda(dist)
        big = [c for c in subtrees if size_of(c) >= min_cluster_size]
        if np.isinf(lam):
            big = []
        for c in subtrees:
            if c not in big:
                edges.extend(CondensedEdge(label, p, lam, 1) for p in leaves(c))
        if len(big) >= 2:
            pending = []
            for c in big:
                edges.append(CondensedEdge(label, next_label, lam, size_of(c)))
                pending.append((c, next_label))
                next_label += 1
            stack.extend(reversed(pending))
        elif big:
            stack.append((big[0], label))
    return edges


def _stabilities(edges: list[CondensedEdge], n: int) -> tuple[dict[int, float], dict[int, float]]:
    birth = {n: 0.0}
    for e in edges:
        if e.child >= n:
            birth[e.child] = e.lambda_val
    stability = {c: 0.0 for c in birth}
    for e in edges:
        stability[e.parent] += (e.lambda_val - birth[e.parent]) * e.size
    return stability, birth


@dataclass
class ClusterResult:
    labels: np.ndarray
    stabilities: dict[int, float]
    condensed_tree: list[CondensedEdge]
    selected: list[int]
    min_cluster_size: int
    min_samples: int

    @property
    def noise(self) -> np.ndarray:
        return self.labels == NOISE

    @property
    def n_clusters(self) -> int:
        return len(self.selected)


def _select(edges: list[CondensedEdge], n: int, leaf: bool) -> tuple[list[int], dict[int, float]]:
    stability, _ = _stabilities(edges, n)
    child_clusters: dict[int, list[int]] = {c: [] for c in stability}
    for e in edges:
        if e.child >= n:
            child_clusters[e.parent].append(e.child)
    if not child_clusters[n]:
        return [n], stability
    non_root = sorted((c for c in stability if c != n), reverse=True)
    if leaf:
        return sorted(c for c in non_root if not child_clusters[c]), stability
    selected = {c: False for c in non_root}
    subtree = dict(stability)
    for c in non_root:
        kids = child_clusters[c]
        kid_total = sum(subtree[k] for k in kids)
        if kids and kid_total > stability[c]:
            subtree[c] = kid_total
        else:
            selected[c] = True
            stack = list(kids)
            while stack:
                k = stack.pop()
                selected[k] = False
                stack += child_clusters[k]
    return sorted(c for c, s in selected.items() if s), stability


def hdbscan(
    points,
    min_cluster_size: int = 2,
    min_samples: int = 1,
    cluster_selection: str = "eom",
) -> ClusterResult:
    """Density-based hierarchical clustering; unclustered points get NOISE."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise InputError(f"points must be 2-D (n x d), got shape {x.shape}")
    n = len(x)
    if n < 1:
        raise InputError("need at least one point")
    if min_cluster_size < 2 or min_samples < 1:
        raise InputError("min_cluster_size must be >= 2 and min_samples >= 1")
    if cluster_selection not in ("eom", "leaf"):
        raise InputError(f"unknown cluster selection {cluster_selection!r}")
    if n < min_cluster_size:
        return ClusterResult(np.full(n, NOISE), {}, [], [], min_cluster_size, min_samples)

    mr = mutual_reachability(pairwise_distances(x), min_samples)
    dendrogram = single_linkage(minimum_spanning_tree(mr), n)
    edges = condense_tree(dendrogram, n, min_cluster_size)
    selected, stability = _select(edges, n, cluster_selection == "leaf")

    parent_of = {e.child: e.parent for e in edges if e.child >= n}
    chosen = set(selected)
    label_of = {c: i for i, c in enumerate(selected)}
    labels = np.full(n, NOISE)
    for e in edges:
        if e.child >= n:
            continue
        c = e.parent
        while c not in chosen and c in parent_of:
            c = parent_of[c]
        if c in chosen:
            labels[e.child] = label_of[c]
    return ClusterResult(
        labels, {c: stability[c] for c in selected}, edges, selected, min_cluster_size, min_samples
    )


# ---------------------------------------------------------------------------
# metric MDS
# ---------------------------------------------------------------------------

@dataclass
class MdsResult:
    coordinates: np.ndarray
    stress: list[float]
    n_iter: int
    converged: bool

    @property
    def final_stress(self) -> float:
        return self.stress[-1]


def raw_stress(d: np.ndarray, x: np.ndarray) -> float:
    iu = np.triu_indices(len(d), k=1)
    diff = x[:, None, :] - x[None, :, :]
    dx = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(np.sum((d[iu] - dx[iu]) ** 2))


def _guttman(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = len(d)
    diff = x[:, None, :] - x[None, :, :]
    dx = np.sqrt(np.sum(diff * diff, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(dx > 0, -d / dx, 0.0)
    np.fill_diagonal(b, 0.0)
    np.fill_diagonal(b, -b.sum(axis=1))
    return b @ x / n


def _smacof_run(d: np.ndarray, x: np.ndarray, max_iters: int, tol: float) -> MdsResult:
    stress = [raw_stress(d, x)]
    for it in range(1, max_iters + 1):
        if stress[-1] == 0.0:
            return MdsResult(x, stress, it - 1, True)
        x_new = _guttman(d, x)
        s_new = raw_stress(d, x_new)
        if s_new > stress[-1]:
            # rounding noise at the optimum; majorization guarantees no real increase
            return MdsResult(x, stress, it - 1, True)
        drop = (stress[-1] - s_new) / stress[-1]
        x = x_new
        stress.append(s_new)
        if drop < tol:
            return MdsResult(x, stress, it, True)
    return MdsResult(x, stress, max_iters, False)


def mds_smacof(
    dist,
    dim: int = 2,
    max_iters: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
    n_init: int = 4,
) -> MdsResult:
    """Minimize raw stress by SMACOF from seeded random starts; best run wins."""
    d = validate_distance_matrix(dist)
    n = len(d)
    if n == 1:
        return MdsResult(np.zeros((1, dim)), [0.0], 0, True)
    rng = np.random.default_rng(seed)
    scale = float(np.sqrt(np.mean(d**2))) or 1.0
    best: Optional[MdsResult] = None
    for _ in range(max(1, n_init)):
        x0 = rng.normal(scale=scale, size=(n, dim))
        run = _smacof_run(d, x0, max_iters, tol)
        if best is None or run.final_stress < best.final_stress:
            best = run
    return best


# ---------------------------------------------------------------------------
# byte embedding report
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingPoint:
    symbol: int
    cluster: int
    is_outlier: bool
    x: float
    y: float

    @property
    def is_padding(self) -> bool:
        return self.symbol == PAD


@dataclass
class EmbeddingReport:
    points: list[EmbeddingPoint]
    clusters: ClusterResult
    mds: MdsResult
    warnings: list[str] = field(default_factory=list)

    def outliers(self, include_padding: bool = False) -> list[int]:
        return [p.symbol for p in self.points if p.is_outlier and (include_padding or not p.is_padding)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["byte", "cluster", "is_outlier", "is_padding", "x", "y"])
        for p in self.points:
            w.writerow([p.symbol, p.cluster, int(p.is_outlier), int(p.is_padding), f"{p.x:.6f}", f"{p.y:.6f}"])
        return buf.getvalue()

    def to_svg(self, title: str = "byte embedding (MDS)") -> str:
        labels = [
            ("PAD" if p.is_padding else f"0x{p.symbol:02x}") if p.is_outlier else "" for p in self.points
        ]
        groups = [NOISE if p.is_outlier else p.cluster for p in self.points]
        return svg.scatter([p.x for p in self.points], [p.y for p in self.points], groups, labels, title)


def embedding_outliers(
    model: Model,
    min_cluster_size: int = 2,
    min_samples: int = 1,
    seed: int = 0,
    mds_iters: int = 300,
) -> EmbeddingReport:
    """Cluster the 257 embedding rows and project them to 2-D."""
    table = model.embedding
    warnings = []
    if np.all(table == table[0]):
        warnings.append("embedding rows are all identical; reporting a single cluster")
        logger.warning(warnings[-1])
    clusters = hdbscan(table, min_cluster_size, min_samples)
    mds = mds_smacof(pairwise_distances(table), 2, max_iters=mds_iters, seed=seed, n_init=1)
    points = [
        EmbeddingPoint(i, int(clusters.labels[i]), bool(clusters.labels[i] == NOISE),
                       float(mds.coordinates[i, 0]), float(mds.coordinates[i, 1]))
        for i in range(len(table))
    ]
    return EmbeddingReport(points, clusters, mds, warnings)
