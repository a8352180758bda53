"""Exact k-nearest-neighbor graphs and the neighborhood-regularity heuristic for k."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEFAULT_JUMP_THRESHOLD = 2.5
MAX_ANOMALOUS_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    k: int
    neighbors: np.ndarray  # (N, k) int, ascending distance
    distances: np.ndarray  # (N, k) float
    points: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True, eq=False)
class NeighborhoodReport:
    anomalous: np.ndarray  # (N,) bool
    jump_ratio: np.ndarray  # (N,) float

    @property
    def anomalous_fraction(self) -> float:
        return float(np.mean(self.anomalous))


def dedup_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse exact duplicates.

    Returns ``(unique, first_index, inverse)`` where ``unique`` keeps the first
    occurrence of each point in input order, ``first_index[u]`` is its
    position in ``points`` and ``points == unique[inverse]``.
    """
    points = np.asarray(points, dtype=float)
    _, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return points[first[order]], first[order], rank[np.ravel(inverse)]


def knn_graph(points, k: int) -> NeighborGraph:
    """Exact kNN under Euclidean distance; equal distances go to the smaller index."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if len(np.unique(pts, axis=0)) < 2:
        raise ValueError("need at least 2 distinct points")
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    tree = cKDTree(pts)
    # over-fetch so ties straddling the k-th slot can be resolved by index
    m = min(n, k + 1 + max(4, k // 2))
    while True:
        dist, idx = tree.query(pts, k=m)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        # recompute distances exactly so ties compare equal
        diff = pts[idx] - pts[:, None, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        self_mask = idx == np.arange(n)[:, None]
        dist = np.where(self_mask, np.inf, dist)
        order = np.lexsort((idx, dist), axis=1)
        idx_s = np.take_along_axis(idx, order, axis=1)
        dist_s = np.take_along_axis(dist, order, axis=1)
        if m == n:
            break
        # the k-th kept distance must be strictly below the farthest fetched one
        if np.all(dist_s[:, k - 1] < dist_s[:, m - 2]):
            break
        m = min(n, 2 * m)
    return NeighborGraph(k, idx_s[:, :k].copy(), dist_s[:, :k].copy(), pts)


def knn_bruteforce(points, k: int) -> NeighborGraph:
    """O(N^2) reference search used to validate :func:`knn_graph`."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    nb = np.empty((n, k), dtype=np.int64)
    dd = np.empty((n, k))
    for i in range(n):
        d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        cand = sorted((d[j], j) for j in range(n) if j != i)[:k]
        nb[i] = [j for _, j in cand]
        dd[i] = [x for x, _ in cand]
    return NeighborGraph(k, nb, dd, pts)


def neighborhood_mst_edges(points, graph: NeighborGraph, chunk: int = 512) -> np.ndarray:
    """Sorted minimum-spanning-tree edge lengths of every neighborhood.

    Each neighborhood is the point itself plus its k neighbors; Prim's
    algorithm runs on all neighborhoods of a chunk at once. Returns an
    ``(N, k)`` array, ascending per row.
    """
    pts = np.asarray(points, dtype=float)
    n, k = graph.neighbors.shape
    members = np.concatenate([np.arange(n)[:, None], graph.neighbors], axis=1)
    out = np.empty((n, k))
    for start in range(0, n, chunk):
        sub = pts[members[start:start + chunk]]
        diff = sub[:, :, None, :] - sub[:, None, :, :]
        dist = np.sqrt(np.einsum("bijk,bijk->bij", diff, diff))
        b = len(sub)
        rows = np.arange(b)
        in_tree = np.zeros((b, k + 1), dtype=bool)
        in_tree[:, 0] = True
        best = dist[:, 0, :].copy()
        edges = np.empty((b, k))
        for step in range(k):
            cand = np.where(in_tree, np.inf, best)
            j = np.argmin(cand, axis=1)
            edges[:, step] = cand[rows, j]
            in_tree[rows, j] = True
            best = np.minimum(best, dist[rows, j, :])
        out[start:start + chunk] = np.sort(edges, axis=1)
    return out


def neighborhood_report(graph: NeighborGraph, jump_threshold: float = DEFAULT_JUMP_THRESHOLD) -> NeighborhoodReport:
    """Flag neighborhoods that straddle a gap between distinct parts.

    A neighborhood reaching into another body part is split from it by one
    long bridging edge, while a regular one is evenly spaced. The jump ratio
    is the longest edge of the neighborhood's minimum spanning tree over its
    median edge.
    """
    if graph.k < 3:
        raise ValueError("neighborhood_report needs k >= 3")
    if graph.points is None:
        raise ValueError("graph carries no point coordinates")
    edges = neighborhood_mst_edges(graph.points, graph)
    longest = edges[:, -1]
    med = np.median(edges, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(med > 0, longest / med, np.inf)
    ratio = np.maximum(ratio, 1.0)
    return NeighborhoodReport(ratio > jump_threshold, ratio)


def select_k(points, candidate_ks: Sequence[int], jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
             max_fraction: float = MAX_ANOMALOUS_FRACTION) -> tuple[int, bool]:
    """Largest candidate k whose anomalous fraction is below ``max_fraction``.

    Returns ``(k, warning)``; ``warning`` is set when no candidate qualifies and
    the smallest one is returned instead.
    """
    ks = sorted(int(k) for k in candidate_ks)
    if not ks:
        raise ValueError("candidate list is empty")
    pts = np.asarray(points, dtype=float)
    big = knn_graph(pts, min(ks[-1], len(pts) - 1))
    best = None
    for k in ks:
        if k >= len(pts):
            break
        sub = NeighborGraph(k, big.neighbors[:, :k], big.distances[:, :k], pts)
        frac = neighborhood_report(sub, jump_threshold).anomalous_fraction
        logger.debug("k=%d anomalous fraction %.4f", k, frac)
        if frac < max_fraction:
            best = k
    if best is None:
        logger.warning("no candidate k yields regular neighborhoods; using k=%d", ks[0])
        return ks[0], True
    return best, False
