"""Branch terminations of an embedded cloud and the implied cluster count."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

DEFAULT_RADIUS_SCALE = 4.0
DEFAULT_EXTENT_FRACTION = 0.2
MIN_NEIGHBORS = 3
SAME_SIDE_RTOL = 1e-12


class RadiusTooSmallError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TerminationSet:
    indices: np.ndarray
    radius_used: float
    extremity: np.ndarray | None = None  # per accepted termination
    candidates: np.ndarray | None = None  # one-sided points before suppression

    def __len__(self):
        return len(self.indices)


def one_sided_test(Y: np.ndarray, i: int, neighbors: np.ndarray) -> tuple[bool, float]:
    """Is point ``i`` an end of the best-fit line through its neighbors?

    Returns ``(is_termination, extremity)`` where extremity is the gap between
    the point's projection and the neighbor projections' mean, in the same
    units as ``Y``.
    """
    P = Y[neighbors]
    mu = P.mean(axis=0)
    C = P - mu
    # principal direction of the neighbor set
    _, _, vt = np.linalg.svd(C, full_matrices=False)
    u = vt[0]
    proj = C @ u
    p0 = (Y[i] - mu) @ u
    tol = SAME_SIDE_RTOL * max(1.0, float(np.max(np.abs(proj))), abs(p0))
    above = np.all(proj <= p0 + tol)
    below = np.all(proj >= p0 - tol)
    return bool(above or below), abs(p0 - proj.mean())


def median_nn_distance(Y: np.ndarray) -> float:
    d, _ = cKDTree(Y).query(Y, k=2)
    pos = d[:, 1][d[:, 1] > 0]
    return float(np.median(pos)) if len(pos) else 0.0


def rms_radius(Y: np.ndarray) -> float:
    C = Y - Y.mean(axis=0)
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", C, C))))


def termination_radius(Y: np.ndarray, radius_scale: float = DEFAULT_RADIUS_SCALE,
                       extent_fraction: float = DEFAULT_EXTENT_FRACTION) -> float:
    """``max(radius_scale * median NN distance, extent_fraction * RMS radius)``.

    The spacing term keeps sparse clouds connected; the extent term keeps the
    line fit wider than the jitter across a dense embedded branch.
    """
    return max(radius_scale * median_nn_distance(Y), extent_fraction * rms_radius(Y))


def _ball_matrix(Y: np.ndarray, r: float) -> sp.csr_matrix:
    tree = cKDTree(Y)
    D = tree.sparse_distance_matrix(tree, r * (1 + 1e-9), output_type="coo_matrix")
    off = D.row != D.col
    A = sp.csr_matrix((np.ones(int(off.sum())), (D.row[off], D.col[off])), shape=(len(Y), len(Y)))
    # coincident points give zero-distance entries that the sparse output drops
    if len(np.unique(Y, axis=0)) < len(Y):
        _, inv = np.unique(Y, axis=0, return_inverse=True)
        inv = np.ravel(inv)
        order = np.argsort(inv, kind="stable")
        groups = np.split(order, np.flatnonzero(np.diff(inv[order])) + 1)
        rows, cols = [], []
        for g in groups:
            if len(g) > 1:
                rr, cc = np.meshgrid(g, g, indexing="ij")
                keep = rr != cc
                rows.append(rr[keep])
                cols.append(cc[keep])
        if rows:
            dup = sp.csr_matrix((np.ones(sum(map(len, rows))), (np.concatenate(rows), np.concatenate(cols))),
                                shape=A.shape)
            A = A.maximum(dup)
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    A.data[:] = 1.0
    return A


def one_sided_all(Y: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized one-sided test at every point for neighbor radius ``r``.

    Returns ``(is_termination, extremity, neighbor_count)``.
    """
    n, d = Y.shape
    A = _ball_matrix(Y, r)
    cnt = np.diff(A.indptr)
    c = np.maximum(cnt, 1)[:, None]
    mu = (A @ Y) / c
    outer = (Y[:, :, None] * Y[:, None, :]).reshape(n, d * d)
    cov = (A @ outer).reshape(n, d, d) / c[:, :, None] - mu[:, :, None] * mu[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, :, -1]
    rows = np.repeat(np.arange(n), cnt)
    proj = np.einsum("ij,ij->i", Y[A.indices] - mu[rows], u[rows])
    p0 = np.einsum("ij,ij->i", Y - mu, u)
    has = cnt > 0
    pmax = np.full(n, -np.inf)
    pmin = np.full(n, np.inf)
    starts = A.indptr[:-1][has]
    if len(starts):
        pmax[has] = np.maximum.reduceat(proj, starts)
        pmin[has] = np.minimum.reduceat(proj, starts)
    scale = np.max(np.stack([np.ones(n), np.abs(np.where(has, pmax, 0)), np.abs(np.where(has, pmin, 0)),
                             np.abs(p0)]), axis=0)
    tol = SAME_SIDE_RTOL * scale
    ok = has & ((pmax <= p0 + tol) | (pmin >= p0 - tol))
    return ok, np.abs(p0), cnt


def detect_terminations(Y, radius_scale: float = DEFAULT_RADIUS_SCALE,
                        extent_fraction: float = DEFAULT_EXTENT_FRACTION) -> TerminationSet:
    """Points whose neighbors (within r) all project to one side of them.

    ``r`` comes from :func:`termination_radius`. Candidates are visited by
    decreasing extremity and any closer than ``r`` to an accepted termination
    are dropped.
    """
    Y = np.asarray(getattr(Y, "Y", Y), dtype=float)
    n = len(Y)
    if n < 5:
        raise ValueError("need at least 5 embedded points")
    if radius_scale < 0 or extent_fraction < 0:
        raise ValueError("radius parameters must be nonnegative")
    r = termination_radius(Y, radius_scale, extent_fraction)
    if not r > 0:
        return TerminationSet(np.empty(0, dtype=np.int64), 0.0, np.empty(0), np.empty(0, dtype=np.int64))
    ok, ext, cnt = one_sided_all(Y, r)
    sparse_pts = int(np.sum(cnt < MIN_NEIGHBORS))
    if sparse_pts > n / 2:
        raise RadiusTooSmallError(
            f"{sparse_pts} of {n} points have fewer than {MIN_NEIGHBORS} neighbors within r={r:.3g}; "
            "increase radius_scale")
    cand = np.flatnonzero(ok & (cnt >= MIN_NEIGHBORS))
    order = cand[np.lexsort((cand, -ext[cand]))]
    kept: list[int] = []
    for i in order:
        if kept and np.min(np.linalg.norm(Y[kept] - Y[i], axis=1)) < r:
            continue
        kept.append(int(i))
    kept_arr = np.asarray(kept, dtype=np.int64)
    return TerminationSet(kept_arr, float(r), ext[kept_arr], cand)


def estimate_cluster_count(terminations) -> int:
    """Branches plus one for the torso, never fewer than two."""
    return max(2, len(terminations) + 1)
