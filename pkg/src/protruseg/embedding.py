"""Locally linear embedding with arbitrary eigenvector selection, plus ISOMAP.

The LLE affinity operator is ``M = (I - W)^T (I - W)``. Its constant vector
sits in the kernel and is always discarded; eigenvector index 1 is the first
one above it. Embedded coordinates are scaled by ``sqrt(N)`` so the default
selection ``1..d`` has zero mean and unit covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from .graph import NeighborGraph

logger = logging.getLogger(__name__)

DEFAULT_REG = 0.1
EIG_TOL = 1e-10
EIG_MAXITER = 5000
DENSE_THRESHOLD = 500


class EigensolverError(RuntimeError):
    """The smallest-eigenpair computation failed or was asked for too much."""


@dataclass(frozen=True, eq=False)
class ReconstructionWeights:
    W: sp.csr_matrix
    neighbors: np.ndarray  # (N, k)
    weights: np.ndarray  # (N, k), rows sum to one
    residuals: np.ndarray  # (N,) reconstruction error norms

    @property
    def n_points(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True, eq=False)
class EmbeddedCloud:
    Y: np.ndarray  # (N, d)
    selected_eigs: tuple[int, ...]
    eigenvalues: np.ndarray  # eigenvalues of the selected vectors
    carryover_count: int = 0
    # full computed spectrum, column 0 being the constant vector (scaled by sqrt(N))
    spectrum: np.ndarray | None = field(default=None, repr=False)
    spectrum_values: np.ndarray | None = field(default=None, repr=False)
    # for embeddings restricted to a subset (ISOMAP on the largest component)
    index_map: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return len(self.Y)

    @property
    def dims(self) -> int:
        return self.Y.shape[1]

    @property
    def own(self) -> np.ndarray:
        """Embedded coordinates of the frame's own points (carryover block removed)."""
        return self.Y[: self.n_points - self.carryover_count]

    @property
    def carry(self) -> np.ndarray:
        return self.Y[self.n_points - self.carryover_count:]

    def with_carryover(self, count: int) -> "EmbeddedCloud":
        return EmbeddedCloud(self.Y, self.selected_eigs, self.eigenvalues, int(count),
                             self.spectrum, self.spectrum_values, self.index_map)


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray
    eig_index: int
    argmax: int
    argmin: int


# ---------------------------------------------------------------- weights


def lle_weights(points, graph: NeighborGraph, reg: float = DEFAULT_REG) -> ReconstructionWeights:
    """Sum-to-one least-squares reconstruction of every point from its neighbors.

    The local Gram matrix gets ``reg * trace(G) / k`` added to its diagonal
    whenever ``k > 3`` or it is singular.
    """
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    X = np.asarray(points, dtype=float)
    nb = graph.neighbors
    n, k = nb.shape
    Z = X[nb] - X[:, None, :]
    G = np.einsum("nid,njd->nij", Z, Z)
    tr = np.trace(G, axis1=1, axis2=2)
    if np.any(tr <= 0):
        bad = int(np.flatnonzero(tr <= 0)[0])
        raise ValueError(f"point {bad}: degenerate neighbor set (all neighbors coincide with it)")
    if k > 3:
        needs = np.ones(n, dtype=bool)
    else:
        # rank test relative to the Gram scale
        sv = np.linalg.svd(G, compute_uv=False)
        needs = sv[:, -1] <= 1e-12 * sv[:, 0]
    shift = np.where(needs, reg * tr / k, 0.0)
    G = G + shift[:, None, None] * np.eye(k)
    try:
        w = np.linalg.solve(G, np.ones((n, k, 1)))[..., 0]
    except np.linalg.LinAlgError:
        raise ValueError("degenerate neighbor set even after regularization") from None
    sums = w.sum(axis=1)
    if np.any(~np.isfinite(w)) or np.any(np.abs(sums) < 1e-300):
        raise ValueError("degenerate neighbor set even after regularization")
    w = w / sums[:, None]
    resid = np.linalg.norm(X - np.einsum("nk,nkd->nd", w, X[nb]), axis=1)
    W = sp.csr_matrix((w.ravel(), nb.ravel(), np.arange(0, n * k + 1, k)), shape=(n, n))
    return ReconstructionWeights(W, nb, w, resid)


def affinity_matrix(weights: ReconstructionWeights) -> sp.csr_matrix:
    """``M = (I - W)^T (I - W)`` as a sparse symmetric matrix."""
    n = weights.n_points
    A = sp.identity(n, format="csr") - weights.W
    M = (A.T @ A).tocsr()
    return ((M + M.T) * 0.5).tocsr()


# ---------------------------------------------------------------- eigensolve


def smallest_eigenpairs(M, count: int, tol: float = EIG_TOL, maxiter: int = EIG_MAXITER,
                        dense_threshold: int = DENSE_THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Ascending ``count`` smallest eigenpairs of a symmetric PSD matrix."""
    n = M.shape[0]
    if count > n:
        raise EigensolverError(f"requested {count} eigenpairs of a {n}x{n} matrix")
    if n <= dense_threshold or count >= n - 1:
        dense = M.toarray() if sp.issparse(M) else np.asarray(M)
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, count - 1])
        return vals, vecs
    # shift-invert just below zero; the constant vector makes M itself singular
    scale = float(abs(M).sum(axis=1).max())
    sigma = -1e-9 * scale
    v0 = np.ones(n) + np.linspace(0.0, 1.0, n)
    try:
        vals, vecs = eigsh(M.tocsc(), k=count, sigma=sigma, which="LM", tol=tol, maxiter=maxiter, v0=v0)
    except (ArpackNoConvergence, ArpackError, RuntimeError) as exc:
        raise EigensolverError(f"eigensolver failed: {exc}") from exc
    if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(vecs)):
        raise EigensolverError("eigensolver returned non-finite values")
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def lle_embed(weights: ReconstructionWeights, selected_eigs: Sequence[int], N: int | None = None,
              tol: float = EIG_TOL, maxiter: int = EIG_MAXITER,
              dense_threshold: int = DENSE_THRESHOLD) -> EmbeddedCloud:
    """Embed with the chosen eigenvectors of ``M`` (1 = first above the constant)."""
    sel = tuple(int(e) for e in selected_eigs)
    if not sel or len(set(sel)) != len(sel) or min(sel) < 1:
        raise ValueError("selected_eigs must be distinct indices >= 1")
    n = weights.n_points if N is None else int(N)
    if n != weights.n_points:
        raise ValueError("N does not match the weight matrix")
    count = max(sel) + 1
    if count > n - 1:
        raise EigensolverError(f"eigenvector index {max(sel)} beyond the spectrum of {n} points")
    M = affinity_matrix(weights)
    # a little headroom keeps the top requested pair away from the Krylov edge
    extra = min(2, n - 1 - count)
    vals, vecs = smallest_eigenpairs(M, count + extra, tol, maxiter, dense_threshold)
    # Rayleigh-Ritz on the computed block with the constant vector projected out
    ones = np.full(n, 1.0 / np.sqrt(n))
    B = vecs - np.outer(ones, ones @ vecs)
    # the constant column is now ~0; an SVD basis drops it without bending the rest
    U, _, _ = np.linalg.svd(B, full_matrices=False)
    Q = U[:, : B.shape[1] - 1]
    H = Q.T @ (M @ Q)
    h_vals, h_vecs = np.linalg.eigh((H + H.T) * 0.5)
    V = _fix_signs(Q @ h_vecs)
    V = V - V.mean(axis=0)
    V /= np.linalg.norm(V, axis=0)
    h_vals = np.maximum(h_vals, 0.0)
    spectrum = np.column_stack([np.ones(n), np.sqrt(n) * V])
    spectrum_values = np.concatenate([[0.0], h_vals])
    cols = [e for e in sel]
    Y = spectrum[:, cols]
    return EmbeddedCloud(Y, sel, spectrum_values[cols], 0, spectrum, spectrum_values)


def lle(points, graph: NeighborGraph, selected_eigs: Sequence[int], reg: float = DEFAULT_REG,
        tol: float = EIG_TOL) -> EmbeddedCloud:
    return lle_embed(lle_weights(points, graph, reg), selected_eigs, tol=tol)


def eigenfunction_field(embedded: EmbeddedCloud, eig_index: int) -> ScalarField:
    """One eigenvector of the affinity operator as a per-point scalar field."""
    if embedded.spectrum is None or not 0 <= eig_index < embedded.spectrum.shape[1]:
        avail = 0 if embedded.spectrum is None else embedded.spectrum.shape[1]
        raise IndexError(f"eigenvector {eig_index} not among the {avail} computed")
    v = embedded.spectrum[:, eig_index].copy()
    return ScalarField(v, int(eig_index), int(np.argmax(v)), int(np.argmin(v)))


def default_eigs(d: int) -> tuple[int, ...]:
    return tuple(range(1, d + 1))


# ---------------------------------------------------------------- ISOMAP


def symmetric_knn_matrix(graph: NeighborGraph) -> sp.csr_matrix:
    n, k = graph.neighbors.shape
    rows = np.repeat(np.arange(n), k)
    A = sp.csr_matrix((graph.distances.ravel(), (rows, graph.neighbors.ravel())), shape=(n, n))
    return A.maximum(A.T).tocsr()


def geodesic_distances(graph: NeighborGraph) -> np.ndarray:
    """All-pairs shortest paths on the symmetrized kNN graph (Dijkstra from every source)."""
    return shortest_path(symmetric_knn_matrix(graph), method="D", directed=False)


def classical_mds(D: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(D)
    D2 = D ** 2
    B = -0.5 * (D2 - D2.mean(axis=0) - D2.mean(axis=1)[:, None] + D2.mean())
    if n <= DENSE_THRESHOLD:
        vals, vecs = scipy.linalg.eigh(B, subset_by_index=[n - d, n - 1])
    else:
        # only the top d pairs are needed; a fixed start vector keeps runs reproducible
        v0 = np.random.default_rng(0).standard_normal(n)
        vals, vecs = eigsh(B, k=d, which="LA", v0=v0, tol=EIG_TOL)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], _fix_signs(vecs[:, order])
    return vecs * np.sqrt(np.maximum(vals, 0.0)), vals


def isomap_embed(points, graph: NeighborGraph, d: int) -> EmbeddedCloud:
    """Geodesic distances plus classical MDS; only the largest component is embedded."""
    del points  # geometry enters through the graph distances
    A = symmetric_knn_matrix(graph)
    ncomp, comp = connected_components(A, directed=False)
    index_map = None
    if ncomp > 1:
        largest = np.argmax(np.bincount(comp))
        index_map = np.flatnonzero(comp == largest)
        logger.warning("kNN graph has %d components; embedding the largest (%d points)", ncomp, len(index_map))
        A = A[index_map][:, index_map]
    if A.shape[0] == 0:
        raise ValueError("empty largest component")
    if A.shape[0] <= d:
        raise ValueError("largest component smaller than the embedding dimension")
    D = shortest_path(A, method="D", directed=False)
    Y, vals = classical_mds(D, d)
    return EmbeddedCloud(Y, tuple(range(1, d + 1)), vals, 0, index_map=index_map)
