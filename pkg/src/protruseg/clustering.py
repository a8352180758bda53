"""Tuple-wise (hypergraph) clustering of embedded clouds, plus seeded k-means and EM.

Tuples of embedded points are scored by how close to degenerate their simplex
is, the hypergraph is collapsed to a pairwise graph by clique-expansion
averaging, and the graph is cut by seeded normalized spectral clustering.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.special
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

NEAR_FAR_RATIO = 4  # near companions per far companion
NEAR_POOL_FACTOR = 3  # near companions come from the 3*d nearest neighbors
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-9
EM_MAX_ITER = 300
EM_TOL = 1e-6
COV_FLOOR = 1e-6
SPECTRAL_DENSE_THRESHOLD = 600

PROVENANCE = ("propagated", "termination", "torso")


@dataclass(frozen=True, eq=False)
class HyperedgeSet:
    edges: np.ndarray  # (m, d) int
    weights: np.ndarray  # (m,)
    sigma: float
    sample_budget: int
    volumes: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class ApproxGraph:
    G: sp.csr_matrix

    @property
    def n_points(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    labels: np.ndarray  # (N,) in 1..n
    n: int
    embedded_centroids: np.ndarray  # (n, d)
    centroid_point_index: np.ndarray  # (n,)
    # objective per iteration (k-means inertia or EM log-likelihood)
    trace: tuple[float, ...] = ()
    warning: str | None = None
    # after dropping empty components: original component (1-based) of each label
    source_ids: np.ndarray | None = None

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", lab)
        if lab.size and (lab.min() < 1 or lab.max() > self.n):
            raise ValueError("labels must lie in 1..n")
        if np.any(np.bincount(lab, minlength=self.n + 1)[1:] == 0):
            raise ValueError("empty cluster in labeling")

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)


@dataclass(frozen=True, eq=False)
class SeedSet:
    seeds: np.ndarray  # (n, d)
    provenance: tuple[str, ...]
    # per seed: index of the previous-frame cluster a propagated seed came
    # from, or the previous clusters a merge seed replaced
    sources: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.seeds, dtype=float))
        object.__setattr__(self, "seeds", s)
        if len(self.provenance) != len(s):
            raise ValueError("one provenance tag per seed")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance {sorted(bad)}")
        if not self.sources:
            object.__setattr__(self, "sources", tuple(() for _ in range(len(s))))

    def __len__(self):
        return len(self.seeds)

    @property
    def n(self) -> int:
        return len(self.seeds)


def labeling_from_labels(Y: np.ndarray, labels: np.ndarray, n: int, trace=(), warning=None) -> ClusterLabeling:
    """Fill in centroids and, per cluster, the member nearest its centroid."""
    Y = np.asarray(Y, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n + 1)[1:]
    sums = np.zeros((n, Y.shape[1]))
    np.add.at(sums, labels - 1, Y)
    with np.errstate(invalid="ignore", divide="ignore"):
        cent = sums / counts[:, None]
    # representative: the member of cluster j nearest its centroid
    d2 = ((Y - cent[labels - 1]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(Y)), d2, labels))
    first = np.searchsorted(labels[order], np.arange(1, n + 1))
    rep = order[np.minimum(first, len(order) - 1)].astype(np.int64)
    return ClusterLabeling(labels, int(n), cent, rep, tuple(trace), warning)


def compact_labels(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Renumber to 1..n' keeping order; returns (new_labels, kept_old_ids)."""
    kept = np.unique(labels)
    lut = np.zeros(int(kept.max()) + 1, dtype=np.int64)
    lut[kept] = np.arange(1, len(kept) + 1)
    return lut[labels], kept


# ---------------------------------------------------------------- affinities


def simplex_volumes(P: np.ndarray) -> np.ndarray:
    """(d-1)-volumes of a batch of simplices, ``P`` shaped (m, d, D)."""
    P = np.asarray(P, dtype=float)
    if P.ndim == 2:
        P = P[None]
    d = P.shape[1]
    E = P[:, 1:, :] - P[:, :1, :]
    gram = np.einsum("mik,mjk->mij", E, E)
    det = np.linalg.det(gram) if d > 1 else np.ones(len(P))
    return np.sqrt(np.maximum(det, 0.0)) / math.factorial(d - 1)


def simplex_affinity(tuple_points, sigma: float) -> float:
    """``exp(-v^2 / sigma^2)`` for the simplex spanned by the tuple."""
    P = np.asarray(tuple_points, dtype=float)
    if P.ndim != 2 or len(P) < 3:
        raise ValueError("need a tuple of at least 3 points")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    v = float(simplex_volumes(P)[0])
    return float(np.exp(-(v / sigma) ** 2))


def _sample_tuples(Y: np.ndarray, d: int, budget: int, rng: np.random.Generator, pool: int) -> np.ndarray:
    n = len(Y)
    pool = min(pool, n - 1)
    _, nb = cKDTree(Y).query(Y, k=pool + 1)
    nb = np.atleast_2d(nb)[:, 1:]
    anchors = rng.integers(n, size=budget)
    T = np.empty((budget, d), dtype=np.int64)
    T[:, 0] = anchors

    def draw(rows):
        m = len(rows)
        near = rng.random(m) < NEAR_FAR_RATIO / (NEAR_FAR_RATIO + 1)
        near_pick = nb[anchors[rows], rng.integers(pool, size=m)]
        far_pick = rng.integers(n, size=m)
        return np.where(near, near_pick, far_pick)

    for c in range(1, d):
        T[:, c] = draw(np.arange(budget))
        # redraw companions that repeat an earlier member
        for _ in range(1000):
            dup = np.any(T[:, :c] == T[:, c:c + 1], axis=1)
            if not dup.any():
                break
            rows = np.flatnonzero(dup)
            T[rows, c] = draw(rows)
        else:
            rows = np.flatnonzero(np.any(T[:, :c] == T[:, c:c + 1], axis=1))
            for r in rows:
                free = np.setdiff1d(np.arange(n), T[r, :c])
                T[r, c] = free[rng.integers(len(free))]
    return T


def build_hypergraph(embedded, d: int, sample_budget: int, rng_seed: int = 0,
                     sigma: float | None = None, enumerate_all: bool | None = None,
                     near_pool: int | None = None) -> HyperedgeSet:
    """Sample d-tuples of embedded points and score them.

    Anchors are uniform; each companion comes from the anchor's
    ``near_pool`` nearest neighbors (default ``3d``) or, one time in five,
    uniformly from the cloud. When
    the budget covers every tuple they are enumerated instead. ``sigma``
    defaults to the median sampled volume.
    """
    Y = np.asarray(getattr(embedded, "Y", embedded), dtype=float)
    n = len(Y)
    if d < 3:
        raise ValueError("tuple size d must be >= 3")
    if n < d:
        raise ValueError(f"need at least d={d} points, got {n}")
    total = math.comb(n, d)
    if enumerate_all is None:
        enumerate_all = total <= sample_budget
    if not enumerate_all and sample_budget < 10 * n:
        raise ValueError(f"sample_budget {sample_budget} below 10*N = {10 * n}")
    if enumerate_all:
        T = np.array(list(combinations(range(n), d)), dtype=np.int64).reshape(-1, d)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & (2**64 - 1), n, d]))
        pool = NEAR_POOL_FACTOR * d if near_pool is None else int(near_pool)
        if pool < d - 1:
            raise ValueError("near_pool must hold at least d-1 neighbors")
        T = _sample_tuples(Y, d, int(sample_budget), rng, pool)
    vol = np.concatenate([simplex_volumes(Y[T[s:s + 200_000]]) for s in range(0, len(T), 200_000)])
    if sigma is None:
        sigma = float(np.median(vol))
        if not sigma > 0:
            pos = vol[vol > 0]
            sigma = float(np.median(pos)) if len(pos) else 1.0
    elif not sigma > 0:
        raise ValueError("sigma must be positive")
    w = np.exp(-(vol / sigma) ** 2)
    return HyperedgeSet(T, w, float(sigma), int(sample_budget), vol)


def approximate_graph(hyperedges: HyperedgeSet, N: int) -> ApproxGraph:
    """Clique expansion: ``G_ij`` is the mean weight of the tuples holding both i and j."""
    T, w = hyperedges.edges, hyperedges.weights
    if len(T) == 0:
        raise ValueError("empty hyperedge set")
    d = T.shape[1]
    pi, pj = np.triu_indices(d, 1)
    rows = np.concatenate([T[:, pi].ravel(), T[:, pj].ravel()])
    cols = np.concatenate([T[:, pj].ravel(), T[:, pi].ravel()])
    ww = np.tile(np.repeat(w, len(pi)).reshape(len(T), len(pi)).ravel(), 2)
    S = sp.csr_matrix((ww, (rows, cols)), shape=(N, N))
    C = sp.csr_matrix((np.ones_like(ww), (rows, cols)), shape=(N, N))
    S.sum_duplicates()
    C.sum_duplicates()
    # identical sparsity patterns, so data arrays line up
    G = S.copy()
    G.data = S.data / C.data
    G.setdiag(0)
    G.eliminate_zeros()
    # summation order differs between (i, j) and (j, i); force exact symmetry
    G = ((G + G.T) * 0.5).tocsr()
    return ApproxGraph(G)


# ---------------------------------------------------------------- partitioning


def _top_eigvecs(A: sp.csr_matrix, n: int) -> np.ndarray:
    m = A.shape[0]
    if m <= SPECTRAL_DENSE_THRESHOLD or n >= m - 1:
        _, vecs = scipy.linalg.eigh(A.toarray(), subset_by_index=[m - n, m - 1])
        return vecs[:, ::-1]
    v0 = np.ones(m) + np.linspace(0.0, 1.0, m)
    try:
        vals, vecs = eigsh(A, k=n, which="LA", tol=1e-10, maxiter=10000, v0=v0)
    except (ArpackNoConvergence, ArpackError):
        _, vecs = scipy.linalg.eigh(A.toarray(), subset_by_index=[m - n, m - 1])
        return vecs[:, ::-1]
    return vecs[:, np.argsort(-vals)]


def spectral_rows(graph: ApproxGraph, n: int) -> np.ndarray:
    """Unit-normalized rows of the top ``n`` eigenvectors of ``D^-1/2 G D^-1/2``."""
    G = graph.G
    deg = np.asarray(G.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    A = (sp.diags(inv) @ G @ sp.diags(inv)).tocsr()
    V = _top_eigvecs(A, n)
    norms = np.linalg.norm(V, axis=1)
    return V / np.where(norms > 0, norms, 1.0)[:, None]


def spectral_partition(graph: ApproxGraph, seeds: SeedSet, embedded, rows: np.ndarray | None = None) -> ClusterLabeling:
    """Seeded normalized spectral clustering of the approximating graph.

    Rows of the top eigenvectors of ``D^-1/2 G D^-1/2`` are normalized to unit
    length and clustered by k-means started at the rows of the points nearest
    (in the embedded space) to each seed. Cluster j grows from seed j.
    ``rows`` may pass in precomputed :func:`spectral_rows` with ``n`` columns.
    """
    Y = np.asarray(getattr(embedded, "Y", embedded), dtype=float)
    n = len(seeds)
    N = graph.n_points
    if n < 2:
        raise ValueError("spectral_partition needs at least 2 seeds")
    if len(Y) != N:
        raise ValueError("embedded cloud does not match the graph")
    if n > N:
        raise ValueError("more seeds than points")
    U = spectral_rows(graph, n) if rows is None else rows
    _, start = cKDTree(Y).query(seeds.seeds[:, : Y.shape[1]], k=1)
    km = kmeans(U, U[np.atleast_1d(start)])
    labels = km.labels
    warning = None
    ncomp, comp = connected_components(graph.G, directed=False)
    if ncomp > n:
        warning = f"graph has {ncomp} components for {n} clusters; components labeled by majority"
        logger.warning(warning)
        for c in range(ncomp):
            idx = np.flatnonzero(comp == c)
            labels[idx] = np.bincount(labels[idx]).argmax()
        if len(np.unique(labels)) < n:
            labels = _fill_empty(U, labels, n)
    return labeling_from_labels(Y, labels, n, km.trace, warning)


def _fill_empty(X: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    labels = labels.copy()
    for j in range(1, n + 1):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=n + 1)
        donors = np.flatnonzero(counts[labels] > 1)
        cent = np.array([X[labels == l].mean(axis=0) if counts[l] else X[0] for l in range(n + 1)])
        dist = np.linalg.norm(X[donors] - cent[labels[donors]], axis=1)
        labels[donors[np.argmax(dist)]] = j
    return labels


def kwise_cluster(embedded, seeds: SeedSet, budget: int, rng_seed: int = 0, d: int | None = None,
                  sigma: float | None = None, near_pool: int | None = None) -> ClusterLabeling:
    """Hypergraph sampling, clique expansion and seeded spectral partition.

    ``d`` is the tuple size; it defaults to the embedding dimension (at least 3).
    """
    Y = np.asarray(getattr(embedded, "Y", embedded), dtype=float)
    if d is None:
        d = max(3, Y.shape[1])
    H = build_hypergraph(Y, d, budget, rng_seed, sigma, near_pool=near_pool)
    return spectral_partition(approximate_graph(H, len(Y)), seeds, Y)


# ---------------------------------------------------------------- k-means and EM


def kmeans(points, seeds, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL) -> ClusterLabeling:
    """Lloyd iterations from the given seeds.

    An emptied cluster is re-seeded at the point farthest from its current
    centroid. Stops once no centroid moves more than ``tol``.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    C = np.array(getattr(seeds, "seeds", seeds), dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    n = len(C)
    if n < 1:
        raise ValueError("need at least one seed")
    if n > len(X):
        raise ValueError("more seeds than points")
    C = C[:, : X.shape[1]]
    tree_free = len(X) * n <= 8_000_000
    trace = []
    labels = np.zeros(len(X), dtype=np.int64)
    for _ in range(max_iter):
        if tree_free:
            d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
            lab = np.argmin(d2, axis=1)
            best = d2[np.arange(len(X)), lab]
        else:
            dist, lab = cKDTree(C).query(X, k=1)
            best = dist ** 2
        counts = np.bincount(lab, minlength=n)
        for j in np.flatnonzero(counts == 0):
            # farthest point from its own centroid, taken from a cluster that can spare it
            spare = counts[lab] > 1
            far = np.flatnonzero(spare)[np.argmax(best[spare])]
            counts[lab[far]] -= 1
            lab[far] = j
            best[far] = 0.0
            counts[j] = 1
        trace.append(float(best.sum()))
        newC = np.zeros_like(C)
        np.add.at(newC, lab, X)
        newC /= counts[:, None]
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        labels = lab
        if shift < tol:
            break
    return labeling_from_labels(X, labels + 1, n, trace)


def _gmm_logpdf(X, means, covs):
    n, D = X.shape
    out = np.empty((n, len(means)))
    for j, (m, S) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(S)
        z = scipy.linalg.solve_triangular(L, (X - m).T, lower=True)
        out[:, j] = -0.5 * np.einsum("ij,ij->j", z, z) - np.log(np.diag(L)).sum() - 0.5 * D * np.log(2 * np.pi)
    return out


def em_gmm(points3d, n: int, seeds3d=None, max_iter: int = EM_MAX_ITER, tol: float = EM_TOL,
           rng_seed: int = 0) -> ClusterLabeling:
    """Full-covariance Gaussian mixture fitted by EM from seeded means.

    Covariances start at the data covariance over ``n`` and mixing weights are
    uniform. ``COV_FLOOR`` times the per-axis data variance is added to every
    covariance diagonal. Stops when the mean log-likelihood gains less than
    ``tol``. Components that own no point under the hard assignment are
    dropped and labels renumbered.
    """
    X = np.asarray(points3d, dtype=float)
    N, D = X.shape
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if seeds3d is None:
        means = X[rng.choice(N, size=n, replace=False)].copy()
    else:
        means = np.array(seeds3d, dtype=float).reshape(n, D)
    var = X.var(axis=0)
    floor = COV_FLOOR * np.where(var > 0, var, 1.0)
    base = np.atleast_2d(np.cov(X.T, bias=True)) / n + np.diag(floor)
    covs = np.repeat(base[None], n, axis=0)
    logw = np.full(n, -np.log(n))
    trace = []
    warning = None
    resp = None
    for _ in range(max_iter):
        lp = _gmm_logpdf(X, means, covs) + logw
        norm = scipy.special.logsumexp(lp, axis=1)
        ll = float(norm.mean())
        trace.append(ll)
        resp = np.exp(lp - norm[:, None])
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        Nk = resp.sum(axis=0)
        for j in range(n):
            if Nk[j] < 1e-10:
                means[j] = X[rng.integers(N)]
                covs[j] = base
                Nk[j] = 1e-10
                warning = "component collapsed and was reinitialized"
                continue
            means[j] = resp[:, j] @ X / Nk[j]
            Z = X - means[j]
            S = (resp[:, j, None] * Z).T @ Z / Nk[j] + np.diag(floor)
            try:
                np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                means[j] = X[rng.integers(N)]
                S = base
                warning = "singular covariance; component reinitialized"
            covs[j] = S
        logw = np.log(np.maximum(Nk, 1e-300) / N)
    if warning:
        logger.warning(warning)
    hard = np.argmax(resp, axis=1) + 1
    labels, kept = compact_labels(hard)
    lab = labeling_from_labels(X, labels, int(labels.max()), trace, warning)
    return replace(lab, source_ids=kept.astype(np.int64))

