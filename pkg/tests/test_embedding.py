import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, strategies as st

from protruseg import synth
from protruseg.data import SubsampleParams, subsample
from protruseg.embedding import (affinity_matrix, eigenfunction_field, geodesic_distances, isomap_embed, lle,
                                 lle_embed, lle_weights, smallest_eigenpairs)
from protruseg.graph import NeighborGraph, knn_graph


def ring(n=60, r=10.0):
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(n)])


def subspace_angle(A, B):
    return float(np.max(scipy.linalg.subspace_angles(A, B)))


def test_midpoint_weights():
    pts = np.array([[0.0, 0, 0], [-1, 0, 0], [1, 0, 0]])
    g = NeighborGraph(2, np.array([[1, 2], [0, 2], [0, 1]]), np.array([[1, 1], [1, 2], [1, 2.0]]), pts)
    w = lle_weights(pts, g)
    np.testing.assert_allclose(w.weights[0], [0.5, 0.5])
    assert w.residuals[0] == pytest.approx(0.0, abs=1e-12)


def test_coincident_neighbors_rejected():
    pts = np.array([[0.0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 0, 0]])
    g = NeighborGraph(2, np.array([[1, 2], [0, 2], [0, 1], [0, 1]]), np.zeros((4, 2)), pts)
    with pytest.raises(ValueError, match="degenerate"):
        lle_weights(pts, g)


def _kkt_weights(x, nbrs, reg):
    # sum-to-one least squares through the Lagrange system
    Z = nbrs - x
    G = Z @ Z.T
    k = len(nbrs)
    G = G + reg * np.trace(G) / k * np.eye(k)
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = 2 * G
    A[:k, k] = A[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    return np.linalg.solve(A, rhs)[:k]


def test_weights_match_lagrange_oracle():
    pts = np.random.default_rng(5).normal(size=(50, 3))
    g = knn_graph(pts, 6)
    w = lle_weights(pts, g, reg=0.1)
    for i in range(50):
        wi = _kkt_weights(pts[i], pts[g.neighbors[i]], 0.1)
        np.testing.assert_allclose(w.weights[i], wi, atol=1e-9)
        assert w.residuals[i] == pytest.approx(np.linalg.norm(pts[i] - wi @ pts[g.neighbors[i]]), abs=1e-9)


@given(st.integers(0, 10_000), st.integers(4, 12))
def test_weight_matrix_invariants(seed, k):
    pts = np.random.default_rng(seed).normal(size=(40, 3))
    g = knn_graph(pts, k)
    w = lle_weights(pts, g)
    np.testing.assert_allclose(np.asarray(w.W.sum(axis=1)).ravel(), 1.0, atol=1e-9)
    W = w.W.tocoo()
    nb = {(i, j) for i in range(40) for j in g.neighbors[i]}
    assert all((i, j) in nb for i, j in zip(W.row, W.col))
    M = affinity_matrix(w).toarray()
    I_W = np.eye(40) - w.W.toarray()
    np.testing.assert_allclose(M, I_W.T @ I_W, atol=1e-9)
    ones = np.full(40, 1 / np.sqrt(40))
    assert np.linalg.norm(M @ ones) < 1e-8


def test_ring_matches_dense_oracle():
    pts = ring()
    w = lle_weights(pts, knn_graph(pts, 2))
    M = affinity_matrix(w).toarray()
    _, vecs = scipy.linalg.eigh(M)
    for thr in (0, 10_000):  # sparse shift-invert path and dense path
        emb = lle_embed(w, (1, 2), dense_threshold=thr)
        assert subspace_angle(emb.Y, vecs[:, 1:3]) < 1e-6


def test_random_cloud_matches_dense_oracle():
    pts = np.random.default_rng(2).normal(size=(300, 3)) * [3, 1, 0.5]
    w = lle_weights(pts, knn_graph(pts, 10))
    vals, vecs = scipy.linalg.eigh(affinity_matrix(w).toarray())
    assert vals[3] - vals[2] > 1e-6  # the selected subspace is well separated
    emb = lle_embed(w, (1, 2), dense_threshold=0)
    assert subspace_angle(emb.Y, vecs[:, 1:3]) < 1e-6


def test_embedding_moments():
    pts = np.random.default_rng(4).normal(size=(400, 3)) * [4, 2, 1]
    emb = lle(pts, knn_graph(pts, 12), (1, 2, 3, 4, 5))
    N = len(pts)
    np.testing.assert_allclose(emb.Y.mean(axis=0), 0.0, atol=1e-8)
    np.testing.assert_allclose(emb.Y.T @ emb.Y / N, np.eye(5), atol=1e-6)
    assert np.all(np.diff(emb.eigenvalues) >= -1e-12)


def test_selection_changes_embedding():
    pts = np.random.default_rng(4).normal(size=(300, 3)) * [4, 2, 1]
    w = lle_weights(pts, knn_graph(pts, 12))
    a, b = lle_embed(w, (1, 2, 3)), lle_embed(w, (2, 3, 4))
    assert subspace_angle(a.Y, b.Y) > 0.5
    np.testing.assert_allclose(a.Y[:, 1:], b.Y[:, :2])


def test_constant_field():
    pts = ring()
    emb = lle(pts, knn_graph(pts, 2), (1, 2))
    f = eigenfunction_field(emb, 0)
    assert np.var(f.values) < 1e-20
    with pytest.raises(IndexError):
        eigenfunction_field(emb, 99)


def test_chain_field_monotone():
    rng = np.random.default_rng(0)
    chain = np.column_stack([np.arange(80.0), rng.uniform(-0.05, 0.05, 80), np.zeros(80)])
    f = eigenfunction_field(lle(chain, knn_graph(chain, 4), (1,)), 1)
    d = np.diff(f.values)
    assert np.all(d > 0) or np.all(d < 0)
    assert {f.argmax, f.argmin} == {0, 79}


def test_star_field_peaks_on_protrusions():
    links = synth.star_body()
    motion = synth.MotionSpec({}, 1)
    fr = synth.generate_sequence(links, motion, synth.VOXEL_MM)[0]
    fr, _ = subsample(fr, SubsampleParams(8, 0))
    segs = synth.link_segments(links, motion, 0)
    tips = {l: segs[l][1] for l in (*synth.STAR_LIMBS, synth.TORSO)}
    emb = lle(fr.points, knn_graph(fr.points, 16), (1, 2, 3, 4))
    near = lambda i: min(tips, key=lambda l: np.linalg.norm(tips[l] - fr.points[i]))
    dist = lambda i: min(np.linalg.norm(t - fr.points[i]) for t in tips.values())
    hit = set()
    for e in range(1, 5):
        f = eigenfunction_field(emb, e)
        dominant = f.argmax if f.values.max() >= -f.values.min() else f.argmin
        assert dist(dominant) < 10 * synth.VOXEL_MM
        for i in (f.argmax, f.argmin):
            if dist(i) < 10 * synth.VOXEL_MM:
                hit.add(near(i))
    assert set(synth.STAR_LIMBS) <= hit


def test_eigensolver_failure_is_reported():
    pts = ring(8)
    w = lle_weights(pts, knn_graph(pts, 2))
    from protruseg.embedding import EigensolverError
    with pytest.raises(EigensolverError):
        lle_embed(w, (1, 7))
    with pytest.raises(EigensolverError):
        smallest_eigenpairs(sp.identity(3, format="csr"), 4)


def test_isomap_arc_order():
    a = np.linspace(0, 1.5 * np.pi, 80)
    arc = np.column_stack([np.cos(a), np.sin(a), np.zeros(80)]) * 20
    emb = isomap_embed(arc, knn_graph(arc, 4), 1)
    order = np.argsort(emb.Y[:, 0])
    assert np.array_equal(order, np.arange(80)) or np.array_equal(order, np.arange(80)[::-1])


def test_isomap_geodesic_gap():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(30, 3))
    B = rng.normal(size=(30, 3)) + [6, 0, 0]
    pts = np.vstack([A, B])
    D = geodesic_distances(knn_graph(pts, 6))
    if np.isinf(D[:30, 30:]).all():
        # disconnected: add a single bridge edge
        pytest.skip("clusters disconnected at this k")
    E = np.linalg.norm(pts[:30, None] - pts[None, 30:], axis=2)
    assert D[:30, 30:].min() >= E.min() - 1e-12


def test_geodesics_match_floyd_warshall():
    rng = np.random.default_rng(8)
    pts = rng.uniform(size=(200, 3))
    g = knn_graph(pts, 8)
    D = geodesic_distances(g)
    F = np.full((200, 200), np.inf)
    np.fill_diagonal(F, 0.0)
    for i in range(200):
        for j, d in zip(g.neighbors[i], g.distances[i]):
            F[i, j] = F[j, i] = min(F[i, j], d)
    for m in range(200):
        F = np.minimum(F, F[:, m:m + 1] + F[m:m + 1, :])
    assert np.isfinite(F).all()
    np.testing.assert_allclose(D, F, rtol=1e-12)


def test_isomap_largest_component():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(size=(40, 3)), rng.normal(size=(10, 3)) + 100])
    emb = isomap_embed(pts, knn_graph(pts, 5), 2)
    np.testing.assert_array_equal(emb.index_map, np.arange(40))
    assert emb.Y.shape == (40, 2)
