"""Competing methods: seeded EM in 3D and seeded k-means in ISOMAP space.

Both start from the same frame-0 seeds as the main pipeline (the 3D points
at its branch terminations plus the torso seed) and keep their cluster
count afterwards. ``em3d`` starts each frame's EM at the previous frame's
means. ``isomap-kmeans`` uses the carryover scheme of the main pipeline: the
representative 3D point of each cluster is appended to the next frame and
its ISOMAP coordinates seed k-means there.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .branch import detect_terminations
from .clustering import ClusterLabeling, SeedSet, em_gmm, kmeans, labeling_from_labels
from .data import VoxelFrame, VoxelSequence
from .embedding import EigensolverError, isomap_embed
from .graph import knn_graph
from .temporal import (Chain, FrameResult, PipelineParams, SequenceResult, augment_frame, embed_points,
                       initial_seeds, propagate_seeds, CarryoverPoints)

logger = logging.getLogger(__name__)

BASELINES = ("em3d", "isomap-kmeans")


def frame0_seed_points(frame: VoxelFrame, params: PipelineParams) -> np.ndarray:
    """Indices of the frame points used as seeds by the main pipeline at its first frame."""
    emb = embed_points(frame.points, params)
    terms = detect_terminations(emb.Y, params.radius_scale, params.extent_fraction)
    seeds = initial_seeds(emb.Y, terms)
    _, idx = cKDTree(emb.Y).query(seeds.seeds, k=1)
    return np.atleast_1d(idx)


def _chains(ids: Sequence[int], frames_seen: dict[int, list[int]]) -> dict[int, Chain]:
    return {int(c): Chain(int(c), frames_seen[int(c)][0], (), "initial", frozenset({int(c)}), frames_seen[int(c)])
            for c in ids}


def _finish(results: list[FrameResult], params: PipelineParams) -> SequenceResult:
    traj: dict[int, dict[int, np.ndarray]] = {}
    seen: dict[int, list[int]] = {}
    for fr in results:
        if not fr.ok:
            continue
        for cid, c in zip(fr.chain_ids, fr.centroid3d):
            traj.setdefault(int(cid), {})[fr.frame_index] = c
            seen.setdefault(int(cid), []).append(fr.frame_index)
    return SequenceResult(tuple(results), _chains(sorted(seen), seen), traj, params)


def _centroids3d(points: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    return np.array([points[labels == j].mean(axis=0) for j in range(1, n + 1)])


def em3d_sequence(sequence: VoxelSequence | Sequence[VoxelFrame], params: PipelineParams) -> SequenceResult:
    """Seeded 3D Gaussian mixtures, each frame started at the previous means."""
    frames = list(sequence)
    if not frames:
        raise ValueError("empty sequence")
    means = frames[0].points[frame0_seed_points(frames[0], params)]
    ids = np.arange(1, len(means) + 1)
    results = []
    for fr in frames:
        lab = em_gmm(fr.points, len(means), means, rng_seed=params.rng_seed)
        kept = lab.source_ids - 1
        ids = ids[kept]
        means = lab.embedded_centroids
        seeds = SeedSet(means, ("propagated",) * len(means))
        results.append(FrameResult(fr.frame_index, lab, None, None, seeds, means.copy(), ids.copy()))
    return _finish(results, params)


def _isomap_labels(X: np.ndarray, params: PipelineParams, seed_rows: np.ndarray) -> tuple[np.ndarray, ClusterLabeling]:
    """k-means in the ISOMAP embedding of ``X`` seeded at the given rows.

    Rows outside the embedded component take the label of their nearest
    embedded neighbor in 3D. Returns per-row labels and the labeling of the
    embedded rows.
    """
    g = knn_graph(X, params.k)
    emb = isomap_embed(X, g, len(params.eigs))
    rows = np.arange(len(X)) if emb.index_map is None else emb.index_map
    pos = np.full(len(X), -1)
    pos[rows] = np.arange(len(rows))
    seed_pos = pos[seed_rows]
    if np.any(seed_pos < 0):
        # a seed off the main component: use its nearest embedded point
        _, near = cKDTree(X[rows]).query(X[seed_rows[seed_pos < 0]], k=1)
        seed_pos[seed_pos < 0] = near
    km = kmeans(emb.Y, emb.Y[seed_pos])
    labels = np.zeros(len(X), dtype=np.int64)
    labels[rows] = km.labels
    if len(rows) < len(X):
        rest = np.flatnonzero(pos < 0)
        _, near = cKDTree(X[rows]).query(X[rest], k=1)
        labels[rest] = km.labels[near]
    return labels, km


def isomap_kmeans_sequence(sequence: VoxelSequence | Sequence[VoxelFrame], params: PipelineParams) -> SequenceResult:
    """Seeded k-means in ISOMAP space with carryover-point propagation."""
    frames = list(sequence)
    if not frames:
        raise ValueError("empty sequence")
    seed_idx = frame0_seed_points(frames[0], params)
    n = len(seed_idx)
    ids = np.arange(1, n + 1)
    carry = CarryoverPoints.empty()
    results = []
    for fr in frames:
        try:
            if len(carry) == 0:
                X, rows = fr.points, seed_idx
                n_own = len(X)
            else:
                aug = augment_frame(fr, carry)
                X, rows, n_own = aug.points, aug.carry_index, aug.n_own
            labels, _ = _isomap_labels(X, params, rows)
        except (EigensolverError, ValueError, np.linalg.LinAlgError) as exc:
            logger.error("frame %d failed: %s", fr.frame_index, exc)
            results.append(FrameResult(fr.frame_index, None, None, None, None, None, None, error=str(exc)))
            carry = CarryoverPoints.empty()
            continue
        own = labels[:n_own]
        # keep every cluster alive on the frame's own points
        for j in range(1, n + 1):
            if not np.any(own == j):
                counts = np.bincount(own, minlength=n + 1)
                target = X[rows[j - 1]] if len(carry) else fr.points[seed_idx[j - 1]]
                order = np.argsort(np.linalg.norm(fr.points - target, axis=1), kind="stable")
                own[next(i for i in order if counts[own[i]] > 1)] = j
        # representatives are chosen in 3D, the space the carryover lives in
        lab = labeling_from_labels(fr.points, own, n)
        c3 = _centroids3d(fr.points, own, n)
        results.append(FrameResult(fr.frame_index, lab, None, None, None, c3, ids.copy()))
        carry = propagate_seeds(lab, fr, ids)
    return _finish(results, params)


def run_baseline(name: str, sequence, params: PipelineParams) -> SequenceResult:
    if name == "em3d":
        return em3d_sequence(sequence, params)
    if name == "isomap-kmeans":
        return isomap_kmeans_sequence(sequence, params)
    raise ValueError(f"unknown baseline {name!r}; expected one of {BASELINES}")
