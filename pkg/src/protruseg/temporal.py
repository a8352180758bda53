"""Frame-by-frame segmentation with seed propagation and merge/split handling.

Each frame is embedded together with one carried-over 3D point per cluster
of the previous frame. The embedded positions of those points seed the
clustering, so cluster identities persist through time. Clusters are
tracked as chains: a chain continues while its propagated seed survives,
and merges and splits open new chains that record their parents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .branch import TerminationSet, detect_terminations, DEFAULT_EXTENT_FRACTION, DEFAULT_RADIUS_SCALE
from .clustering import (ClusterLabeling, SeedSet, approximate_graph, build_hypergraph, em_gmm, kmeans,
                         labeling_from_labels, spectral_partition, spectral_rows)
from .data import VoxelFrame, VoxelSequence
from .embedding import DEFAULT_REG, EIG_TOL, EigensolverError, EmbeddedCloud, default_eigs, lle_embed, lle_weights
from .graph import knn_graph

logger = logging.getLogger(__name__)

METHODS = ("kwise", "kmeans", "em")
DEFAULT_BUDGET_FACTOR = 50
DEFAULT_TUPLE_SIZE = 3
DEFAULT_NEAR_POOL = 90  # near companions drawn from this many nearest neighbors


@dataclass(frozen=True)
class PipelineParams:
    k: int = 16
    eigs: tuple[int, ...] = default_eigs(5)
    budget_factor: int = DEFAULT_BUDGET_FACTOR  # hyperedge samples per point
    radius_scale: float = DEFAULT_RADIUS_SCALE
    extent_fraction: float = DEFAULT_EXTENT_FRACTION
    reg: float = DEFAULT_REG
    eig_tol: float = EIG_TOL
    rng_seed: int = 0
    tuple_size: int = DEFAULT_TUPLE_SIZE
    sigma: float | None = None  # None: median sampled volume
    near_pool: int | None = DEFAULT_NEAR_POOL  # None: 3 x tuple size
    method: str = "kwise"

    def __post_init__(self):
        object.__setattr__(self, "eigs", tuple(int(e) for e in self.eigs))
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.eigs or min(self.eigs) < 1 or len(set(self.eigs)) != len(self.eigs):
            raise ValueError("eigs must be distinct indices >= 1")
        if self.budget_factor < 10:
            raise ValueError("budget factor must be at least 10 samples per point")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True, eq=False)
class CarryoverPoints:
    points3d: np.ndarray  # (n, 3)
    source_cluster: np.ndarray  # (n,) cluster label at the source frame
    source_chain: np.ndarray  # (n,) chain id of that cluster

    @classmethod
    def empty(cls) -> "CarryoverPoints":
        return cls(np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self.points3d)


@dataclass(frozen=True, eq=False)
class AugmentedPoints:
    points: np.ndarray  # frame points followed by the non-coincident carryover points
    n_own: int
    carry_index: np.ndarray  # row of each carryover point in ``points``

    @property
    def carryover_count(self) -> int:
        return len(self.points) - self.n_own


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame_index: int
    labeling: ClusterLabeling | None  # own points only; None for a failed frame
    embedded: EmbeddedCloud | None
    terminations: TerminationSet | None
    seeds_used: SeedSet | None
    centroid3d: np.ndarray | None  # (n, 3)
    chain_ids: np.ndarray | None  # chain of each cluster label (index j-1)
    error: str | None = None
    preliminary_n: int | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def n(self) -> int:
        return 0 if self.labeling is None else self.labeling.n

    def chain_labels(self) -> np.ndarray:
        """Per-point chain id."""
        return self.chain_ids[self.labeling.labels - 1]


@dataclass
class Chain:
    chain_id: int
    start: int
    parents: tuple[int, ...] = ()
    kind: str = "initial"  # initial | merge | split | reseed
    # initial chains this one descends from (itself for an initial chain)
    roots: frozenset[int] = frozenset()
    frames: list[int] = field(default_factory=list)  # frames where the chain labels a cluster

    @property
    def end(self) -> int | None:
        return self.frames[-1] if self.frames else None


@dataclass(frozen=True, eq=False)
class SequenceResult:
    frames: tuple[FrameResult, ...]
    chains: dict[int, Chain]
    trajectories: dict[int, dict[int, np.ndarray]]  # chain -> frame -> 3D centroid
    params: PipelineParams | None = None

    @property
    def failed_frames(self) -> list[int]:
        return [f.frame_index for f in self.frames if not f.ok]

    def trajectory_rows(self) -> list[tuple[int, int, int, float, float, float]]:
        """(frame, cluster, chain_id, cx, cy, cz) ordered by frame then cluster."""
        rows = []
        for fr in self.frames:
            if not fr.ok:
                continue
            for j, (cid, c) in enumerate(zip(fr.chain_ids, fr.centroid3d), start=1):
                rows.append((fr.frame_index, j, int(cid), *map(float, c)))
        return rows


# ---------------------------------------------------------------- steps


def augment_frame(frame: VoxelFrame, carryover: CarryoverPoints) -> AugmentedPoints:
    """Append the carryover points; one that coincides with a frame point maps onto it."""
    pts = frame.points
    n = len(pts)
    if len(carryover) == 0:
        return AugmentedPoints(np.array(pts), n, np.empty(0, dtype=np.int64))
    lookup = {tuple(p): i for i, p in enumerate(pts)}
    extra: list[np.ndarray] = []
    index = np.empty(len(carryover), dtype=np.int64)
    for c, p in enumerate(carryover.points3d):
        key = tuple(p)
        if key in lookup:
            index[c] = lookup[key]
        else:
            lookup[key] = n + len(extra)
            index[c] = lookup[key]
            extra.append(p)
    X = np.vstack([pts] + ([np.asarray(extra)] if extra else []))
    return AugmentedPoints(X, n, index)


def propagate_seeds(labeling: ClusterLabeling, frame: VoxelFrame,
                    chain_ids: np.ndarray | None = None) -> CarryoverPoints:
    """The 3D point at each cluster's ``centroid_point_index``."""
    idx = np.asarray(labeling.centroid_point_index)
    chains = np.arange(1, labeling.n + 1) if chain_ids is None else np.asarray(chain_ids)
    return CarryoverPoints(np.array(frame.points[idx]), np.arange(1, labeling.n + 1), chains.astype(np.int64))


def torso_seed_index(Y: np.ndarray, chunk: int = 1024) -> int:
    """Embedded medoid: the point with the least summed distance to all others.

    The torso is the bulk of the body and collapses near the middle of the
    embedding; the medoid finds it without being dragged along heavy limbs
    the way the plain mean is.
    """
    Y = np.asarray(Y, dtype=float)
    total = np.concatenate([cdist(Y[s:s + chunk], Y).sum(axis=1) for s in range(0, len(Y), chunk)])
    return int(np.argmin(total))


def _fallback_seeds(Y: np.ndarray) -> np.ndarray:
    # no branches at all: two clusters from the extremes of the first coordinate
    return np.array([int(np.argmin(Y[:, 0])), int(np.argmax(Y[:, 0]))])


def initial_seeds(Y_own: np.ndarray, terminations: TerminationSet) -> SeedSet:
    """Termination seeds plus the torso seed, as used at the first frame."""
    tips = np.asarray(terminations.indices, dtype=np.int64)
    if len(tips) == 0:
        idx = _fallback_seeds(Y_own)
        return SeedSet(Y_own[idx], ("termination", "termination"))
    torso = torso_seed_index(Y_own)
    if torso in set(tips.tolist()):
        # degenerate tiny clouds only: take the next most central point
        d = cdist(Y_own, Y_own).sum(axis=1)
        d[tips] = np.inf
        torso = int(np.argmin(d))
    idx = np.append(tips, torso)
    return SeedSet(Y_own[idx], ("termination",) * len(tips) + ("torso",))


def reconcile_seeds(terminations: TerminationSet, propagated_embeds: np.ndarray, embedded,
                    preliminary: Callable[[SeedSet], np.ndarray] | None = None,
                    propagated_index: np.ndarray | None = None) -> tuple[SeedSet, np.ndarray]:
    """Merge/split reconciliation of propagated seeds against the current branches.

    A preliminary seeded partition groups the embedded cloud around the
    terminations and the torso seed. Each preliminary element yields one
    seed: its single propagated seed if it holds exactly one, otherwise its
    own termination (merge when it holds several, split when it holds
    none). Seed ``sources`` list the propagated seeds each one inherits.

    By default the preliminary partition is k-means on the embedded points
    and a propagated seed belongs to the element with the nearest centroid.
    ``preliminary`` replaces it with any seeded partitioner returning labels
    for every row of ``embedded.Y``; ``propagated_index`` then gives the rows
    of the propagated seeds. Returns the seeds and the preliminary labels of
    the cloud's own points.
    """
    Y_all = np.asarray(getattr(embedded, "Y", embedded), dtype=float)
    Y = np.asarray(getattr(embedded, "own", Y_all), dtype=float)
    P = np.asarray(propagated_embeds, dtype=float).reshape(-1, Y.shape[1])
    if len(terminations) == 0 and len(P) == 0:
        idx = _fallback_seeds(Y)
        return SeedSet(Y[idx], ("termination", "termination"), ((), ())), np.ones(len(Y), dtype=np.int64)
    base = initial_seeds(Y, terminations)
    if preliminary is None:
        pre = kmeans(Y, base.seeds)
        pre_labels = pre.labels
        owner = (np.argmin(((P[:, None, :] - pre.embedded_centroids[None]) ** 2).sum(axis=2), axis=1) + 1
                 if len(P) else np.empty(0, dtype=np.int64))
    else:
        if propagated_index is None or len(propagated_index) != len(P):
            raise ValueError("a custom preliminary partition needs the propagated seeds' rows")
        all_labels = np.asarray(preliminary(base))
        pre_labels = all_labels[: len(Y)]
        owner = all_labels[np.asarray(propagated_index, dtype=np.int64)]
    seeds, prov, sources = [], [], []
    for j in range(1, len(base) + 1):
        held = np.flatnonzero(owner == j)
        if len(held) == 1:
            seeds.append(P[held[0]])
            prov.append("propagated")
        else:
            seeds.append(base.seeds[j - 1])
            prov.append(base.provenance[j - 1])
        sources.append(tuple(int(h) for h in held))
    return SeedSet(np.asarray(seeds), tuple(prov), tuple(sources)), pre_labels


def embed_points(X: np.ndarray, params: PipelineParams, carry: int = 0) -> EmbeddedCloud:
    if len(X) <= params.k:
        raise ValueError(f"{len(X)} points is too few for k={params.k}")
    g = knn_graph(X, params.k)
    return lle_embed(lle_weights(X, g, params.reg), params.eigs, tol=params.eig_tol).with_carryover(carry)


def frame_rng_seed(params: PipelineParams, frame_index: int) -> int:
    return int(np.random.SeedSequence([params.rng_seed, frame_index]).generate_state(1)[0])


def make_partitioner(Y: np.ndarray, params: PipelineParams, frame_index: int = 0) -> Callable[[SeedSet], np.ndarray]:
    """Seeded clusterer over the rows of ``Y`` for the configured method.

    For k-wise clustering the hypergraph, its approximating graph and the
    spectral rows are built once and shared by every call.
    """
    if params.method == "kwise":
        H = build_hypergraph(Y, params.tuple_size, params.budget_factor * len(Y), frame_rng_seed(params, frame_index),
                             params.sigma, near_pool=params.near_pool)
        G = approximate_graph(H, len(Y))
        rows: dict[int, np.ndarray] = {}

        def part(seeds: SeedSet) -> np.ndarray:
            n = len(seeds)
            if n not in rows:
                rows[n] = spectral_rows(G, n)
            return spectral_partition(G, seeds, Y, rows=rows[n]).labels
        return part
    if params.method == "kmeans":
        return lambda seeds: kmeans(Y, seeds.seeds).labels
    return lambda seeds: em_gmm(Y, len(seeds), seeds.seeds, rng_seed=params.rng_seed).labels


def cluster_embedded(Y: np.ndarray, seeds: SeedSet, params: PipelineParams, frame_index: int = 0) -> np.ndarray:
    """Labels of every row of ``Y`` under the configured clustering method."""
    return make_partitioner(Y, params, frame_index)(seeds)


def _own_labeling(Y_own: np.ndarray, labels: np.ndarray, seeds: SeedSet) -> ClusterLabeling:
    """Relabel so every cluster keeps at least its seed's nearest own point."""
    labels = labels.copy()
    n = len(seeds)
    for j in range(1, n + 1):
        if not np.any(labels == j):
            counts = np.bincount(labels, minlength=n + 1)
            order = np.argsort(np.linalg.norm(Y_own - seeds.seeds[j - 1], axis=1), kind="stable")
            donor = next(i for i in order if counts[labels[i]] > 1)
            labels[donor] = j
    return labeling_from_labels(Y_own, labels, n)


def segment_frame(frame: VoxelFrame, carryover: CarryoverPoints, params: PipelineParams) -> FrameResult:
    """One pipeline step on one frame.

    Chain ids are filled in by :func:`segment_sequence`; here the result's
    ``chain_ids`` holds the cluster numbers.
    """
    aug = augment_frame(frame, carryover)
    emb = embed_points(aug.points, params, aug.carryover_count)
    Y = emb.Y
    Y_own = Y[: aug.n_own]
    # carryover points are isolated samples, not cloud structure: keep them out of branch detection
    terms = detect_terminations(Y_own, params.radius_scale, params.extent_fraction)
    part = make_partitioner(Y, params, frame.frame_index)
    if len(carryover):
        seeds, pre_labels = reconcile_seeds(terms, Y[aug.carry_index], emb,
                                            part if params.method == "kwise" else None, aug.carry_index)
        pre_n = int(pre_labels.max())
    else:
        seeds = initial_seeds(Y_own, terms)
        pre_n = None
    labels = part(seeds)
    lab = _own_labeling(Y_own, labels[: aug.n_own], seeds)
    c3 = np.array([frame.points[lab.labels == j].mean(axis=0) for j in range(1, lab.n + 1)])
    return FrameResult(frame.frame_index, lab, emb, terms, seeds, c3, np.arange(1, lab.n + 1),
                       preliminary_n=pre_n)


# ---------------------------------------------------------------- sequence


class _ChainBook:
    """Chain identities across frames.

    A cluster continues the chain of the single propagated seed it kept. A
    cluster holding several opens a merge chain whose parents are those
    chains. A cluster holding none opens a split chain whose parent is the
    chain of the nearest carryover point. After a failed frame there are no
    carryover points; the re-seeded clusters open chains whose parents are
    matched to the chains alive before the failure by 3D centroid. A chain's
    roots are the initial chains it descends from.
    """

    def __init__(self):
        self.chains: dict[int, Chain] = {}
        self.last_seen: dict[int, np.ndarray] = {}
        self.before_failure: list[int] = []

    def new(self, t: int, parents=(), kind="initial") -> int:
        cid = len(self.chains) + 1
        parents = tuple(sorted({int(p) for p in parents}))
        roots = frozenset().union(*(self.chains[p].roots for p in parents)) if parents else frozenset({cid})
        self.chains[cid] = Chain(cid, t, parents, kind, roots)
        return cid

    def failed(self, live: Sequence[int]):
        if len(live):
            self.before_failure = [int(c) for c in live]

    def _failure_parents(self, c3: np.ndarray) -> list[tuple[int, ...]]:
        prev = [c for c in self.before_failure if c in self.last_seen]
        self.before_failure = []
        out: list[tuple[int, ...]] = [() for _ in range(len(c3))]
        if not prev:
            return out
        cost = cdist(np.asarray(c3, dtype=float), np.array([self.last_seen[c] for c in prev]))
        for r, c in zip(*linear_sum_assignment(cost)):
            out[r] = (prev[c],)
        return out

    def assign(self, t: int, seeds: SeedSet, carry: CarryoverPoints, c3: np.ndarray) -> np.ndarray:
        out = np.zeros(len(seeds), dtype=np.int64)
        if len(carry) == 0:
            kind = "reseed" if self.chains else "initial"
            parents = self._failure_parents(c3) if kind == "reseed" else [()] * len(seeds)
            for j in range(len(seeds)):
                out[j] = self.new(t, parents[j], kind)
        else:
            nearest = np.argmin(cdist(np.asarray(c3, dtype=float), carry.points3d), axis=1)
            for j, src in enumerate(seeds.sources):
                held = sorted({int(carry.source_chain[s]) for s in src})
                if len(held) == 1:
                    out[j] = held[0]
                elif held:
                    out[j] = self.new(t, held, "merge")
                else:
                    out[j] = self.new(t, (int(carry.source_chain[nearest[j]]),), "split")
        for j, cid in enumerate(out):
            self.chains[int(cid)].frames.append(t)
            self.last_seen[int(cid)] = np.asarray(c3[j], dtype=float)
        return out

    def roots(self, cid: int) -> frozenset[int]:
        return self.chains[int(cid)].roots


def segment_sequence(sequence: VoxelSequence | Sequence[VoxelFrame], params: PipelineParams) -> SequenceResult:
    """Run :func:`segment_frame` over all frames, threading the carryover.

    A frame that fails (eigensolver trouble, degenerate input) is recorded
    with its error; the next frame starts again from its own terminations.
    """
    frames = list(sequence)
    if not frames:
        raise ValueError("empty sequence")
    book = _ChainBook()
    carry = CarryoverPoints.empty()
    results: list[FrameResult] = []
    traj: dict[int, dict[int, np.ndarray]] = {}
    for frame in frames:
        t = frame.frame_index
        try:
            fr = segment_frame(frame, carry, params)
        except (EigensolverError, np.linalg.LinAlgError, ValueError) as exc:
            logger.error("frame %d failed: %s", t, exc)
            results.append(FrameResult(t, None, None, None, None, None, None, error=str(exc)))
            book.failed(carry.source_chain)
            carry = CarryoverPoints.empty()
            continue
        cids = book.assign(t, fr.seeds_used, carry, fr.centroid3d)
        fr = FrameResult(t, fr.labeling, fr.embedded, fr.terminations, fr.seeds_used, fr.centroid3d, cids,
                         preliminary_n=fr.preliminary_n)
        results.append(fr)
        for cid, c in zip(cids, fr.centroid3d):
            traj.setdefault(int(cid), {})[t] = c
        carry = propagate_seeds(fr.labeling, frame, cids)
    return SequenceResult(tuple(results), book.chains, traj, params)
