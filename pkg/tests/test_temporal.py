import numpy as np
import pytest

from protruseg import synth
from protruseg.branch import TerminationSet
from protruseg.clustering import SeedSet, labeling_from_labels
from protruseg.data import SubsampleParams, VoxelFrame, VoxelSequence, subsample
from protruseg.temporal import (CarryoverPoints, PipelineParams, _ChainBook, augment_frame, initial_seeds,
                                propagate_seeds, reconcile_seeds, segment_frame, segment_sequence)


@pytest.fixture(scope="module")
def star_frame():
    fr = synth.preset_sequences("star_walk", frames=1)[0]
    return subsample(fr, SubsampleParams(8, 0))[0]


def same_partition(a, b):
    return np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :])


def y_embedding(m=30):
    arms = [np.linspace(1, 10, m)[:, None] * [np.cos(a), np.sin(a)] for a in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
    Y = np.vstack(arms + [np.zeros((1, 2))])
    return Y, TerminationSet(np.array([m - 1, 2 * m - 1, 3 * m - 1]), 2.0)


def test_augment_cases():
    fr = VoxelFrame(np.arange(30, dtype=float).reshape(10, 3))
    a = augment_frame(fr, CarryoverPoints.empty())
    np.testing.assert_array_equal(a.points, fr.points)
    assert a.carryover_count == 0
    far = np.array([[100.0, 0, 0], [200, 0, 0], [300, 0, 0]])
    c = CarryoverPoints(far, np.arange(1, 4), np.arange(1, 4))
    a = augment_frame(fr, c)
    assert len(a.points) == 13 and a.carryover_count == 3
    np.testing.assert_array_equal(a.carry_index, [10, 11, 12])
    c = CarryoverPoints(np.vstack([far[:2], fr.points[4]]), np.arange(1, 4), np.arange(1, 4))
    a = augment_frame(fr, c)
    assert len(a.points) == 12
    np.testing.assert_array_equal(a.carry_index, [10, 11, 4])


def test_propagate_one_per_cluster():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    fr = VoxelFrame(pts)
    lab = labeling_from_labels(pts, np.arange(50) % 5 + 1, 5)
    c1 = propagate_seeds(lab, fr)
    c2 = propagate_seeds(lab, VoxelFrame(pts, None, 1))
    assert len(c1) == 5
    np.testing.assert_array_equal(c1.points3d, c2.points3d)
    np.testing.assert_array_equal(c1.points3d, pts[lab.centroid_point_index])


def test_reconcile_steady_state():
    Y, terms = y_embedding()
    P = Y[[25, 55, 85]]
    seeds, _ = reconcile_seeds(terms, P, Y)
    assert seeds.provenance.count("propagated") == 3
    assert len(seeds) == 4  # three branches plus the torso element
    for p in P:
        assert any(np.allclose(p, s) for s in seeds.seeds)


def test_reconcile_merge():
    Y, terms = y_embedding()
    # two propagated seeds in the first branch, one each elsewhere
    seeds, _ = reconcile_seeds(terms, Y[[20, 28, 55, 85, 90]], Y)
    merged = [i for i, s in enumerate(seeds.sources) if len(s) >= 2]
    assert len(merged) == 1
    assert seeds.provenance[merged[0]] == "termination"
    np.testing.assert_allclose(seeds.seeds[merged[0]], Y[29])
    assert len(seeds) == 4 and sum(map(len, seeds.sources)) == 5


def test_reconcile_split():
    Y, terms = y_embedding()
    seeds, _ = reconcile_seeds(terms, Y[[25, 55, 90]], Y)
    new = [i for i, s in enumerate(seeds.sources) if not s]
    assert len(new) == 1
    assert seeds.provenance[new[0]] == "termination"
    np.testing.assert_allclose(seeds.seeds[new[0]], Y[89])


def test_initial_seeds_add_torso():
    Y, terms = y_embedding()
    s = initial_seeds(Y, terms)
    assert s.provenance == ("termination",) * 3 + ("torso",)
    np.testing.assert_allclose(s.seeds[-1], [0.0, 0.0])


def test_frame_fixed_point(star_frame):
    p = PipelineParams(k=12)
    fr = VoxelFrame(star_frame.points[::2], star_frame.gt_labels[::2], 0, star_frame.voxel_size)
    a = segment_frame(fr, CarryoverPoints.empty(), p)
    carry = propagate_seeds(a.labeling, fr)
    b = segment_frame(fr, carry, p)
    assert same_partition(a.labeling.labels, b.labeling.labels)
    np.testing.assert_array_equal(propagate_seeds(b.labeling, fr).points3d, carry.points3d)


def test_star_frame_limbs_single_labeled(star_frame):
    r = segment_frame(star_frame, CarryoverPoints.empty(), PipelineParams(k=12))
    assert r.n == len(synth.STAR_LIMBS) + 1
    for limb in synth.STAR_LIMBS:
        lab = r.labeling.labels[star_frame.gt_labels == limb]
        assert np.bincount(lab).max() / len(lab) >= 0.95


def test_single_frame_sequence(star_frame):
    res = segment_sequence(VoxelSequence((star_frame,)), PipelineParams(k=12))
    assert len(res.frames) == 1 and res.frames[0].ok
    assert all(c.kind == "initial" and c.frames == [0] for c in res.chains.values())
    assert res.frames[0].preliminary_n is None


def test_failed_frame_is_recorded_and_reseeded(star_frame):
    tiny = VoxelFrame(star_frame.points[:5], star_frame.gt_labels[:5], 1, star_frame.voxel_size)
    frames = (star_frame, tiny, VoxelFrame(star_frame.points, star_frame.gt_labels, 2, star_frame.voxel_size))
    res = segment_sequence(VoxelSequence(frames), PipelineParams(k=12))
    assert res.failed_frames == [1]
    assert res.frames[2].ok
    first = set(res.frames[0].chain_ids.tolist())
    for cid in res.frames[2].chain_ids:
        c = res.chains[int(cid)]
        assert c.kind == "reseed" and len(c.parents) == 1 and c.parents[0] in first
    # identical geometry before and after the failure: parents match one to one
    assert sorted(res.chains[int(c)].parents[0] for c in res.frames[2].chain_ids) == sorted(first)


def test_chain_book_merge_and_split():
    book = _ChainBook()
    c3 = np.array([[0.0, 0, 0], [10, 0, 0], [20, 0, 0]])
    ids = book.assign(0, SeedSet(np.zeros((3, 2)), ("termination",) * 3), CarryoverPoints.empty(), c3)
    np.testing.assert_array_equal(ids, [1, 2, 3])
    carry = CarryoverPoints(c3, np.arange(1, 4), ids)
    # clusters 1 and 2 merge; cluster 3 persists
    seeds = SeedSet(np.zeros((2, 2)), ("termination", "propagated"), ((0, 1), (2,)))
    ids2 = book.assign(1, seeds, carry, np.array([[5.0, 0, 0], [20, 0, 0]]))
    merge = book.chains[int(ids2[0])]
    assert merge.kind == "merge" and merge.parents == (1, 2) and merge.roots == {1, 2}
    assert ids2[1] == 3
    # the merged cluster separates again: one keeps the seed, the other is new
    carry = CarryoverPoints(np.array([[5.0, 0, 0], [20, 0, 0]]), np.arange(1, 3), ids2)
    seeds = SeedSet(np.zeros((3, 2)), ("propagated", "termination", "propagated"), ((0,), (), (1,)))
    ids3 = book.assign(2, seeds, carry, np.array([[1.0, 0, 0], [9, 0, 0], [20, 0, 0]]))
    split = book.chains[int(ids3[1])]
    assert ids3[0] == ids2[0] and ids3[2] == 3
    assert split.kind == "split" and split.parents == (int(ids2[0]),) and split.roots == {1, 2}
    assert book.chains[1].end == 0 and merge.end == 2
