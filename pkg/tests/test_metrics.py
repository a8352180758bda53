import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from protruseg.data import AprioriSegmentation, VoxelFrame
from protruseg.metrics import (LabelHistogram, coarsening_score, consistency_score, label_histogram,
                               score_labelings, segmentation_score, trajectory_steps)

labels_strategy = st.integers(20, 200).flatmap(
    lambda n: st.tuples(arrays(np.int64, n, elements=st.integers(1, 5)), arrays(np.int64, n, elements=st.integers(1, 4))))


def test_coarsening_perfect():
    gt = np.repeat([1, 2, 3], 10)
    assert coarsening_score(gt, gt) == 1.0


def test_coarsening_half_split():
    gt = np.repeat([1, 2, 3], 10)
    lab = gt.copy()
    lab[:5] = 7
    assert coarsening_score(lab, gt) == pytest.approx(np.mean([0.5, 1, 1]))


def test_coarsening_random_matches_count():
    rng = np.random.default_rng(0)
    gt = np.repeat([1, 2], 1000)
    lab = rng.integers(1, 5, 2000)
    expect = np.mean([np.bincount(lab[gt == g]).max() / 1000 for g in (1, 2)])
    got = coarsening_score(lab, gt)
    assert got == pytest.approx(expect)
    assert abs(got - 0.25) < 3 / np.sqrt(1000)


def test_segmentation_equal_to_apriori():
    a = AprioriSegmentation({1: 1, 2: 2, 3: 2, 4: 3, 5: 3}, "girdles")
    gt = np.repeat([1, 2, 3, 4, 5], 20)
    assert segmentation_score(a.segments_for(gt) + 10, a, gt) == 1.0


def test_segmentation_uniform_mixing():
    a = AprioriSegmentation({1: 1}, "one")
    gt = np.ones(400, dtype=int)
    assert segmentation_score(np.tile([1, 2, 3, 4], 100), a, gt) == pytest.approx(0.25)


def test_segmentation_hand_computed():
    a = AprioriSegmentation({1: 1, 2: 2, 3: 3}, "three")
    gt = np.repeat([1, 2, 3], 4)
    lab = np.array([1, 1, 1, 2,  # 3/4
                    2, 2, 3, 3,  # 2/4
                    4, 4, 4, 4])  # 4/4
    assert segmentation_score(lab, a, gt) == pytest.approx((0.75 + 0.5 + 1.0) / 3)


def test_consistency_examples():
    gt = np.ones(4, dtype=int)
    ref = label_histogram(np.array([1, 1, 1, 1]), gt)
    assert consistency_score(np.array([1, 1, 1, 1]), ref, gt) == 1.0
    assert consistency_score(np.array([2, 2, 2, 2]), ref, gt) == 0.0
    assert consistency_score(np.array([1, 1, 1, 2]), ref, gt) == pytest.approx(0.75)


def test_consistency_pools_merged_chains():
    gt = np.repeat([1, 2], 4)
    ref = label_histogram(np.array([1, 1, 2, 2, 2, 2, 2, 2]), gt)
    # chain 3 is a merge of chains 1 and 2
    roots = {1: {1}, 2: {2}, 3: {1, 2}}.__getitem__
    assert consistency_score(np.full(8, 3), ref, gt, roots) == 1.0
    assert consistency_score(np.full(8, 3), ref, gt) == 0.0


def test_histogram_must_be_distribution():
    with pytest.raises(ValueError):
        LabelHistogram({1: {1: 0.5}})


@given(labels_strategy, st.permutations([1, 2, 3, 4, 5]))
def test_scores_permutation_invariant(data, perm):
    lab, gt = data
    relabel = np.array([0] + list(perm))[lab]
    a = AprioriSegmentation({int(g): (int(g) + 1) // 2 for g in np.unique(gt)}, "pairs")
    assert coarsening_score(relabel, gt) == pytest.approx(coarsening_score(lab, gt))
    assert segmentation_score(relabel, a, gt) == pytest.approx(segmentation_score(lab, a, gt))
    ref = label_histogram(lab, gt)
    ref_p = label_histogram(relabel, gt)
    assert consistency_score(relabel, ref_p, gt) == pytest.approx(1.0)
    assert consistency_score(lab, ref, gt) == pytest.approx(1.0)


@given(labels_strategy)
def test_coarsening_lower_bound(data):
    lab, gt = data
    n_labels = len(np.unique(lab))
    assert coarsening_score(lab, gt) >= 1.0 / n_labels - 1e-12


@given(labels_strategy, st.integers(0, 2**31))
def test_consistency_in_unit_interval(data, seed):
    lab, gt = data
    other = np.random.default_rng(seed).permutation(lab)
    c = consistency_score(other, label_histogram(lab, gt), gt)
    assert 0.0 <= c <= 1.0


def test_score_labelings_oracle_all_ones():
    apriori = [AprioriSegmentation({1: 1, 2: 1, 3: 2}, "a"), AprioriSegmentation({1: 1, 2: 2, 3: 3}, "b")]
    gt = np.repeat([1, 2, 3], 5)
    frames = [VoxelFrame(np.random.default_rng(t).normal(size=(15, 3)), gt, t) for t in range(3)]
    s = score_labelings([gt.copy() for _ in frames], frames, apriori)
    assert s.consistency == [1.0, 1.0, 1.0]
    assert s.coarsening == [1.0, 1.0, 1.0]
    assert s.segmentation["b"] == [1.0, 1.0, 1.0]
    # links 1 and 2 share a segment but carry different labels
    assert s.segmentation["a"] == pytest.approx([0.75] * 3)
    assert s.header() == ["frame", "consistency", "coarsening", "seg_a", "seg_b"]


def test_score_labelings_skips_failed_and_needs_gt():
    gt = np.repeat([1, 2], 5)
    frames = [VoxelFrame(np.zeros((10, 3)), gt, t) for t in range(3)]
    s = score_labelings([None, gt, gt], frames, [])
    assert s.frames == [1, 2] and s.consistency[0] == 1.0
    with pytest.raises(ValueError):
        score_labelings([gt], [VoxelFrame(np.zeros((10, 3)))], [])


def test_trajectory_steps():
    steps = trajectory_steps({1: {0: np.zeros(3), 1: np.array([3.0, 4, 0]), 3: np.array([3.0, 4, 1])}})
    # the gap between frames 1 and 3 is not a step
    np.testing.assert_allclose(steps[1], [5.0])
