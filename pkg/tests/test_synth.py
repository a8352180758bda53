import itertools

import numpy as np
import pytest

from protruseg import synth
from protruseg.synth import LinkSpec, MotionSpec, generate_sequence, link_segments


@pytest.fixture(scope="module")
def star_walk():
    return synth.preset_sequences("star_walk")


@pytest.fixture(scope="module")
def arm_touch():
    return synth.preset_sequences("arm_touch")


def _seg_dist(p, a, b):
    # independent scalar form of the point-to-segment distance
    ab = [b[i] - a[i] for i in range(3)]
    ap = [p[i] - a[i] for i in range(3)]
    t = sum(x * y for x, y in zip(ap, ab)) / sum(x * x for x in ab)
    t = min(1.0, max(0.0, t))
    return sum((p[i] - a[i] - t * ab[i]) ** 2 for i in range(3)) ** 0.5


def test_single_static_link():
    links = [LinkSpec(1, None, 200.0, 20.0)]
    seq = generate_sequence(links, MotionSpec({}, 3), 10.0)
    assert len(seq) == 3
    for fr in seq:
        np.testing.assert_array_equal(fr.points, seq[0].points)
        assert set(fr.gt_labels.tolist()) == {1}
    # every voxel lies inside the capsule
    d = synth.point_segment_distance(seq[0].points, np.zeros(3), np.array([0, 0, 200.0]))
    assert d.max() <= 20.0


def test_hinge_tie_goes_to_lower_id():
    links = [LinkSpec(1, None, 100.0, 30.0), LinkSpec(2, 1, 100.0, 30.0, (1, 0, 0), (0, 0, 100.0))]
    motion = MotionSpec({2: np.radians(np.linspace(0, 90, 4))}, 4)
    seq = generate_sequence(links, motion, 10.0)
    ties = 0
    for fr in seq:
        segs = link_segments(links, motion, fr.frame_index)
        d1 = synth.point_segment_distance(fr.points, *segs[1])
        d2 = synth.point_segment_distance(fr.points, *segs[2])
        tie = np.abs(d1 - d2) <= 1e-9
        ties += int(tie.sum())
        assert np.all(fr.gt_labels[tie] == 1)
    assert ties > 0


def test_star_labels_match_exhaustive_oracle():
    links = synth.star_body()
    motion = MotionSpec({}, 1)
    fr = generate_sequence(links, motion, 40.0)[0]
    segs = link_segments(links, motion, 0)
    ids = sorted(segs)
    for p, lab in zip(fr.points.tolist(), fr.gt_labels.tolist()):
        dist = [_seg_dist(p, *(s.tolist() for s in segs[i])) for i in ids]
        best = min(dist)
        expect = next(i for i, dd in zip(ids, dist) if dd <= best + 1e-9)
        assert lab == expect


def test_rigid_link_voxel_count_stable():
    links = [LinkSpec(1, None, 300.0, 40.0, (0.3, 0.5, 0.8))]
    motion = MotionSpec({1: np.linspace(0, 1.2, 8)}, 8)
    counts = np.array([len(f) for f in generate_sequence(links, motion, 10.0)])
    assert (counts.max() - counts.min()) / counts.mean() < 0.05


def test_invalid_bodies():
    with pytest.raises(ValueError):
        LinkSpec(1, None, 0.0, 10.0)
    with pytest.raises(ValueError):
        synth.validate_tree([LinkSpec(1, 2, 10.0, 1.0), LinkSpec(2, 1, 10.0, 1.0)])
    with pytest.raises(ValueError):
        MotionSpec({1: [0.0, np.inf]}, 2)
    with pytest.raises(ValueError):
        generate_sequence([LinkSpec(1, None, 10.0, 1.0)], MotionSpec({}, 1), 0.0)


def test_body_json_roundtrip():
    links, motion = synth.preset_body("clap", frames=5)
    back_links, back_motion = synth.body_from_json(synth.body_to_json(links, motion))
    assert back_links == links
    for lid, traj in motion.angles.items():
        np.testing.assert_allclose(back_motion.angles[lid], traj)


def test_unknown_preset():
    with pytest.raises(ValueError):
        synth.preset_sequences("unknown")


def test_star_walk_limbs_never_touch(star_walk):
    links, motion = synth.preset_body("star_walk")
    pitch = star_walk.voxel_size
    for fr in star_walk:
        segs = link_segments(links, motion, fr.frame_index)
        for a, b in itertools.permutations(synth.STAR_LIMBS, 2):
            assert synth.distal_contact_distance(fr, a, b, segs[a]) > pitch
        for a in synth.STAR_LIMBS:
            assert synth.distal_contact_distance(fr, a, synth.TORSO, segs[a]) > pitch


def test_arm_touch_has_contact_window(arm_touch):
    links, motion = synth.preset_body("arm_touch")
    limb = synth.LEFT_ARM
    d = [synth.distal_contact_distance(fr, limb, synth.TORSO, link_segments(links, motion, fr.frame_index)[limb])
         for fr in arm_touch]
    touching = np.flatnonzero(np.array(d) <= arm_touch.voxel_size)
    assert len(touching) >= 3
    # one contiguous window, apart at both ends of the sequence
    assert np.all(np.diff(touching) == 1)
    assert d[0] > arm_touch.voxel_size and d[-1] > arm_touch.voxel_size


def test_repose_moves_points_with_their_links():
    links = [LinkSpec(1, None, 200.0, 20.0), LinkSpec(2, 1, 150.0, 15.0, (1, 0, 0), (0, 0, 200.0))]
    motion = MotionSpec({2: [0.0, 0.8]}, 2)
    seq = generate_sequence(links, motion, 10.0)
    same = synth.repose(seq[0], links, motion, 0)
    np.testing.assert_allclose(same.points, seq[0].points, atol=1e-9)
    moved = synth.repose(seq[0], links, motion, 1)
    segs = link_segments(links, motion, 1)
    for lid, radius in ((1, 20.0), (2, 15.0)):
        m = moved.gt_labels == lid
        assert synth.point_segment_distance(moved.points[m], *segs[lid]).max() <= radius + 1e-9
