"""Synthetic articulated bodies rasterized to voxel sequences.

Bodies are trees of capsule links. Each link hangs off its parent at an
attachment offset, points along a rest direction and rotates about one joint
axis, all expressed in the parent's frame. Every rasterized voxel is labeled
with the link whose axis segment is nearest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .data import AprioriSegmentation, VoxelFrame, VoxelSequence

TIE_TOL = 1e-9


@dataclass(frozen=True)
class LinkSpec:
    link_id: int
    parent: int | None
    length: float
    radius: float
    joint_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    # attachment point in the parent frame (world frame for the root)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # rest direction of the link axis in the parent frame
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.link_id < 1:
            raise ValueError("link_id must be >= 1")
        if not self.length > 0:
            raise ValueError(f"link {self.link_id}: degenerate link (length must be positive)")
        if not self.radius > 0:
            raise ValueError(f"link {self.link_id}: radius must be positive")
        for name in ("joint_axis", "direction"):
            v = np.asarray(getattr(self, name), dtype=float)
            nrm = np.linalg.norm(v)
            if v.shape != (3,) or nrm == 0:
                raise ValueError(f"link {self.link_id}: {name} must be a non-zero 3-vector")
            object.__setattr__(self, name, tuple((v / nrm).tolist()))
        object.__setattr__(self, "offset", tuple(float(x) for x in self.offset))


@dataclass(frozen=True)
class MotionSpec:
    """Joint angle trajectories in radians, keyed by link id."""

    angles: Mapping[int, Sequence[float]] = field(default_factory=dict)
    frame_count: int = 1

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        clean = {}
        for link, traj in self.angles.items():
            arr = np.asarray(traj, dtype=float)
            if arr.shape != (self.frame_count,):
                raise ValueError(f"trajectory for link {link} must have {self.frame_count} entries")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"trajectory for link {link} has non-finite angles")
            clean[int(link)] = arr
        object.__setattr__(self, "angles", clean)

    def angle(self, link_id: int, t: int) -> float:
        traj = self.angles.get(link_id)
        return 0.0 if traj is None else float(traj[t])


def validate_tree(links: Sequence[LinkSpec]) -> list[LinkSpec]:
    """Return links in parent-before-child order; raise if not a tree."""
    by_id = {}
    for l in links:
        if l.link_id in by_id:
            raise ValueError(f"duplicate link_id {l.link_id}")
        by_id[l.link_id] = l
    roots = [l for l in links if l.parent is None]
    if len(roots) != 1:
        raise ValueError("link graph must have exactly one root")
    order, seen = [], set()
    frontier = [roots[0].link_id]
    while frontier:
        lid = frontier.pop(0)
        seen.add(lid)
        order.append(by_id[lid])
        frontier.extend(sorted(l.link_id for l in links if l.parent == lid))
    if len(order) != len(links):
        raise ValueError("link graph is not a connected tree")
    return order


def link_frames(links: Sequence[LinkSpec], motion: MotionSpec, t: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """World-frame (origin, rotation) of every link at frame ``t``."""
    frames: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for l in validate_tree(links):
        if l.parent is None:
            p_origin, p_rot = np.zeros(3), np.eye(3)
        else:
            p_origin, p_rot = frames[l.parent]
        origin = p_origin + p_rot @ np.asarray(l.offset)
        rot = p_rot @ Rotation.from_rotvec(np.asarray(l.joint_axis) * motion.angle(l.link_id, t)).as_matrix()
        frames[l.link_id] = (origin, rot)
    return frames


def link_segments(links: Sequence[LinkSpec], motion: MotionSpec, t: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """World-frame axis segment (start, end) of every link at frame ``t``."""
    frames = link_frames(links, motion, t)
    segs = {}
    for l in links:
        origin, rot = frames[l.link_id]
        segs[l.link_id] = (origin, origin + rot @ np.asarray(l.direction) * l.length)
    return segs


def repose(frame: VoxelFrame, links: Sequence[LinkSpec], motion: MotionSpec, t: int) -> VoxelFrame:
    """Carry every labeled voxel rigidly with its link to the pose of frame ``t``.

    Point ``i`` of the result is point ``i`` of ``frame`` moved, so the two
    clouds correspond one to one.
    """
    if frame.gt_labels is None:
        raise ValueError("reposing needs ground-truth link labels")
    src = link_frames(links, motion, frame.frame_index)
    dst = link_frames(links, motion, t)
    out = np.empty_like(frame.points)
    for lid in np.unique(frame.gt_labels):
        m = frame.gt_labels == lid
        (o0, r0), (o1, r1) = src[int(lid)], dst[int(lid)]
        out[m] = (frame.points[m] - o0) @ r0 @ r1.T + o1
    return VoxelFrame(out, frame.gt_labels, t, frame.voxel_size)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def nearest_link(points: np.ndarray, segs: Mapping[int, tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-axis label per point (ties to the smaller link id) and all distances."""
    ids = sorted(segs)
    dist = np.column_stack([point_segment_distance(points, *segs[i]) for i in ids])
    dmin = dist.min(axis=1)
    first = np.argmax(dist <= dmin[:, None] + TIE_TOL, axis=1)
    return np.asarray(ids, dtype=np.int64)[first], dist


def rasterize(links: Sequence[LinkSpec], segs, voxel_size: float, chunk: int = 400_000) -> tuple[np.ndarray, np.ndarray]:
    radius = {l.link_id: l.radius for l in links}
    ids = sorted(segs)
    ends = np.array([p for i in ids for p in segs[i]])
    rmax = max(radius.values())
    lo = np.floor((ends.min(axis=0) - rmax) / voxel_size).astype(int)
    hi = np.ceil((ends.max(axis=0) + rmax) / voxel_size).astype(int)
    axes = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) * voxel_size
    rad = np.array([radius[i] for i in ids])
    pts, labs = [], []
    for start in range(0, len(grid), chunk):
        g = grid[start:start + chunk].astype(float)
        lab, dist = nearest_link(g, segs)
        inside = np.any(dist <= rad[None, :], axis=1)
        pts.append(g[inside])
        labs.append(lab[inside])
    return np.concatenate(pts), np.concatenate(labs)


def generate_sequence(links: Sequence[LinkSpec], motion: MotionSpec, voxel_size: float,
                      rng_seed: int = 0, name: str = "synthetic") -> VoxelSequence:
    """Rasterize the body at every frame of ``motion``.

    Voxel centers sit on the global lattice ``voxel_size * Z^3``, so output is
    fully deterministic; ``rng_seed`` is recorded for interface symmetry.
    """
    del rng_seed
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    validate_tree(links)
    frames = []
    for t in range(motion.frame_count):
        segs = link_segments(links, motion, t)
        pts, labs = rasterize(links, segs, voxel_size)
        if len(pts) == 0:
            raise ValueError(f"frame {t}: empty rasterization (voxel_size too coarse?)")
        frames.append(VoxelFrame(pts, labs, t, voxel_size))
    return VoxelSequence(tuple(frames), name)


# ---------------------------------------------------------------- spec files


def body_to_json(links: Sequence[LinkSpec], motion: MotionSpec) -> dict:
    return {
        "links": [
            {"link_id": l.link_id, "parent": l.parent, "length": l.length, "radius": l.radius,
             "joint_axis": list(l.joint_axis), "offset": list(l.offset), "direction": list(l.direction)}
            for l in links
        ],
        "motion": {"frame_count": motion.frame_count,
                   "angles": {str(k): np.asarray(v).tolist() for k, v in motion.angles.items()}},
    }


def body_from_json(obj: dict) -> tuple[list[LinkSpec], MotionSpec]:
    links = [LinkSpec(int(d["link_id"]), None if d.get("parent") is None else int(d["parent"]),
                      float(d["length"]), float(d["radius"]),
                      tuple(d.get("joint_axis", (1, 0, 0))), tuple(d.get("offset", (0, 0, 0))),
                      tuple(d.get("direction", (0, 0, 1))))
             for d in obj["links"]]
    m = obj["motion"]
    motion = MotionSpec({int(k): v for k, v in m.get("angles", {}).items()}, int(m["frame_count"]))
    return links, motion


def load_body(path) -> tuple[list[LinkSpec], MotionSpec]:
    return body_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- presets
#
# All presets share a 5-link star humanoid drawn on a 10 mm grid: torso,
# two arms hanging off the shoulders and two legs off the hips. Standing
# height is about 170 voxels; subsampling by 8 leaves roughly 3000 points.

TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = 1, 2, 3, 4, 5
STAR_LIMBS = (LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG)
PRESET_NAMES = ("star_walk", "arm_touch", "clap", "split_legs")
VOXEL_MM = 10.0


def _dir(angle_deg: float, side: float, down: bool) -> tuple[float, float, float]:
    a = np.radians(angle_deg)
    return (side * np.sin(a), 0.0, -np.cos(a) if down else np.cos(a))


def star_body(arm_spread_deg: float = 60.0, leg_spread_deg: float = 12.0, hip_x: float = 45.0,
              shoulder_z: float = 600.0, torso_len: float = 600.0) -> list[LinkSpec]:
    """Torso plus four limbs; angles measured from the vertical.

    Limb roots sit on the torso surface (shoulders beside the top of the
    torso, hips just under its lower cap) so that each limb protrudes
    instead of starting deep inside the torso volume.
    """
    v = VOXEL_MM
    torso_r, arm_r, leg_r = 7.5 * v, 3.5 * v, 4.5 * v
    sx = torso_r + 2.5 * v
    sz, hz = shoulder_z, -9 * v
    # arms swing about the y axis (abduction) unless motion says otherwise
    return [
        LinkSpec(TORSO, None, torso_len, torso_r, (0, 0, 1), (0, 0, 0), (0, 0, 1)),
        LinkSpec(LEFT_ARM, TORSO, 55 * v, arm_r, (0, 1, 0), (-sx, 0, sz), _dir(arm_spread_deg, -1, True)),
        LinkSpec(RIGHT_ARM, TORSO, 55 * v, arm_r, (0, 1, 0), (sx, 0, sz), _dir(arm_spread_deg, 1, True)),
        LinkSpec(LEFT_LEG, TORSO, 90 * v, leg_r, (1, 0, 0), (-hip_x, 0, hz), _dir(leg_spread_deg, -1, True)),
        LinkSpec(RIGHT_LEG, TORSO, 90 * v, leg_r, (1, 0, 0), (hip_x, 0, hz), _dir(leg_spread_deg, 1, True)),
    ]


def _ramp(frames: int, keys: Sequence[tuple[int, float]]) -> np.ndarray:
    """Piecewise-linear trajectory through (frame, degrees) keyframes, in radians."""
    xs, ys = zip(*keys)
    return np.radians(np.interp(np.arange(frames), xs, ys))


def preset_body(name: str, frames: int = 25) -> tuple[list[LinkSpec], MotionSpec]:
    t = np.arange(frames)
    if name == "star_walk":
        links = star_body(arm_spread_deg=35.0, leg_spread_deg=12.0)
        phase = 2 * np.pi * t / 40.0
        leg = np.radians(18.0) * np.sin(phase)
        arm = np.radians(20.0) * np.sin(phase)
        # arms rotate about x (fore/aft swing) for walking
        links = [LinkSpec(l.link_id, l.parent, l.length, l.radius, (1, 0, 0), l.offset, l.direction)
                 if l.link_id in (LEFT_ARM, RIGHT_ARM) else l for l in links]
        motion = MotionSpec({LEFT_LEG: leg, RIGHT_LEG: -leg, LEFT_ARM: -arm, RIGHT_ARM: arm}, frames)
        return links, motion
    if name == "arm_touch":
        links = star_body(arm_spread_deg=70.0, leg_spread_deg=12.0)
        # left arm adducts (rotation about +y brings it toward -z) until it presses into the torso side
        q = frames / 25.0
        keys = [(0, 0.0), (5 * q, 0.0), (10 * q, 76.0), (15 * q, 76.0), (20 * q, 0.0), (frames, 0.0)]
        motion = MotionSpec({LEFT_ARM: -_ramp(frames, keys)}, frames)
        return links, motion
    if name == "clap":
        links = star_body(arm_spread_deg=90.0, leg_spread_deg=12.0)
        links = [LinkSpec(l.link_id, l.parent, l.length, l.radius, (0, 0, 1), l.offset, l.direction)
                 if l.link_id in (LEFT_ARM, RIGHT_ARM) else l for l in links]
        q = frames / 25.0
        keys = [(0, 0.0), (4 * q, 0.0), (10 * q, 88.0), (15 * q, 88.0), (21 * q, 0.0), (frames, 0.0)]
        swing = _ramp(frames, keys)
        # horizontal arms swing forward about z until the hands meet in front
        motion = MotionSpec({LEFT_ARM: swing, RIGHT_ARM: -swing}, frames)
        return links, motion
    if name == "split_legs":
        links = star_body(arm_spread_deg=35.0, leg_spread_deg=0.0, hip_x=35.0)
        q = frames / 25.0
        keys = [(0, 0.0), (8 * q, 0.0), (16 * q, 22.0), (frames, 22.0)]
        spread = _ramp(frames, keys)
        links = [LinkSpec(l.link_id, l.parent, l.length, l.radius, (0, 1, 0), l.offset, l.direction)
                 if l.link_id in (LEFT_LEG, RIGHT_LEG) else l for l in links]
        motion = MotionSpec({LEFT_LEG: -spread, RIGHT_LEG: spread}, frames)
        return links, motion
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


def preset_sequences(name: str, frames: int = 25) -> VoxelSequence:
    links, motion = preset_body(name, frames)
    return generate_sequence(links, motion, VOXEL_MM, name=name)


def star_apriori() -> list[AprioriSegmentation]:
    """Three coarse groupings of the star links used for segmentation scores."""
    return [
        AprioriSegmentation({TORSO: 1, LEFT_ARM: 2, RIGHT_ARM: 3, LEFT_LEG: 4, RIGHT_LEG: 5}, "links"),
        AprioriSegmentation({TORSO: 1, LEFT_ARM: 2, RIGHT_ARM: 2, LEFT_LEG: 3, RIGHT_LEG: 3}, "girdles"),
        AprioriSegmentation({TORSO: 1, LEFT_ARM: 1, RIGHT_ARM: 1, LEFT_LEG: 2, RIGHT_LEG: 2}, "upper_lower"),
    ]


def hand_body() -> list[LinkSpec]:
    """Palm with five straight fingers, for model-fitting demos."""
    v = 2.0  # 2 mm voxels
    links = [LinkSpec(1, None, 40 * v, 14 * v, (1, 0, 0), (0, 0, 0), (0, 0, 1))]
    spread = (-36, -14, 0, 14, 34)
    lengths = (30, 40, 44, 40, 32)
    for i, (ang, ln) in enumerate(zip(spread, lengths)):
        x = (-12 + 6 * i) * v
        links.append(LinkSpec(i + 2, 1, ln * v, 3.5 * v, (0, 1, 0), (x, 0, 38 * v), _dir(ang * 0.5, 1, False)))
    return links


def hand_frame() -> VoxelFrame:
    links = hand_body()
    return generate_sequence(links, MotionSpec({}, 1), 2.0, name="hand")[0]


# ---------------------------------------------------------------- geometry checks


def distal_contact_distance(frame: VoxelFrame, limb: int, other: int, limb_segment, fraction: float = 0.5) -> float:
    """Minimum distance between ``other`` voxels and the distal part of ``limb``.

    Only limb voxels whose projection on the limb axis lies beyond
    ``fraction`` of its length count, so the joint itself never reads as contact.
    """
    a, b = (np.asarray(p) for p in limb_segment)
    pts = frame.points
    lab = frame.gt_labels
    limb_pts = pts[lab == limb]
    ab = b - a
    s = (limb_pts - a) @ ab / (ab @ ab)
    limb_pts = limb_pts[s >= fraction]
    other_pts = pts[lab == other]
    if len(limb_pts) == 0 or len(other_pts) == 0:
        return float("inf")
    d, _ = cKDTree(other_pts).query(limb_pts, k=1)
    return float(d.min())


def min_cross_link_distance(frame: VoxelFrame, link_a: int, link_b: int) -> float:
    pa = frame.points[frame.gt_labels == link_a]
    pb = frame.points[frame.gt_labels == link_b]
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    d, _ = cKDTree(pb).query(pa, k=1)
    return float(d.min())
