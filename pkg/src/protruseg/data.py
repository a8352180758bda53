"""Core data types, sequence I/O and subsampling.

Sequence directory layout::

    meta.json            {"name": str, "voxel_size_mm": float, "frames": int}
    frame_0000.csv       header ``x,y,z`` or ``x,y,z,label``
    frame_0001.csv
    ...

Labeling files carry ``point_index,label`` and a-priori segmentation files
carry ``link_label,segment``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

META_FILE = "meta.json"
FRAME_PATTERN = "frame_%04d.csv"


class SequenceFormatError(ValueError):
    """Raised when a sequence directory or one of its files is malformed."""


@dataclass(frozen=True, eq=False)
class VoxelFrame:
    points: np.ndarray
    gt_labels: np.ndarray | None = None
    frame_index: int = 0
    voxel_size: float = 1.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError("points must be a non-empty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.gt_labels is not None:
            lab = np.array(self.gt_labels, dtype=np.int64)
            if lab.shape != (len(pts),):
                raise ValueError("gt_labels length must equal the number of points")
            if np.any(lab < 1):
                raise ValueError("gt_labels must be >= 1")
            lab.setflags(write=False)
            object.__setattr__(self, "gt_labels", lab)
        if self.frame_index < 0:
            raise ValueError("frame_index must be nonnegative")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")

    def __len__(self):
        return len(self.points)

    @property
    def has_labels(self) -> bool:
        return self.gt_labels is not None


@dataclass(frozen=True)
class VoxelSequence:
    frames: tuple[VoxelFrame, ...]
    name: str = "sequence"

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        for i, fr in enumerate(frames):
            if fr.frame_index != i:
                raise ValueError("frame_index values must run 0, 1, 2, ...")
        if frames and len({fr.has_labels for fr in frames}) > 1:
            raise ValueError("either all frames carry gt_labels or none do")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def has_labels(self) -> bool:
        return bool(self.frames) and self.frames[0].has_labels

    @property
    def voxel_size(self) -> float:
        return self.frames[0].voxel_size


@dataclass(frozen=True)
class SubsampleParams:
    factor: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.factor) < 1:
            raise ValueError("subsample factor must be >= 1")


@dataclass(frozen=True)
class AprioriSegmentation:
    """Coarse a-priori grouping of ground-truth links."""

    mapping: Mapping[int, int] = field(default_factory=dict)
    name: str = "apriori"

    def segments_for(self, gt_labels: np.ndarray) -> np.ndarray:
        missing = set(np.unique(gt_labels).tolist()) - set(self.mapping)
        if missing:
            raise ValueError(f"a-priori scheme {self.name!r} misses links {sorted(missing)}")
        lut = {int(k): int(v) for k, v in self.mapping.items()}
        return np.array([lut[int(l)] for l in gt_labels], dtype=np.int64)


# ---------------------------------------------------------------- I/O


def _read_frame_csv(path: Path, index: int, voxel_size: float) -> VoxelFrame:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SequenceFormatError(f"{path}: empty file") from None
        if header not in (["x", "y", "z"], ["x", "y", "z", "label"]):
            raise SequenceFormatError(f"{path}: unexpected header {header}")
        ncol = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise SequenceFormatError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise SequenceFormatError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
    if not rows:
        raise SequenceFormatError(f"{path}: no points")
    arr = np.array(rows, dtype=float)
    labels = None
    if ncol == 4:
        if not np.all(arr[:, 3] == np.round(arr[:, 3])):
            raise SequenceFormatError(f"{path}: labels must be integers")
        labels = arr[:, 3].astype(np.int64)
    try:
        return VoxelFrame(arr[:, :3], labels, index, voxel_size)
    except ValueError as exc:
        raise SequenceFormatError(f"{path}: {exc}") from None


def load_sequence(directory) -> VoxelSequence:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.is_file():
        raise SequenceFormatError(f"missing {META_FILE} in {directory}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        name = str(meta["name"])
        voxel_size = float(meta["voxel_size_mm"])
        nframes = int(meta["frames"])
    except (ValueError, KeyError, TypeError) as exc:
        raise SequenceFormatError(f"bad {META_FILE}: {exc}") from None
    frames = []
    for i in range(nframes):
        path = directory / (FRAME_PATTERN % i)
        if not path.is_file():
            raise SequenceFormatError(f"missing frame file {path.name}")
        frames.append(_read_frame_csv(path, i, voxel_size))
    if len({f.has_labels for f in frames}) > 1:
        raise SequenceFormatError("inconsistent label presence across frames")
    return VoxelSequence(tuple(frames), name)


def _fmt(v: float) -> str:
    # repr round-trips floats exactly
    return repr(float(v))


def save_sequence(seq: VoxelSequence, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"name": seq.name, "voxel_size_mm": seq.voxel_size, "frames": len(seq)}
    (directory / META_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    for fr in seq:
        with open(directory / (FRAME_PATTERN % fr.frame_index), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fr.has_labels:
                w.writerow(["x", "y", "z", "label"])
                for p, l in zip(fr.points, fr.gt_labels):
                    w.writerow([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), int(l)])
            else:
                w.writerow(["x", "y", "z"])
                for p in fr.points:
                    w.writerow([_fmt(p[0]), _fmt(p[1]), _fmt(p[2])])


def save_labeling(labeling, frame: VoxelFrame, path) -> None:
    """Write per-point labels; ``labeling`` is a ClusterLabeling or a label array."""
    labels = np.asarray(getattr(labeling, "labels", labeling))
    if labels.shape != (len(frame),):
        raise ValueError(f"labeling covers {labels.size} points, frame has {len(frame)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_index", "label"])
        for i, l in enumerate(labels):
            w.writerow([i, int(l)])


def load_labeling(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["point_index", "label"]:
            raise SequenceFormatError(f"{path}: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or int(row[0]) != len(out):
                raise SequenceFormatError(f"{path}:{lineno}: malformed row {row!r}")
            out.append(int(row[1]))
    return np.array(out, dtype=np.int64)


def save_apriori(scheme: AprioriSegmentation, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_label", "segment"])
        for link in sorted(scheme.mapping):
            w.writerow([int(link), int(scheme.mapping[link])])


def load_apriori(path, name: str | None = None) -> AprioriSegmentation:
    path = Path(path)
    mapping: dict[int, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["link_label", "segment"]:
            raise SequenceFormatError(f"{path}: expected header link_label,segment")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise SequenceFormatError(f"{path}: malformed row {row!r}")
            link, seg = int(row[0]), int(row[1])
            if link in mapping:
                raise SequenceFormatError(f"{path}: link {link} listed twice")
            mapping[link] = seg
    if name is None:
        name = path.stem[len("apriori_"):] if path.stem.startswith("apriori_") else path.stem
    return AprioriSegmentation(mapping, name)


def find_apriori_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("apriori_*.csv"))


# ---------------------------------------------------------------- subsampling


def frame_seed(rng_seed: int, frame_index: int) -> np.random.SeedSequence:
    """Per-frame seed stream so each frame draws its own subset."""
    return np.random.SeedSequence([int(rng_seed) & (2**64 - 1), int(frame_index)])


def subsample(frame: VoxelFrame, params: SubsampleParams) -> tuple[VoxelFrame, np.ndarray]:
    """Keep ``ceil(N / factor)`` points drawn without replacement.

    Returns the reduced frame and the sorted indices of the kept points in
    the original frame.
    """
    n = len(frame)
    s = int(params.factor)
    if s > n:
        raise ValueError(f"subsample factor {s} exceeds point count {n}")
    if s == 1:
        return frame, np.arange(n)
    m = math.ceil(n / s)
    rng = np.random.default_rng(frame_seed(params.rng_seed, frame.frame_index))
    idx = np.sort(rng.choice(n, size=m, replace=False))
    labels = None if frame.gt_labels is None else frame.gt_labels[idx]
    return VoxelFrame(frame.points[idx], labels, frame.frame_index, frame.voxel_size), idx


def subsample_sequence(seq: VoxelSequence, params: SubsampleParams) -> VoxelSequence:
    if params.factor == 1:
        return seq
    return VoxelSequence(tuple(subsample(f, params)[0] for f in seq), seq.name)


def as_frames(points_list: Sequence[np.ndarray], voxel_size: float = 1.0, name: str = "sequence") -> VoxelSequence:
    return VoxelSequence(tuple(VoxelFrame(p, None, i, voxel_size) for i, p in enumerate(points_list)), name)
