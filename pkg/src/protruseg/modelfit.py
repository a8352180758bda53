"""Ellipsoid and stick models fitted to segmented clusters.

Each cluster's 3D covariance gives an ellipsoid whose semi-axes are a fixed
multiple of the standard deviations along the principal directions. A
stick is the segment through the ellipsoid center along its major axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SCALE = 2.0
MIN_POINTS = 4
RANK_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: np.ndarray  # (3,)
    axes: np.ndarray  # (3, 3), one unit direction per row, major first
    semi_lengths: np.ndarray  # (3,), descending

    def __post_init__(self):
        if not np.allclose(self.axes @ self.axes.T, np.eye(3), atol=1e-9):
            raise ValueError("ellipsoid axes must be orthonormal")
        s = self.semi_lengths
        if np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise ValueError("semi-lengths must be positive and sorted descending")

    @property
    def volume(self) -> float:
        return float(4.0 / 3.0 * np.pi * np.prod(self.semi_lengths))

    def stick(self) -> np.ndarray:
        """Endpoints (2, 3) of the major-axis segment, total length twice the largest semi-length."""
        h = self.semi_lengths[0] * self.axes[0]
        return np.stack([self.center - h, self.center + h])

    def to_json(self) -> dict:
        return {
            "center": self.center.tolist(),
            "axes": self.axes.tolist(),
            "semi_lengths": self.semi_lengths.tolist(),
            "stick_endpoints": self.stick().tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Ellipsoid":
        return cls(np.asarray(obj["center"], float), np.asarray(obj["axes"], float),
                   np.asarray(obj["semi_lengths"], float))


def fit_ellipsoid(points: np.ndarray, scale: float = DEFAULT_SCALE, voxel_size: float = 1.0) -> Ellipsoid:
    """Moment-aligned ellipsoid of one cluster.

    Too few points or a flat covariance floor the degenerate semi-lengths
    at ``voxel_size``.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("cannot fit an empty cluster")
    center = P.mean(axis=0)
    if len(P) < MIN_POINTS:
        return Ellipsoid(center, np.eye(3), np.full(3, float(voxel_size)))
    C = np.cov(P - center, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    flat = vals <= RANK_RTOL * max(vals[0], 1e-300)
    semi = np.where(flat, float(voxel_size), scale * np.sqrt(np.clip(vals, 0, None)))
    # the floor can break the ordering; keep axes paired with their lengths
    order = np.argsort(-semi, kind="stable")
    semi, vecs = semi[order], vecs[:, order]
    # deterministic signs, then a right-handed frame
    for j in range(3):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return Ellipsoid(center, vecs.T.copy(), semi)


def fit_ellipsoids(frame, labeling, scale: float = DEFAULT_SCALE) -> dict[int, Ellipsoid]:
    """Ellipsoid per cluster label of ``labeling`` on ``frame``."""
    labels = np.asarray(getattr(labeling, "labels", labeling))
    pts = frame.points
    if len(labels) != len(pts):
        raise ValueError("labeling does not cover the frame")
    return {int(j): fit_ellipsoid(pts[labels == j], scale, frame.voxel_size) for j in np.unique(labels)}


@dataclass(frozen=True)
class FrameModel:
    frame_index: int
    ellipsoids: dict[int, Ellipsoid]  # keyed by cluster or chain id

    def sticks(self) -> dict[int, np.ndarray]:
        return {c: e.stick() for c, e in self.ellipsoids.items()}


def stick_model(ellipsoids: Sequence[FrameModel] | Mapping[int, Mapping[int, Ellipsoid]],
                trajectories: Mapping[int, Mapping[int, np.ndarray]] | None = None) -> dict[int, dict[int, np.ndarray]]:
    """Per frame, per cluster stick endpoints.

    ``trajectories`` (chain -> frame -> centroid) restricts the output to
    clusters alive in each frame; without it every fitted ellipsoid yields
    a stick.
    """
    if isinstance(ellipsoids, Mapping):
        models = [FrameModel(int(t), dict(e)) for t, e in ellipsoids.items()]
    else:
        models = list(ellipsoids)
    out: dict[int, dict[int, np.ndarray]] = {}
    for m in models:
        sticks = m.sticks()
        if trajectories is not None:
            sticks = {c: s for c, s in sticks.items() if m.frame_index in trajectories.get(c, {})}
        out[m.frame_index] = sticks
    return out


def fit_sequence(result, sequence, scale: float = DEFAULT_SCALE) -> list[FrameModel]:
    """Ellipsoids keyed by chain id for every successful frame of a sequence result."""
    models = []
    for fr, frame in zip(result.frames, sequence):
        if not fr.ok:
            continue
        models.append(FrameModel(fr.frame_index, fit_ellipsoids(frame, fr.chain_labels(), scale)))
    return models


def models_to_json(models: Sequence[FrameModel]) -> dict:
    return {"frames": [{"frame": m.frame_index,
                        "clusters": {str(c): e.to_json() for c, e in sorted(m.ellipsoids.items())}}
                       for m in models]}


def models_from_json(obj: Mapping) -> list[FrameModel]:
    return [FrameModel(int(f["frame"]), {int(c): Ellipsoid.from_json(e) for c, e in f["clusters"].items()})
            for f in obj["frames"]]


def save_model(models: Sequence[FrameModel], path) -> None:
    Path(path).write_text(json.dumps(models_to_json(models), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> list[FrameModel]:
    return models_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
