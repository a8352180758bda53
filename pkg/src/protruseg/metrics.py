"""Coarsening, segmentation and consistency scores against ground-truth links."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import AprioriSegmentation, VoxelFrame


@dataclass(frozen=True)
class LabelHistogram:
    """Per ground-truth unit, the fraction of its points carrying each label."""

    hist: Mapping[int, Mapping[int, float]]

    def __post_init__(self):
        for unit, h in self.hist.items():
            vals = np.fromiter(h.values(), dtype=float)
            if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
                raise ValueError(f"histogram of unit {unit} is not a distribution")

    def __getitem__(self, unit: int) -> Mapping[int, float]:
        return self.hist[unit]

    @property
    def units(self) -> list[int]:
        return sorted(self.hist)


def label_histogram(labels, units) -> LabelHistogram:
    labels = np.asarray(labels)
    units = np.asarray(units)
    if labels.shape != units.shape:
        raise ValueError("labels and ground truth must cover the same points")
    out = {}
    for u in np.unique(units):
        lab = labels[units == u]
        vals, counts = np.unique(lab, return_counts=True)
        out[int(u)] = {int(v): c / len(lab) for v, c in zip(vals, counts)}
    return LabelHistogram(out)


def _mean_of_max(h: LabelHistogram) -> float:
    return float(np.mean([max(h[u].values()) for u in h.units]))


def coarsening_score(labels, gt_links) -> float:
    """Mean over links of the share of the link held by its majority label."""
    if len(np.asarray(gt_links)) == 0:
        raise ValueError("no points to score")
    return _mean_of_max(label_histogram(labels, gt_links))


def segmentation_score(labels, apriori: AprioriSegmentation, gt_links) -> float:
    """Mean over coarse a-priori segments of the segment's majority-label share."""
    segs = apriori.segments_for(np.asarray(gt_links))
    empty = set(apriori.mapping.values()) - set(np.unique(segs).tolist())
    if empty:
        # a segment none of whose links is present cannot be scored
        raise ValueError(f"segments {sorted(empty)} of scheme {apriori.name!r} have no points")
    return _mean_of_max(label_histogram(labels, segs))


class _Groups:
    """Union-find over chain ids."""

    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x: int) -> int:
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, items: Iterable[int]):
        items = list(items)
        for a in items[1:]:
            ra, rb = self.find(items[0]), self.find(a)
            if ra != rb:
                self.parent[max(ra, rb)] = min(ra, rb)


def consistency_score(labels_t, reference: LabelHistogram, gt_links,
                      roots: Callable[[int], Iterable[int]] | None = None) -> float:
    """Mean over links of ``1 - L1(hist_t, hist_0) / 2``.

    ``labels_t`` are chain ids. ``roots`` maps a chain to the chains it
    descends from (a merge stands for its parents); histograms are compared
    after pooling every group of chains linked through shared roots, so a
    merge is compared at the merged granularity. A chain with no ancestor
    in the reference frame forms its own group, so its mass counts as moved.
    Without ``roots`` labels are compared as they are.
    """
    cur = label_histogram(labels_t, gt_links)
    groups = _Groups()
    root_of = (lambda c: [c]) if roots is None else (lambda c: list(roots(c)) or [c])
    for h in (cur, reference):
        for u in h.units:
            for c in h[u]:
                groups.union(root_of(c))
    scores = []
    for u in cur.units:
        if u not in reference.hist:
            raise ValueError(f"link {u} is absent from the reference frame")
        pooled: dict[int, float] = {}
        for c, v in cur[u].items():
            g = groups.find(root_of(c)[0])
            pooled[g] = pooled.get(g, 0.0) + v
        for c, v in reference[u].items():
            g = groups.find(root_of(c)[0])
            pooled[g] = pooled.get(g, 0.0) - v
        scores.append(1.0 - 0.5 * sum(abs(v) for v in pooled.values()))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


@dataclass
class ScoreSeries:
    frames: list[int] = field(default_factory=list)
    consistency: list[float] = field(default_factory=list)
    coarsening: list[float] = field(default_factory=list)
    segmentation: dict[str, list[float]] = field(default_factory=dict)

    def add(self, frame: int, consistency: float, coarsening: float, seg: Mapping[str, float]):
        self.frames.append(int(frame))
        self.consistency.append(float(consistency))
        self.coarsening.append(float(coarsening))
        for k, v in seg.items():
            self.segmentation.setdefault(k, []).append(float(v))

    @property
    def segmentation_mean(self) -> float:
        """Mean over schemes and frames."""
        if not self.segmentation:
            return float("nan")
        return float(np.mean([np.mean(v) for v in self.segmentation.values()]))

    def header(self) -> list[str]:
        return ["frame", "consistency", "coarsening"] + [f"seg_{k}" for k in self.segmentation]

    def rows(self) -> list[list]:
        out = []
        for i, t in enumerate(self.frames):
            out.append([t, self.consistency[i], self.coarsening[i]] + [v[i] for v in self.segmentation.values()])
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows():
                w.writerow([r[0]] + [f"{x:.6f}" for x in r[1:]])


def score_labelings(chain_labels: Sequence[np.ndarray | None], frames: Sequence[VoxelFrame],
                    apriori: Sequence[AprioriSegmentation],
                    roots: Callable[[int], Iterable[int]] | None = None) -> ScoreSeries:
    """Scores of per-frame chain labelings; ``None`` marks a failed frame, which is skipped.

    The first scored frame is the consistency reference and scores 1.
    """
    if len(chain_labels) != len(frames):
        raise ValueError("one labeling per frame expected")
    series = ScoreSeries()
    ref = None
    for lab, fr in zip(chain_labels, frames):
        if lab is None:
            continue
        if not fr.has_labels:
            raise ValueError("scoring needs ground-truth labels")
        gt = fr.gt_labels
        if ref is None:
            ref = label_histogram(lab, gt)
            cons = 1.0
        else:
            cons = consistency_score(lab, ref, gt, roots)
        seg = {a.name: segmentation_score(lab, a, gt) for a in apriori}
        series.add(fr.frame_index, cons, coarsening_score(lab, gt), seg)
    return series


def score_sequence(result, sequence, apriori: Sequence[AprioriSegmentation]) -> ScoreSeries:
    """Scores of a :class:`~protruseg.temporal.SequenceResult` on the frames it was run on."""
    frames = list(sequence)
    labels = [fr.chain_labels() if fr.ok else None for fr in result.frames]
    chains = getattr(result, "chains", None)
    roots = (lambda c: chains[int(c)].roots) if chains else None
    return score_labelings(labels, frames, apriori, roots)


def trajectory_steps(trajectories: Mapping[int, Mapping[int, np.ndarray]]) -> dict[int, np.ndarray]:
    """Per chain, centroid displacement between consecutive frames where it exists."""
    out = {}
    for cid, tr in trajectories.items():
        ts = sorted(tr)
        steps = [np.linalg.norm(np.asarray(tr[b]) - np.asarray(tr[a])) for a, b in zip(ts, ts[1:]) if b == a + 1]
        out[int(cid)] = np.asarray(steps)
    return out
