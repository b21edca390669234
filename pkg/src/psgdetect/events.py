"""Interval algebra for event detection: anchor-window grids, IOU, training
target assignment, prediction decoding, non-maximum suppression, and
evaluation-time matching.

Conventions
-----------
Intervals are (start_s, duration_s) on the segment's time axis.  Anchor
windows form an arithmetic grid: starts at k * window * (1 - overlap) for
every k with start < segment_duration.  Windows near the right edge may
extend past the segment; decoded events are clamped to segment bounds.

Localization targets use the scale-free anchor encoding

    t = ((event_center - anchor_center) / anchor_duration,
         ln(event_duration / anchor_duration))

whose inverse is applied by :func:`decode`.

Training assignment marks positive every anchor that is some truth's
highest-IOU anchor (so every truth owns at least one anchor, however poor
the overlap) plus every anchor whose best IOU against the truth set exceeds
0.5; each positive anchor regresses toward its own best-IOU truth.

Evaluation matching is one-to-one and maximizes the match count over pairs
with IOU >= threshold: a greedy pass in descending-IOU order (ties: higher
detection probability, then earlier truth, then earlier detection) is
followed by an augmenting-path pass so the final cardinality always equals
the maximum bipartite matching on the thresholded adjacency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GridConfigError(ValueError):
    """Anchor grid request is geometrically impossible."""


@dataclass(frozen=True)
class AnchorGrid:
    window_duration_s: float
    overlap: float
    anchors: tuple  # of (start_s, duration_s)

    @property
    def starts(self) -> np.ndarray:
        return np.array([a[0] for a in self.anchors])

    @property
    def centers(self) -> np.ndarray:
        return np.array([a[0] + a[1] / 2.0 for a in self.anchors])

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class MatchResult:
    """Training-time anchor assignment for one segment."""

    positive_indices: np.ndarray  # sorted anchor indices
    negative_indices: np.ndarray
    targets: np.ndarray  # (n_pos, 2) regression targets, row-aligned
    labels: np.ndarray  # (n_pos,) class index per positive anchor
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class ScoredEvent:
    start_s: float
    duration_s: float
    probability: float
    label: int = 1

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"event duration must be positive, got {self.duration_s}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability outside [0, 1]: {self.probability}")


def build_anchor_grid(
    segment_duration_s: float,
    window_duration_s: float = 15.0,
    overlap: float = 0.5,
) -> AnchorGrid:
    if not 0.0 <= overlap < 1.0:
        raise GridConfigError(f"overlap must lie in [0, 1), got {overlap}")
    if window_duration_s <= 0:
        raise GridConfigError("window duration must be positive")
    if window_duration_s > segment_duration_s:
        raise GridConfigError(
            f"window {window_duration_s} s exceeds segment {segment_duration_s} s"
        )
    step = window_duration_s * (1.0 - overlap)
    anchors = []
    k = 0
    while k * step < segment_duration_s:
        anchors.append((k * step, window_duration_s))
        k += 1
    return AnchorGrid(
        window_duration_s=window_duration_s,
        overlap=overlap,
        anchors=tuple(anchors),
    )


def _as_interval(obj):
    if hasattr(obj, "start_s"):
        return float(obj.start_s), float(obj.duration_s)
    start, duration = obj
    return float(start), float(duration)


def iou(a, b) -> float:
    a_start, a_dur = _as_interval(a)
    b_start, b_dur = _as_interval(b)
    if a_dur <= 0 or b_dur <= 0:
        raise ValueError("intervals must have positive duration")
    inter = min(a_start + a_dur, b_start + b_dur) - max(a_start, b_start)
    # Rounding in the end-point sums can push the raw overlap an ulp past a
    # duration, which would let the ratio exceed 1.
    inter = min(inter, a_dur, b_dur)
    if inter <= 0:
        return 0.0
    return inter / (a_dur + b_dur - inter)


def iou_matrix(intervals_a, intervals_b) -> np.ndarray:
    """(len(a), len(b)) IOU table; empty dims give an empty matrix."""
    a = np.array([_as_interval(x) for x in intervals_a], dtype=float).reshape(-1, 2)
    b = np.array([_as_interval(x) for x in intervals_b], dtype=float).reshape(-1, 2)
    a_start, a_dur = a[:, :1], a[:, 1:]
    b_start, b_dur = b[:, 0][None, :], b[:, 1][None, :]
    inter = np.minimum(a_start + a_dur, b_start + b_dur) - np.maximum(a_start, b_start)
    inter = np.clip(inter, 0.0, np.minimum(a_dur, b_dur))
    union = a_dur + b_dur - inter
    with np.errstate(invalid="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def encode_target(anchor, event) -> tuple:
    a_start, a_dur = _as_interval(anchor)
    e_start, e_dur = _as_interval(event)
    center_offset = ((e_start + e_dur / 2.0) - (a_start + a_dur / 2.0)) / a_dur
    return center_offset, math.log(e_dur / a_dur)


def assign_targets(grid: AnchorGrid, truth) -> MatchResult:
    """Mark positive anchors and compute their regression targets.

    Positive set = { best anchor of each truth }  U  { anchors with
    IOU > 0.5 against some truth }.  Each positive anchor regresses toward
    its highest-IOU truth, ties broken toward the earlier truth index (this
    also decides the rare case where two truths force the same anchor).
    """
    n_anchors = len(grid)
    truth = list(truth)
    if not truth:
        return MatchResult(
            positive_indices=np.empty(0, dtype=int),
            negative_indices=np.arange(n_anchors),
            targets=np.empty((0, 2)),
            labels=np.empty(0, dtype=int),
            n_pos=0,
            n_neg=n_anchors,
        )
    table = iou_matrix(grid.anchors, truth)  # (n_anchors, n_truth)
    assigned_truth = np.argmax(table, axis=1)  # ties -> earlier truth
    best_iou = table[np.arange(n_anchors), assigned_truth]
    positive = best_iou > 0.5
    for j in range(len(truth)):
        anchor = int(np.argmax(table[:, j]))  # ties -> earlier anchor
        positive[anchor] = True
    pos_idx = np.flatnonzero(positive)
    neg_idx = np.flatnonzero(~positive)
    targets = np.array(
        [
            encode_target(grid.anchors[i], truth[assigned_truth[i]])
            for i in pos_idx
        ]
    ).reshape(-1, 2)
    labels = np.array(
        [getattr(truth[assigned_truth[i]], "label", 1) for i in pos_idx], dtype=int
    )
    return MatchResult(
        positive_indices=pos_idx,
        negative_indices=neg_idx,
        targets=targets,
        labels=labels,
        n_pos=len(pos_idx),
        n_neg=len(neg_idx),
    )


def decode(output, grid: AnchorGrid, threshold: float, segment_duration_s: float):
    """Turn per-anchor network outputs into scored events.

    ``output`` may be a NetworkOutput (batch of one) or a (probs, boxes)
    pair of arrays shaped (n_anchors, n_classes + 1) and (n_anchors, 2).
    Events are produced in anchor order and clamped to segment bounds;
    an event clamped to nothing (entirely outside the segment) is dropped.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if hasattr(output, "p"):
        probs, boxes = output.p.data, output.y.data
        if probs.ndim == 3:
            if probs.shape[0] != 1:
                raise ValueError("decode expects a single segment at a time")
            probs, boxes = probs[0], boxes[0]
    else:
        probs, boxes = output
        probs = np.asarray(probs)
        boxes = np.asarray(boxes)
    if len(probs) != len(grid):
        raise ValueError(
            f"{len(probs)} output rows vs {len(grid)} anchors"
        )
    events = []
    window = grid.window_duration_s
    for i, (anchor_start, anchor_dur) in enumerate(grid.anchors):
        arousal_prob = float(probs[i, 1:].sum())
        if arousal_prob < threshold:
            continue
        label = 1 if probs.shape[1] == 2 else int(1 + np.argmax(probs[i, 1:]))
        center = anchor_start + anchor_dur / 2.0 + float(boxes[i, 0]) * window
        duration = window * math.exp(float(boxes[i, 1]))
        start = max(center - duration / 2.0, 0.0)
        end = min(center + duration / 2.0, segment_duration_s)
        if end <= start:
            continue
        events.append(
            ScoredEvent(
                start_s=start,
                duration_s=end - start,
                probability=arousal_prob,
                label=label,
            )
        )
    return events


def nms(events, iou_threshold: float = 0.5):
    """Greedy non-maximum suppression.

    Events are visited in descending probability (ties: earlier start, then
    shorter duration); one is kept iff its IOU with every already-kept event
    stays below the threshold.  Output keeps the visiting order.
    """
    ranked = sorted(
        events, key=lambda e: (-e.probability, e.start_s, e.duration_s)
    )
    kept = []
    for candidate in ranked:
        if all(iou(candidate, k) < iou_threshold for k in kept):
            kept.append(candidate)
    return kept


@dataclass
class EvalMatch:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (detection_idx, truth_idx)


def match_evaluation(detected, truth, iou_threshold: float = 0.5) -> EvalMatch:
    """One-to-one detection/truth matching maximizing the match count.

    Candidate pairs have IOU >= threshold.  A greedy pass takes pairs in
    descending IOU (ties: higher detection probability, earlier truth start,
    earlier detection start); an augmenting pass then grows the matching to
    maximum cardinality, so TP equals the optimal bipartite match count.
    """
    detected = list(detected)
    truth = list(truth)
    if not detected or not truth:
        return EvalMatch(tp=0, fp=len(detected), fn=len(truth), pairs=[])
    table = iou_matrix(detected, truth)
    candidates = [
        (i, j, table[i, j])
        for i in range(len(detected))
        for j in range(len(truth))
        if table[i, j] >= iou_threshold
    ]
    candidates.sort(
        key=lambda c: (
            -c[2],
            -detected[c[0]].probability,
            _as_interval(truth[c[1]])[0],
            _as_interval(detected[c[0]])[0],
        )
    )
    det_match = {}
    truth_match = {}
    for i, j, _ in candidates:
        if i not in det_match and j not in truth_match:
            det_match[i] = j
            truth_match[j] = i

    # Augmenting pass: ensures maximum cardinality on the thresholded graph.
    adjacency = [[] for _ in range(len(detected))]
    for i, j, _ in candidates:
        adjacency[i].append(j)

    def try_augment(i, banned):
        for j in adjacency[i]:
            if j in banned:
                continue
            banned.add(j)
            if j not in truth_match or try_augment(truth_match[j], banned):
                det_match[i] = j
                truth_match[j] = i
                return True
        return False

    unmatched = sorted(
        (i for i in range(len(detected)) if i not in det_match),
        key=lambda i: (-detected[i].probability, _as_interval(detected[i])[0]),
    )
    for i in unmatched:
        try_augment(i, set())

    pairs = sorted(det_match.items())
    tp = len(pairs)
    return EvalMatch(
        tp=tp,
        fp=len(detected) - tp,
        fn=len(truth) - tp,
        pairs=pairs,
    )


# -- serialization ------------------------------------------------------------


def format_event_line(record_id: str, event: ScoredEvent) -> str:
    return (
        f"{record_id},{event.start_s:.6f},{event.duration_s:.6f},"
        f"{event.probability:.6f}"
    )


def parse_event_line(line: str):
    record_id, start, duration, probability = line.strip().split(",")
    return record_id, ScoredEvent(
        start_s=float(start),
        duration_s=float(duration),
        probability=float(probability),
    )


def write_events(path, items) -> None:
    """items: iterable of (record_id, ScoredEvent)."""
    with open(path, "w", encoding="utf-8") as fh:
        for record_id, event in items:
            fh.write(format_event_line(record_id, event) + "\n")


def read_events(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(parse_event_line(line))
    return out
