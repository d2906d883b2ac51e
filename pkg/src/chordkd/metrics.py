"""Chord evaluation suite.

Covers the seven weighted comparison metrics (Root, Thirds, Triads, Sevenths,
Tetrads, Majmin, Mirex), directional-Hamming segmentation scores, CSR / WCSR /
ACQA, and frame-wise agreement metrics.

Conventions:

* Scores are duration-weighted over the merged timeline of reference and
  estimate; the estimate is clipped to the reference span and gaps are
  treated as NoChord.
* Unknown ("X") reference segments are excluded from every weighted score,
  as are references outside a comparator's domain.  A comparison with zero
  included duration returns ``None`` rather than 0.
* Over/Under segmentation are reported in score convention (1 = perfect);
  Seg is their per-song minimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .chords import (
    ChordKind,
    ChordLabel,
    FrameLabels,
    IntervalSequence,
    QUALITY_INTERVALS,
    Segment,
    pitch_classes,
    vocab_index,
)

__all__ = [
    "ComparisonKind",
    "SegmentationScores",
    "QualityReport",
    "FramewiseScores",
    "compare",
    "weighted_score",
    "segmentation_scores",
    "mean_segmentation",
    "csr",
    "wcsr",
    "acqa",
    "framewise_agreement",
    "render_report",
    "write_metrics_tsv",
]


class ComparisonKind(Enum):
    ROOT = "root"
    THIRDS = "thirds"
    TRIADS = "triads"
    SEVENTHS = "sevenths"
    TETRADS = "tetrads"
    MAJMIN = "majmin"
    MIREX = "mirex"


_MAJ = QUALITY_INTERVALS["maj"]
_MIN = QUALITY_INTERVALS["min"]
_SEVENTHS_DOMAIN = {"maj", "min", "7", "maj7", "min7"}

# Interval bands used by the hierarchy: the "third" band covers suspensions
# through major thirds, the "fifth" band diminished through augmented fifths,
# the "seventh" band minor and major sevenths.
_THIRD_BAND = frozenset({3, 4})
_TRIAD_BAND = frozenset(range(1, 9))
_SEVENTH_BAND = frozenset({10, 11})


def _band(label: ChordLabel, band: frozenset[int]) -> frozenset[int]:
    return QUALITY_INTERVALS[label.quality] & band


def _triad_reduction(label: ChordLabel) -> frozenset[int]:
    return QUALITY_INTERVALS[label.quality] & frozenset(range(9))


def compare(kind: ComparisonKind, ref: ChordLabel, est: ChordLabel) -> float | None:
    """Compare a single reference/estimate label pair.

    Returns 1.0 on a match, 0.0 on a mismatch, and ``None`` when the
    reference is excluded (Unknown, or outside the comparator's domain).
    """
    if ref.kind is ChordKind.UNKNOWN:
        return None

    if kind is ComparisonKind.MIREX:
        if ref.kind is ChordKind.NO_CHORD or est.kind is ChordKind.NO_CHORD:
            return float(ref.kind is ChordKind.NO_CHORD and est.kind is ChordKind.NO_CHORD)
        if est.kind is ChordKind.UNKNOWN:
            return 0.0
        return float(len(pitch_classes(ref) & pitch_classes(est)) >= 3)

    if kind is ComparisonKind.SEVENTHS and ref.is_chord and ref.quality not in _SEVENTHS_DOMAIN:
        return None
    if kind is ComparisonKind.MAJMIN and ref.is_chord and _triad_reduction(ref) not in (_MAJ, _MIN):
        return None

    if ref.kind is ChordKind.NO_CHORD or not est.is_chord:
        return float(ref.kind is ChordKind.NO_CHORD and est.kind is ChordKind.NO_CHORD)
    if ref.root != est.root:
        return 0.0

    if kind is ComparisonKind.ROOT:
        return 1.0
    if kind is ComparisonKind.THIRDS:
        return float(_band(ref, _THIRD_BAND) == _band(est, _THIRD_BAND))
    if kind is ComparisonKind.TRIADS:
        return float(_band(ref, _TRIAD_BAND) == _band(est, _TRIAD_BAND))
    if kind is ComparisonKind.SEVENTHS:
        return float(
            _band(ref, _THIRD_BAND) == _band(est, _THIRD_BAND)
            and _band(ref, _SEVENTH_BAND) == _band(est, _SEVENTH_BAND)
        )
    if kind is ComparisonKind.TETRADS:
        return float(QUALITY_INTERVALS[ref.quality] == QUALITY_INTERVALS[est.quality])
    if kind is ComparisonKind.MAJMIN:
        return float(_triad_reduction(ref) == _triad_reduction(est))
    raise ValueError(f"unsupported comparison kind: {kind}")


def _exact_match(ref: ChordLabel, est: ChordLabel) -> float | None:
    if ref.kind is ChordKind.UNKNOWN:
        return None
    return float(vocab_index(ref) == vocab_index(est))


def _label_at(seq: IntervalSequence, t: float) -> ChordLabel:
    for seg in seq:
        if seg.start <= t < seg.end:
            return seg.label
    return ChordLabel.no_chord()


def _timeline_pairs(
    ref: IntervalSequence,
    est: IntervalSequence,
    fill_ref_gaps: bool = True,
) -> list[tuple[float, ChordLabel, ChordLabel]]:
    """Atomic (duration, ref label, est label) sub-intervals over ref's span.

    The estimate is clipped to the reference span; time not covered by a
    sequence reads as NoChord.  With ``fill_ref_gaps=False``, time outside
    the reference segments is dropped instead (used for quality-restricted
    scoring).
    """
    if len(ref) == 0 or len(est) == 0:
        raise ValueError("weighted scoring requires non-empty sequences")
    lo, hi = ref.span
    bounds = {lo, hi}
    for seq in (ref, est):
        for seg in seq:
            for t in (seg.start, seg.end):
                if lo < t < hi:
                    bounds.add(t)
    edges = sorted(bounds)
    no_chord = ChordLabel.no_chord()

    pairs: list[tuple[float, ChordLabel, ChordLabel]] = []
    ref_segs, est_segs = ref.segments, est.segments
    ri = ei = 0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        while ri < len(ref_segs) and ref_segs[ri].end <= mid:
            ri += 1
        while ei < len(est_segs) and est_segs[ei].end <= mid:
            ei += 1
        in_ref = ri < len(ref_segs) and ref_segs[ri].start <= mid
        in_est = ei < len(est_segs) and est_segs[ei].start <= mid
        if not in_ref and not fill_ref_gaps:
            continue
        ref_label = ref_segs[ri].label if in_ref else no_chord
        est_label = est_segs[ei].label if in_est else no_chord
        pairs.append((b - a, ref_label, est_label))
    return pairs


def _weighted(
    comparator: Callable[[ChordLabel, ChordLabel], float | None],
    ref: IntervalSequence,
    est: IntervalSequence,
    fill_ref_gaps: bool = True,
) -> float | None:
    num = 0.0
    den = 0.0
    for duration, ref_label, est_label in _timeline_pairs(ref, est, fill_ref_gaps):
        match = comparator(ref_label, est_label)
        if match is None:
            continue
        num += duration * match
        den += duration
    if den <= 0.0:
        return None
    return num / den


def weighted_score(
    kind: ComparisonKind, ref: IntervalSequence, est: IntervalSequence
) -> float | None:
    """Duration-weighted comparison score over the intersected timeline.

    Returns ``None`` when no reference duration is included (all excluded).
    """
    return _weighted(lambda r, e: compare(kind, r, e), ref, est)


def csr(ref: IntervalSequence, est: IntervalSequence) -> float | None:
    """Chord Symbol Recall: duration fraction of exact label matches."""
    return _weighted(_exact_match, ref, est)


def wcsr(tracks: Sequence[tuple[IntervalSequence, IntervalSequence, float]]) -> float:
    """Duration-weighted mean of per-track CSR over (ref, est, duration) tracks."""
    num = 0.0
    den = 0.0
    for ref, est, duration in tracks:
        if duration <= 0:
            continue
        track_csr = csr(ref, est)
        if track_csr is None:
            continue
        num += duration * track_csr
        den += duration
    if den <= 0:
        raise ValueError("WCSR needs at least one track with positive duration")
    return num / den


@dataclass(frozen=True)
class QualityReport:
    """Per-quality WCSR values, the aggregate WCSR, and ACQA."""

    per_quality: dict[str, float | None]
    wcsr: float
    acqa: float | None

    def present_qualities(self) -> list[str]:
        return [q for q, v in self.per_quality.items() if v is not None]


def _restrict_to_quality(seq: IntervalSequence, quality: str) -> IntervalSequence:
    return IntervalSequence(
        tuple(seg for seg in seq if seg.label.is_chord and seg.label.quality == quality)
    )


def acqa(
    tracks: Sequence[tuple[IntervalSequence, IntervalSequence, float]],
    qualities: Sequence[str],
) -> QualityReport:
    """Average Chord Quality Accuracy over a quality set.

    For each quality the reference timeline is restricted to segments of
    that quality and WCSR is computed on the restriction; ACQA is the
    unweighted mean over qualities with nonzero reference duration in the
    corpus.  Absent qualities are reported as ``None`` and excluded.
    """
    if not qualities:
        raise ValueError("quality set must be non-empty")
    per_quality: dict[str, float | None] = {}
    for quality in qualities:
        num = 0.0
        den = 0.0
        for ref, est, _ in tracks:
            restricted = _restrict_to_quality(ref, quality)
            if len(restricted) == 0:
                continue
            duration = restricted.total_duration
            track_csr = _weighted(_exact_match, restricted, est, fill_ref_gaps=False)
            if track_csr is None:
                continue
            num += duration * track_csr
            den += duration
        per_quality[quality] = (num / den) if den > 0 else None
    present = [v for v in per_quality.values() if v is not None]
    return QualityReport(
        per_quality=per_quality,
        wcsr=wcsr(tracks),
        acqa=(sum(present) / len(present)) if present else None,
    )


@dataclass(frozen=True)
class SegmentationScores:
    """Over/under segmentation scores and their per-song minimum, all in [0, 1]."""

    overseg: float
    underseg: float
    seg: float


def _directional_hamming(a: IntervalSequence, b: IntervalSequence) -> float:
    """d(a -> b): normalized duration of a's segments missed by b's best overlaps."""
    total = 0.0
    missed = 0.0
    for seg in a:
        best = 0.0
        for other in b:
            overlap = min(seg.end, other.end) - max(seg.start, other.start)
            if overlap > best:
                best = overlap
        total += seg.duration
        missed += seg.duration - best
    if total <= 0:
        raise ValueError("segmentation scoring requires positive duration")
    return missed / total


def segmentation_scores(ref: IntervalSequence, est: IntervalSequence) -> SegmentationScores:
    """Directional-Hamming segmentation scores for one song (labels ignored)."""
    if len(ref) == 0 or len(est) == 0:
        raise ValueError("segmentation scoring requires non-empty sequences")
    overseg = 1.0 - _directional_hamming(ref, est)
    underseg = 1.0 - _directional_hamming(est, ref)
    return SegmentationScores(overseg=overseg, underseg=underseg, seg=min(overseg, underseg))


def mean_segmentation(scores: Iterable[SegmentationScores]) -> SegmentationScores:
    """Macro-average per-song segmentation scores across a corpus."""
    items = list(scores)
    if not items:
        raise ValueError("no segmentation scores to average")
    return SegmentationScores(
        overseg=float(np.mean([s.overseg for s in items])),
        underseg=float(np.mean([s.underseg for s in items])),
        seg=float(np.mean([s.seg for s in items])),
    )


@dataclass(frozen=True)
class FramewiseScores:
    accuracy: float
    precision: float
    recall: float
    f1: float


def framewise_agreement(pred: FrameLabels, target: FrameLabels) -> FramewiseScores:
    """Frame accuracy plus macro-averaged precision/recall/F1.

    Per-class statistics are macro-averaged over the classes present in
    either sequence.
    """
    p = pred.labels
    t = target.labels
    if p.size != t.size:
        raise ValueError(f"length mismatch: pred has {p.size} frames, target {t.size}")
    if p.size == 0:
        raise ValueError("cannot score empty frame sequences")
    accuracy = float(np.mean(p == t))
    classes = np.union1d(np.unique(p), np.unique(t))
    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = float(np.sum((p == c) & (t == c)))
        fp = float(np.sum((p == c) & (t != c)))
        fn = float(np.sum((p != c) & (t == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    return FramewiseScores(
        accuracy=accuracy,
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
    )


def render_report(metrics: Mapping[str, float | None], title: str = "evaluation") -> str:
    """Render metrics as an aligned text table; None renders as 'n/a'."""
    width = max((len(name) for name in metrics), default=4) + 2
    lines = [f"# {title}", "-" * (width + 8)]
    for name, value in metrics.items():
        text = "n/a" if value is None else f"{value:.4f}"
        lines.append(f"{name:<{width}}{text:>8}")
    return "\n".join(lines) + "\n"


def write_metrics_tsv(path: str | Path, metrics: Mapping[str, float | None]) -> None:
    """Write a machine-readable `name<TAB>value` file, 4 decimal places."""
    lines = []
    for name, value in metrics.items():
        text = "n/a" if value is None else f"{value:.4f}"
        lines.append(f"{name}\t{text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
