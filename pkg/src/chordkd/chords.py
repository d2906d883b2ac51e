"""Chord-symbol grammar, the 170-class vocabulary, and interval/frame conversions.

The label space is 12 roots x 14 qualities = 168 chords, plus a no-chord
class ("N") and an unknown/out-of-vocabulary class ("X"), for 170 classes
total.  Everything in this module is a pure function on immutable values.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "VOCAB_SIZE",
    "NO_CHORD_INDEX",
    "UNKNOWN_INDEX",
    "QUALITIES",
    "QUALITY_INTERVALS",
    "PITCH_CLASS_NAMES",
    "ChordKind",
    "ChordLabel",
    "ChordParseError",
    "Segment",
    "IntervalSequence",
    "FrameLabels",
    "parse_chord",
    "format_chord",
    "vocab_index",
    "label_from_index",
    "pitch_classes",
    "intervals_to_frames",
    "frames_to_intervals",
    "read_lab",
    "write_lab",
]

# Canonical quality order; the vocabulary index is root * 14 + quality slot.
QUALITIES: tuple[str, ...] = (
    "maj", "min", "dim", "aug", "min6", "maj6", "min7",
    "minmaj7", "maj7", "7", "dim7", "hdim7", "sus2", "sus4",
)

# Semitone sets above the root for each quality.
QUALITY_INTERVALS: dict[str, frozenset[int]] = {
    "maj": frozenset({0, 4, 7}),
    "min": frozenset({0, 3, 7}),
    "dim": frozenset({0, 3, 6}),
    "aug": frozenset({0, 4, 8}),
    "min6": frozenset({0, 3, 7, 9}),
    "maj6": frozenset({0, 4, 7, 9}),
    "min7": frozenset({0, 3, 7, 10}),
    "minmaj7": frozenset({0, 3, 7, 11}),
    "maj7": frozenset({0, 4, 7, 11}),
    "7": frozenset({0, 4, 7, 10}),
    "dim7": frozenset({0, 3, 6, 9}),
    "hdim7": frozenset({0, 3, 6, 10}),
    "sus2": frozenset({0, 2, 7}),
    "sus4": frozenset({0, 5, 7}),
}

PITCH_CLASS_NAMES: tuple[str, ...] = (
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
)

_NATURAL_PITCH = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}

N_ROOTS = 12
N_QUALITIES = len(QUALITIES)
VOCAB_SIZE = N_ROOTS * N_QUALITIES + 2  # 170
NO_CHORD_INDEX = N_ROOTS * N_QUALITIES  # 168
UNKNOWN_INDEX = NO_CHORD_INDEX + 1      # 169

_QUALITY_SLOT = {q: i for i, q in enumerate(QUALITIES)}

# Shorthand/alias resolution onto the 14-quality set.  Anything not reachable
# through this table is out of vocabulary and parses to Unknown ("X").
_QUALITY_ALIASES: dict[str, str] = {
    **{q: q for q in QUALITIES},
    "": "maj",
    "M": "maj",
    "major": "maj",
    "m": "min",
    "minor": "min",
    "o": "dim",
    "°": "dim",
    "+": "aug",
    "6": "maj6",
    "m6": "min6",
    "m7": "min7",
    "M7": "maj7",
    "mmaj7": "minmaj7",
    "minMaj7": "minmaj7",
    "dom": "7",
    "dom7": "7",
    "ø": "hdim7",
    "m7b5": "hdim7",
    "min7b5": "hdim7",
    "sus": "sus4",
    "5": "maj",
    # Extended chords reduce to their seventh-chord core.
    "9": "7",
    "11": "7",
    "13": "7",
    "maj9": "maj7",
    "maj11": "maj7",
    "maj13": "maj7",
    "min9": "min7",
    "min11": "min7",
    "min13": "min7",
    "m9": "min7",
    "m11": "min7",
    "m13": "min7",
}

_PAREN_RE = re.compile(r"\([^)]*\)")
_ROOT_RE = re.compile(r"[A-G][#b]*")


class ChordParseError(ValueError):
    """Raised for syntactically malformed chord symbols."""


class ChordKind(Enum):
    CHORD = "chord"
    NO_CHORD = "no_chord"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ChordLabel:
    """A parsed chord symbol: root pitch class plus quality, or N/X markers."""

    kind: ChordKind
    root: int | None = None
    quality: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ChordKind.CHORD:
            if self.root is None or not 0 <= self.root <= 11:
                raise ValueError(f"chord root must be in [0, 11], got {self.root}")
            if self.quality not in _QUALITY_SLOT:
                raise ValueError(f"unknown chord quality {self.quality!r}")
        elif self.root is not None or self.quality is not None:
            raise ValueError("root/quality are only valid for kind=CHORD")

    @classmethod
    def chord(cls, root: int, quality: str) -> "ChordLabel":
        return cls(ChordKind.CHORD, root, quality)

    @classmethod
    def no_chord(cls) -> "ChordLabel":
        return cls(ChordKind.NO_CHORD)

    @classmethod
    def unknown(cls) -> "ChordLabel":
        return cls(ChordKind.UNKNOWN)

    @property
    def is_chord(self) -> bool:
        return self.kind is ChordKind.CHORD

    def __str__(self) -> str:
        return format_chord(self)


NO_CHORD = ChordLabel.no_chord()
UNKNOWN = ChordLabel.unknown()


def _parse_root(text: str, original: str) -> int:
    if not text:
        raise ChordParseError(f"empty root in chord symbol {original!r}")
    letter = text[0]
    if letter not in _NATURAL_PITCH:
        raise ChordParseError(f"invalid root letter {letter!r} in {original!r}")
    pc = _NATURAL_PITCH[letter]
    for ch in text[1:]:
        if ch == "#":
            pc += 1
        elif ch == "b":
            pc -= 1
        else:
            raise ChordParseError(f"invalid accidental {ch!r} in {original!r}")
    return pc % 12


def _canonical_quality(text: str) -> str | None:
    # Bass notes / inversions are stripped: the vocabulary has no inversion axis.
    text = text.split("/", 1)[0]
    if text in _QUALITY_ALIASES:
        return _QUALITY_ALIASES[text]
    stripped = _PAREN_RE.sub("", text)
    return _QUALITY_ALIASES.get(stripped)


def parse_chord(text: str) -> ChordLabel:
    """Parse a Harte-style chord symbol into a :class:`ChordLabel`.

    Enharmonic roots map to the same pitch class, shorthand qualities are
    resolved through a fixed alias table, and any chord outside the
    170-class vocabulary maps to Unknown ("X").  Malformed syntax (empty
    root, invalid accidental) raises :class:`ChordParseError`.
    """
    if text is None or not text.strip():
        raise ChordParseError("empty chord symbol")
    s = text.strip()
    if s == "N":
        return NO_CHORD
    if s == "X":
        return UNKNOWN
    if ":" in s:
        root_text, quality_text = s.split(":", 1)
    else:
        m = _ROOT_RE.match(s)
        if m is None:
            raise ChordParseError(f"invalid root letter {s[0]!r} in {text!r}")
        root_text, quality_text = s[: m.end()], s[m.end():]
    root = _parse_root(root_text, text)
    quality = _canonical_quality(quality_text)
    if quality is None:
        return UNKNOWN
    return ChordLabel.chord(root, quality)


def format_chord(label: ChordLabel) -> str:
    """Canonical text for a label; inverse of :func:`parse_chord`."""
    if label.kind is ChordKind.NO_CHORD:
        return "N"
    if label.kind is ChordKind.UNKNOWN:
        return "X"
    return f"{PITCH_CLASS_NAMES[label.root]}:{label.quality}"


def vocab_index(label: ChordLabel) -> int:
    """Map a label to its vocabulary index in [0, 169]."""
    if label.kind is ChordKind.NO_CHORD:
        return NO_CHORD_INDEX
    if label.kind is ChordKind.UNKNOWN:
        return UNKNOWN_INDEX
    return label.root * N_QUALITIES + _QUALITY_SLOT[label.quality]


def label_from_index(index: int) -> ChordLabel:
    """Inverse of :func:`vocab_index`."""
    if not 0 <= index < VOCAB_SIZE:
        raise ValueError(f"vocabulary index out of range: {index}")
    if index == NO_CHORD_INDEX:
        return NO_CHORD
    if index == UNKNOWN_INDEX:
        return UNKNOWN
    root, slot = divmod(index, N_QUALITIES)
    return ChordLabel.chord(root, QUALITIES[slot])


def pitch_classes(label: ChordLabel) -> frozenset[int]:
    """Absolute pitch classes sounded by a label (empty for N and X)."""
    if label.kind is not ChordKind.CHORD:
        return frozenset()
    return frozenset((label.root + i) % 12 for i in QUALITY_INTERVALS[label.quality])


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: ChordLabel

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class IntervalSequence:
    """Time-ordered, non-overlapping (start, end, label) chord segments in seconds."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        prev_end = -math.inf
        prev_start = -math.inf
        for seg in self.segments:
            if not 0.0 <= seg.start < seg.end:
                raise ValueError(f"bad segment bounds [{seg.start}, {seg.end})")
            if seg.start < prev_start:
                raise ValueError("segments must be sorted by start time")
            if seg.start < prev_end:
                raise ValueError("segments must not overlap")
            prev_start, prev_end = seg.start, seg.end

    @classmethod
    def from_tuples(
        cls, items: Iterable[tuple[float, float, ChordLabel]]
    ) -> "IntervalSequence":
        return cls(tuple(Segment(s, e, lab) for s, e, lab in items))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def span(self) -> tuple[float, float]:
        if not self.segments:
            raise ValueError("empty interval sequence has no span")
        return self.segments[0].start, self.segments[-1].end

    @property
    def total_duration(self) -> float:
        return sum(seg.duration for seg in self.segments)


@dataclass(frozen=True)
class FrameLabels:
    """A length-T sequence of vocabulary indices at a fixed frame period."""

    labels: np.ndarray
    hop_seconds: float

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1:
            raise ValueError("frame labels must be one-dimensional")
        if self.hop_seconds <= 0:
            raise ValueError("hop_seconds must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= VOCAB_SIZE):
            raise ValueError("frame label index outside the vocabulary")

    def __len__(self) -> int:
        return int(self.labels.size)


def intervals_to_frames(
    seq: IntervalSequence, hop_seconds: float, total_frames: int
) -> FrameLabels:
    """Sample a segment sequence onto a frame grid.

    Frame t takes the label of the segment containing its center time
    (t + 0.5) * hop_seconds; frames outside all segments take NoChord.
    """
    if hop_seconds <= 0:
        raise ValueError("hop_seconds must be positive")
    if total_frames < 1:
        raise ValueError("total_frames must be at least 1")
    labels = np.full(total_frames, NO_CHORD_INDEX, dtype=np.int64)
    centers = (np.arange(total_frames) + 0.5) * hop_seconds
    for seg in seq:
        mask = (centers >= seg.start) & (centers < seg.end)
        labels[mask] = vocab_index(seg.label)
    return FrameLabels(labels, hop_seconds)


def frames_to_intervals(frames: FrameLabels) -> IntervalSequence:
    """Collapse maximal runs of equal frame labels into segments."""
    labels = frames.labels
    if labels.size == 0:
        raise ValueError("cannot convert empty frame labels to intervals")
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    hop = frames.hop_seconds
    return IntervalSequence.from_tuples(
        (s * hop, e * hop, label_from_index(int(labels[s]))) for s, e in zip(starts, ends)
    )


def read_lab(path: str | Path) -> IntervalSequence:
    """Read a `.lab` annotation file: `start end label` per line.

    Tab or space separated, blank lines and `#` comments tolerated.
    """
    items: list[tuple[float, float, ChordLabel]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise ChordParseError(f"{path}:{lineno}: expected 'start end label', got {raw!r}")
        start, end, label_text = float(parts[0]), float(parts[1]), parts[2].strip()
        items.append((start, end, parse_chord(label_text)))
    items.sort(key=lambda item: item[0])
    return IntervalSequence.from_tuples(items)


def write_lab(path: str | Path, seq: IntervalSequence) -> None:
    lines = [f"{seg.start:.6f}\t{seg.end:.6f}\t{format_chord(seg.label)}" for seg in seq]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
