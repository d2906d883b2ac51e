import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chordkd.chords import (
    ChordLabel,
    FrameLabels,
    IntervalSequence,
    QUALITIES,
    label_from_index,
    parse_chord,
    vocab_index,
)
from chordkd.metrics import (
    ComparisonKind,
    FramewiseScores,
    acqa,
    compare,
    csr,
    framewise_agreement,
    mean_segmentation,
    render_report,
    segmentation_scores,
    weighted_score,
    write_metrics_tsv,
    wcsr,
)

C_MAJ = parse_chord("C:maj")
C_MIN = parse_chord("C:min")
C_MAJ7 = parse_chord("C:maj7")
A_MIN = parse_chord("A:min")
NO_CHORD = ChordLabel.no_chord()
UNKNOWN = ChordLabel.unknown()


def _seq(*items):
    return IntervalSequence.from_tuples([(s, e, parse_chord(l)) for s, e, l in items])


# ---------------------------------------------------------------------------
# Single-pair comparisons
# ---------------------------------------------------------------------------


def test_root_ignores_quality():
    assert compare(ComparisonKind.ROOT, C_MAJ, C_MIN) == 1.0


def test_thirds_separates_major_and_minor():
    assert compare(ComparisonKind.THIRDS, C_MAJ, C_MIN) == 0.0


def test_mirex_counts_shared_pitch_classes():
    # C:maj and C:maj7 share {C, E, G} -> at least three common pitch classes.
    assert compare(ComparisonKind.MIREX, C_MAJ, C_MAJ7) == 1.0
    assert compare(ComparisonKind.MIREX, C_MAJ, parse_chord("F#:maj")) == 0.0


def test_mirex_no_chord_matches_only_no_chord():
    assert compare(ComparisonKind.MIREX, NO_CHORD, NO_CHORD) == 1.0
    assert compare(ComparisonKind.MIREX, NO_CHORD, C_MAJ) == 0.0
    assert compare(ComparisonKind.MIREX, C_MAJ, NO_CHORD) == 0.0


def test_sevenths_domain_excludes_other_qualities():
    assert compare(ComparisonKind.SEVENTHS, parse_chord("C:dim"), C_MAJ) is None
    assert compare(ComparisonKind.SEVENTHS, parse_chord("C:7"), parse_chord("C:7")) == 1.0


def test_majmin_domain():
    assert compare(ComparisonKind.MAJMIN, parse_chord("C:sus2"), C_MAJ) is None
    # maj7 reduces to a major triad, so it is inside the majmin domain.
    assert compare(ComparisonKind.MAJMIN, C_MAJ7, C_MAJ) == 1.0
    assert compare(ComparisonKind.MAJMIN, C_MAJ, C_MIN) == 0.0


def test_unknown_reference_is_excluded_everywhere():
    for kind in ComparisonKind:
        assert compare(kind, UNKNOWN, C_MAJ) is None


def test_no_chord_reference_scores_against_estimates():
    for kind in ComparisonKind:
        assert compare(kind, NO_CHORD, NO_CHORD) == 1.0
        assert compare(kind, NO_CHORD, C_MAJ) == 0.0


def test_tetrads_requires_exact_quality_set():
    assert compare(ComparisonKind.TETRADS, C_MAJ, C_MAJ7) == 0.0
    assert compare(ComparisonKind.TETRADS, C_MAJ, C_MAJ) == 1.0


# ---------------------------------------------------------------------------
# Weighted scores against the 1 ms sampling oracle
# ---------------------------------------------------------------------------


def _sampling_oracle(kind, ref, est, step=0.001):
    """Independent check: sample the timeline every 1 ms and average matches."""
    lo, hi = ref.span

    def label_at(seq, t, default):
        for seg in seq:
            if seg.start <= t < seg.end:
                return seg.label
        return default

    num = den = 0.0
    t = lo + step / 2
    while t < hi:
        r = label_at(ref, t, NO_CHORD)
        e = label_at(est, t, NO_CHORD)
        m = compare(kind, r, e) if kind is not None else (
            None if r.kind.value == "unknown" else float(vocab_index(r) == vocab_index(e))
        )
        if m is not None:
            num += m
            den += 1
        t += step
    return num / den if den else None


def _random_track_pair(rng):
    def random_seq(t0, horizon):
        items = []
        t = t0
        while t < horizon:
            dur = rng.uniform(0.2, 2.0)
            idx = int(rng.integers(0, 170))
            items.append((t, t + dur, label_from_index(idx)))
            t += dur
        return IntervalSequence.from_tuples(items)

    horizon = rng.uniform(3.0, 8.0)
    return random_seq(0.0, horizon), random_seq(0.0, horizon + rng.uniform(-1.0, 1.0))


def test_weighted_score_identity_is_one_for_all_kinds():
    rng = np.random.default_rng(7)
    ref, _ = _random_track_pair(rng)
    for kind in ComparisonKind:
        score = weighted_score(kind, ref, ref)
        assert score is None or score == pytest.approx(1.0)


def test_weighted_score_duration_arithmetic():
    ref = _seq((0, 10, "C:maj"))
    est = _seq((0, 5, "C:maj"), (5, 10, "A:min"))
    assert weighted_score(ComparisonKind.ROOT, ref, est) == pytest.approx(0.5)


def test_weighted_score_matches_sampling_oracle():
    rng = np.random.default_rng(1234)
    for _ in range(30):
        ref, est = _random_track_pair(rng)
        for kind in ComparisonKind:
            fast = weighted_score(kind, ref, est)
            slow = _sampling_oracle(kind, ref, est)
            if fast is None or slow is None:
                assert fast == slow
            else:
                assert fast == pytest.approx(slow, abs=1e-3)


def test_monotone_comparison_chains():
    rng = np.random.default_rng(99)
    chains = [
        (ComparisonKind.ROOT, ComparisonKind.THIRDS, ComparisonKind.TRIADS,
         ComparisonKind.TETRADS),
        (ComparisonKind.ROOT, ComparisonKind.THIRDS, ComparisonKind.SEVENTHS,
         ComparisonKind.TETRADS),
    ]
    for _ in range(50):
        ref, est = _random_track_pair(rng)
        for chain in chains:
            # Restrict to sub-intervals included by every comparator in the chain.
            def chained(r, e, chain=chain):
                scores = [compare(kind, r, e) for kind in chain]
                return None if any(s is None for s in scores) else scores

            from chordkd.metrics import _timeline_pairs

            sums = np.zeros(len(chain))
            total = 0.0
            for dur, r, e in _timeline_pairs(ref, est):
                scores = chained(r, e)
                if scores is None:
                    continue
                sums += dur * np.asarray(scores)
                total += dur
            if total == 0:
                continue
            values = sums / total
            assert np.all(np.diff(values) <= 1e-12)


def test_weighted_score_undefined_when_everything_excluded():
    ref = _seq((0, 4, "X"))
    est = _seq((0, 4, "C:maj"))
    assert weighted_score(ComparisonKind.ROOT, ref, est) is None


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def test_segmentation_identity():
    seq = _seq((0, 3, "C:maj"), (3, 7, "A:min"), (7, 10, "N"))
    scores = segmentation_scores(seq, seq)
    assert scores.overseg == pytest.approx(1.0)
    assert scores.underseg == pytest.approx(1.0)
    assert scores.seg == pytest.approx(1.0)


def test_segmentation_hand_case():
    ref = _seq((0, 10, "C:maj"))
    est = _seq((0, 5, "C:maj"), (5, 10, "C:maj"))
    scores = segmentation_scores(ref, est)
    assert scores.overseg == pytest.approx(0.5)
    assert scores.underseg == pytest.approx(1.0)
    assert scores.seg == pytest.approx(0.5)


def test_segmentation_is_label_invariant():
    rng = np.random.default_rng(5)
    ref, est = _random_track_pair(rng)
    relabeled = IntervalSequence.from_tuples(
        [(s.start, s.end, label_from_index(int(rng.integers(0, 170)))) for s in est]
    )
    assert segmentation_scores(ref, est) == segmentation_scores(ref, relabeled)


def test_segmentation_swap_symmetry():
    rng = np.random.default_rng(6)
    ref, est = _random_track_pair(rng)
    fwd = segmentation_scores(ref, est)
    rev = segmentation_scores(est, ref)
    assert fwd.overseg == pytest.approx(rev.underseg)
    assert fwd.underseg == pytest.approx(rev.overseg)
    assert fwd.seg == pytest.approx(rev.seg)


def test_mean_segmentation_macro_average():
    ref = _seq((0, 10, "C:maj"))
    est = _seq((0, 5, "C:maj"), (5, 10, "C:maj"))
    per_song = [segmentation_scores(ref, ref), segmentation_scores(ref, est)]
    agg = mean_segmentation(per_song)
    assert agg.seg == pytest.approx(0.75)


def test_segmentation_rejects_empty():
    with pytest.raises(ValueError):
        segmentation_scores(IntervalSequence(()), _seq((0, 1, "N")))


# ---------------------------------------------------------------------------
# CSR / WCSR / ACQA
# ---------------------------------------------------------------------------


def test_csr_identity_and_half_match():
    ref = _seq((0, 10, "C:maj"))
    assert csr(ref, ref) == pytest.approx(1.0)
    est = _seq((0, 5, "C:maj"), (5, 10, "C:min"))
    assert csr(ref, est) == pytest.approx(0.5)


def test_csr_equals_sampling_oracle_with_exact_comparator():
    rng = np.random.default_rng(17)
    for _ in range(10):
        ref, est = _random_track_pair(rng)
        fast = csr(ref, est)
        slow = _sampling_oracle(None, ref, est)
        assert fast == pytest.approx(slow, abs=1e-3)


def test_wcsr_weighted_mean():
    ref_a = _seq((0, 3, "C:maj"))
    ref_b = _seq((0, 1, "C:maj"))
    est_perfect = ref_a
    est_wrong = _seq((0, 1, "D:maj"))
    value = wcsr([(ref_a, est_perfect, 3.0), (ref_b, est_wrong, 1.0)])
    assert value == pytest.approx(0.75)


def test_wcsr_single_track_and_errors():
    ref = _seq((0, 2, "C:maj"))
    assert wcsr([(ref, ref, 2.0)]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wcsr([(ref, ref, 0.0)])


def test_wcsr_equal_durations_is_unweighted_mean():
    ref = _seq((0, 4, "C:maj"))
    est_half = _seq((0, 2, "C:maj"), (2, 4, "D:maj"))
    value = wcsr([(ref, ref, 5.0), (ref, est_half, 5.0)])
    assert value == pytest.approx((1.0 + 0.5) / 2)


def test_acqa_perfect_and_absent_qualities():
    ref = _seq((0, 4, "C:maj"), (4, 8, "A:min"))
    report = acqa([(ref, ref, 8.0)], qualities=("maj", "min", "dim7"))
    assert report.per_quality["maj"] == pytest.approx(1.0)
    assert report.per_quality["min"] == pytest.approx(1.0)
    assert report.per_quality["dim7"] is None
    assert report.acqa == pytest.approx(1.0)
    assert report.wcsr == pytest.approx(1.0)


def test_acqa_only_maj_corpus():
    ref = _seq((0, 4, "C:maj"))
    report = acqa([(ref, ref, 4.0)], qualities=("maj", "min"))
    assert report.per_quality["min"] is None
    assert report.acqa == pytest.approx(report.per_quality["maj"])


def test_acqa_more_sensitive_than_wcsr_to_rare_quality_failure():
    # maj dominates by duration; dim7 is rare.  Zeroing dim7 estimates moves
    # ACQA by about 1/|qualities| of its value, WCSR by much less.
    ref = _seq((0, 90, "C:maj"), (90, 100, "B:dim7"))
    est_good = ref
    est_bad = _seq((0, 90, "C:maj"), (90, 100, "B:maj"))
    tracks_good = [(ref, est_good, 100.0)]
    tracks_bad = [(ref, est_bad, 100.0)]
    qualities = ("maj", "dim7")
    good = acqa(tracks_good, qualities)
    bad = acqa(tracks_bad, qualities)
    acqa_drop = good.acqa - bad.acqa
    wcsr_drop = good.wcsr - bad.wcsr
    assert acqa_drop == pytest.approx(0.5)
    assert wcsr_drop == pytest.approx(0.1)
    assert acqa_drop > wcsr_drop


# ---------------------------------------------------------------------------
# Frame-wise agreement
# ---------------------------------------------------------------------------


def test_framewise_identity():
    labels = FrameLabels(np.array([1, 2, 3, 3]), 0.1)
    scores = framewise_agreement(labels, labels)
    assert scores == FramewiseScores(1.0, 1.0, 1.0, 1.0)


def test_framewise_all_wrong():
    pred = FrameLabels(np.array([1, 1, 1]), 0.1)
    target = FrameLabels(np.array([2, 2, 2]), 0.1)
    assert framewise_agreement(pred, target).accuracy == 0.0


def test_framewise_two_class_hand_case():
    # pred=[a,a,b], target=[a,b,b]: per-class P/R from the confusion matrix.
    pred = FrameLabels(np.array([0, 0, 1]), 0.1)
    target = FrameLabels(np.array([0, 1, 1]), 0.1)
    scores = framewise_agreement(pred, target)
    assert scores.accuracy == pytest.approx(2 / 3)
    assert scores.precision == pytest.approx((0.5 + 1.0) / 2)
    assert scores.recall == pytest.approx((1.0 + 0.5) / 2)
    assert scores.f1 == pytest.approx(2 / 3)


def test_framewise_length_mismatch_errors():
    with pytest.raises(ValueError):
        framewise_agreement(
            FrameLabels(np.array([1]), 0.1), FrameLabels(np.array([1, 2]), 0.1)
        )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def test_report_rendering_and_tsv(tmp_path):
    metrics = {"Root": 0.91234, "Seg": 0.5, "ACQA": None}
    text = render_report(metrics)
    assert "0.9123" in text and "n/a" in text
    path = tmp_path / "metrics.tsv"
    write_metrics_tsv(path, metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == "Root\t0.9123"
    assert lines[2] == "ACQA\tn/a"


@given(st.integers(0, 169), st.integers(0, 169))
def test_compare_outputs_are_binary_or_excluded(ref_idx, est_idx):
    ref, est = label_from_index(ref_idx), label_from_index(est_idx)
    for kind in ComparisonKind:
        result = compare(kind, ref, est)
        assert result in (None, 0.0, 1.0)
