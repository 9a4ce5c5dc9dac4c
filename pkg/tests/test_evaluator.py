import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multidigit.evaluator import (
    EvalRecord,
    character_accuracy,
    coverage_at_accuracy,
    coverage_curve,
    read_records,
    sequence_accuracy,
    write_curve_csv,
    write_records,
)
from multidigit.sequence_head import SequenceLabel, Transcription

import math


def rec(pred, truth, conf=0.9, overflow=False, sid="r"):
    return EvalRecord(sid, Transcription(tuple(pred), math.log(conf) if conf > 0 else -50.0, overflow), SequenceLabel(tuple(truth)))


def six_records():
    confs = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    correct = [True, True, True, False, True, False]
    return [rec((1,), (1,) if ok else (2,), c, sid=str(i)) for i, (c, ok) in enumerate(zip(confs, correct))]


def test_no_partial_credit():
    assert sequence_accuracy([rec((1, 7, 5), (1, 7, 5))]) == 1.0
    assert sequence_accuracy([rec((1, 7), (1, 7, 5))]) == 0.0
    assert sequence_accuracy([rec((1,), (1,))] * 3 + [rec((2,), (1,))]) == 0.75
    assert sequence_accuracy([rec((1, 2, 3), (1, 2, 3), overflow=True)]) == 0.0
    with pytest.raises(ValueError):
        sequence_accuracy([])


def test_character_accuracy():
    assert character_accuracy([rec((1, 7, 5), (1, 7, 5))]) == 1.0
    assert character_accuracy([rec((1, 7), (1, 7, 5))]) == pytest.approx(2 / 3)
    assert character_accuracy([rec((), (1, 2)), rec((), (3,))]) == 0.0
    with pytest.raises(ValueError):
        character_accuracy([])


def test_curve_threshold_zero_and_above_max():
    records = six_records()
    pts = coverage_curve(records, [0.0, 0.95])
    assert pts[0].coverage == 1.0 and pts[0].accuracy == sequence_accuracy(records)
    assert pts[1].coverage == 0.0 and pts[1].accuracy is None


def test_curve_hand_example():
    (pt,) = coverage_curve(six_records(), [0.55])
    assert pt.coverage == pytest.approx(4 / 6)
    assert pt.accuracy == pytest.approx(3 / 4)


def test_curve_requires_increasing_thresholds():
    with pytest.raises(ValueError):
        coverage_curve(six_records(), [0.5, 0.5])


def test_coverage_at_accuracy_examples():
    perfect = [rec((1,), (1,), c) for c in (0.3, 0.6, 0.9)]
    assert coverage_at_accuracy(perfect, 0.98) == (0.0, 1.0)
    assert coverage_at_accuracy(perfect, 1.0) == (0.0, 1.0)
    t, cov = coverage_at_accuracy(six_records(), 1.0)
    assert 0.6 < t <= 0.7 and cov == pytest.approx(0.5)
    wrong = [rec((1,), (2,), c) for c in (0.3, 0.6, 0.9)]
    assert coverage_at_accuracy(wrong, 0.98) is None


def brute_coverage_at_accuracy(records, target):
    """Try every threshold on a fine grid plus every confidence value."""
    grid = sorted(set(np.linspace(0, 1, 1001)) | {r.confidence for r in records})
    best = None
    for t in grid:
        kept = [r for r in records if r.confidence >= t]
        if kept and sum(r.correct for r in kept) / len(kept) >= target:
            cov = len(kept) / len(records)
            if best is None or cov > best:
                best = cov
    return best


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from([0.1, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95, 1.0]), st.booleans()), min_size=1, max_size=10),
    st.sampled_from([0.5, 0.75, 0.9, 0.98, 1.0]),
)
def test_coverage_at_accuracy_matches_enumeration(items, target):
    records = [rec((1,), (1,) if ok else (0,), c) for c, ok in items]
    got = coverage_at_accuracy(records, target)
    want = brute_coverage_at_accuracy(records, target)
    if want is None:
        assert got is None
    else:
        assert got is not None and got[1] == pytest.approx(want)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.booleans()), min_size=1, max_size=30))
def test_coverage_monotone(items):
    records = [rec((1,), (1,) if ok else (0,), c) for c, ok in items]
    pts = coverage_curve(records, list(np.linspace(0, 1, 21)))
    covs = [p.coverage for p in pts]
    assert all(b <= a for a, b in zip(covs, covs[1:]))
    assert pts[0].accuracy == sequence_accuracy(records)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 2), max_size=3), st.lists(st.integers(0, 2), max_size=3)), min_size=1, max_size=8))
def test_char_accuracy_one_iff_sequence_accuracy_one(pairs):
    records = [rec(p, t) for p, t in pairs]
    assert (character_accuracy(records) == 1.0) == (sequence_accuracy(records) == 1.0)


def test_record_and_curve_files(tmp_path):
    records = six_records() + [rec((1, 2), (1, 2), 0.99, overflow=True, sid="o")]
    write_records(records, tmp_path / "r.jsonl", "0123456789")
    back = read_records(tmp_path / "r.jsonl", "0123456789")
    assert [r.correct for r in back] == [r.correct for r in records]
    assert back[-1].confidence == 0.0
    write_curve_csv(coverage_curve(records, [0.0, 0.5, 1.0]), tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,coverage,accuracy"
    assert lines[-1] == "1.000000,0.000000,nan"
