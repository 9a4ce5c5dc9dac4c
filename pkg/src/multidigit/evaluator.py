"""Whole-sequence metrics and confidence-threshold coverage."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .sequence_head import SequenceLabel, Transcription


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    transcription: Transcription
    truth: SequenceLabel

    @property
    def confidence(self) -> float:
        return self.transcription.confidence

    @property
    def correct(self) -> bool:
        """Length and every character right; overflow predictions never count."""
        t = self.transcription
        return not t.overflow and not self.truth.overflow and t.chars == self.truth.chars


@dataclass(frozen=True)
class CoveragePoint:
    threshold: float
    coverage: float
    accuracy: float | None  # None when nothing is kept


def sequence_accuracy(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("no records to score")
    return sum(r.correct for r in records) / len(records)


def character_accuracy(records: Sequence[EvalRecord]) -> float:
    """Positional per-character accuracy.

    Positions are compared up to the shorter sequence; every extra position
    of the longer one is an error. An overflow prediction adds one error for
    its unreported tail.
    """
    if not records:
        raise ValueError("no records to score")
    right = total = 0
    for r in records:
        pred, true = r.transcription.chars, r.truth.chars
        right += sum(p == t for p, t in zip(pred, true))
        total += max(len(pred), len(true))
        if r.transcription.overflow != r.truth.overflow:
            total += 1
    return 1.0 if total == 0 else right / total


def kept(records: Sequence[EvalRecord], threshold: float) -> list[EvalRecord]:
    return [r for r in records if r.confidence >= threshold]


def coverage_curve(records: Sequence[EvalRecord], thresholds: Sequence[float]) -> list[CoveragePoint]:
    """Coverage and kept-set accuracy at each threshold (strictly increasing)."""
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    n = len(records)
    points = []
    for t in thresholds:
        k = kept(records, t)
        points.append(CoveragePoint(float(t), len(k) / n if n else 0.0, sequence_accuracy(k) if k else None))
    return points


def coverage_at_accuracy(records: Sequence[EvalRecord], target: float) -> tuple[float, float] | None:
    """Smallest threshold whose kept set reaches ``target`` accuracy.

    Coverage only drops as the threshold rises, so the smallest qualifying
    threshold also has the largest coverage. Candidates are 0 and every
    distinct confidence; returns ``(threshold, coverage)`` or None.
    """
    if not 0.0 < target <= 1.0:
        raise ValueError("target accuracy must be in (0, 1]")
    if not records:
        return None
    ranked = sorted(records, key=lambda r: r.confidence, reverse=True)
    # walk thresholds from high to low, tracking kept-set statistics
    confs = [r.confidence for r in ranked]
    best = None
    right = 0
    i = 0
    n = len(ranked)
    while i < n:
        t = confs[i]
        while i < n and confs[i] == t:
            right += ranked[i].correct
            i += 1
        if right / i >= target:
            best = (t, i / n)
    if best is not None and best[1] == 1.0:
        return (0.0, 1.0)
    return best


def write_records(records: Sequence[EvalRecord], path, alphabet: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            t = r.transcription
            fh.write(
                json.dumps(
                    {
                        "id": r.sample_id,
                        "prediction": t.text(alphabet),
                        "overflow": t.overflow,
                        "log_prob": t.log_prob,
                        "confidence": t.confidence,
                        "truth": r.truth.text(alphabet),
                        "truth_overflow": r.truth.overflow,
                        "correct": r.correct,
                    }
                )
                + "\n"
            )


def read_records(path, alphabet: str) -> list[EvalRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            t = Transcription(tuple(alphabet.index(c) for c in d["prediction"]), float(d["log_prob"]), bool(d["overflow"]))
            truth = SequenceLabel(tuple(alphabet.index(c) for c in d["truth"]), bool(d.get("truth_overflow", False)))
            out.append(EvalRecord(str(d["id"]), t, truth))
    return out


def write_curve_csv(points: Sequence[CoveragePoint], path) -> None:
    """CSV ``threshold,coverage,accuracy``; ``path`` may be an open text file."""
    if hasattr(path, "write"):
        _curve_rows(points, path)
        return
    with open(Path(path), "w", newline="") as fh:
        _curve_rows(points, fh)


def _curve_rows(points, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["threshold", "coverage", "accuracy"])
    for p in points:
        w.writerow([f"{p.threshold:.6f}", f"{p.coverage:.6f}", "nan" if p.accuracy is None else f"{p.accuracy:.6f}"])
