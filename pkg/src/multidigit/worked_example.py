"""A hand-specified house-number distribution and its decoding.

The probabilities describe an image of "175" where the model also sees a
plausible fourth character (an edge that looks like a 1) and has no idea
about a fifth. Decoding should return "175" at log-probability -0.42144.
"""

from __future__ import annotations

import numpy as np

from .sequence_head import SequenceDistribution, Transcription, predict_max_sequence

LENGTH_PROBS = np.array([0.002, 0.002, 0.002, 0.9, 0.09, 0.002, 0.002])

_LOW = 0.00125
CHAR_PROBS = np.array(
    [
        [_LOW, 0.9, _LOW, _LOW, _LOW, _LOW, _LOW, 0.1, _LOW, _LOW],
        [_LOW, _LOW, _LOW, _LOW, _LOW, _LOW, _LOW, 0.9, _LOW, 0.1],
        [_LOW, _LOW, _LOW, _LOW, _LOW, 0.9, 0.1, _LOW, _LOW, _LOW],
        [0.08889, 0.2] + [0.08889] * 8,
        [0.1] * 10,
    ]
)

# expected decoding, as printed alongside the tables. The printed totals for
# lengths 1 and 2 are not prefix + log P(L) (which gives -6.3200 and -6.4253);
# they are kept verbatim so comparisons against them stay honest.
EXPECTED_LENGTH_LOGP = np.array([-6.2146, -6.2146, -6.2146, -0.10536, -2.4079, -6.2146, -6.2146])
EXPECTED_PREFIX = np.array([0.0, -0.1054, -0.2107, -0.3161, -1.9255, -4.2281, -4.2281])
EXPECTED_TOTALS = np.array([-6.2146, -7.2686, -8.3226, -0.42144, -4.3334, -10.443, -10.443])
EXPECTED_TEXT = "175"
EXPECTED_LOG_PROB = -0.42144
TOLERANCE = 1e-3


def distribution() -> SequenceDistribution:
    return SequenceDistribution.from_probs(LENGTH_PROBS, CHAR_PROBS)


def length_table(dist: SequenceDistribution) -> list[tuple[str, str, float, float]]:
    """Rows ``(length, prediction, prefix log-prob, total log-prob)`` for every
    length value including overflow."""
    best = np.argmax(dist.char_logp, axis=1)
    prefix = np.concatenate([[0.0], np.cumsum(dist.char_logp.max(axis=1))])
    n = dist.max_len
    rows = []
    for length in range(n + 2):
        used = min(length, n)
        pred = "".join(str(c) for c in best[:used]) + ("..." if length > n else "")
        label = str(length) if length <= n else f">{n}"
        rows.append((label, pred, float(prefix[used]), float(prefix[used] + dist.length_logp[length])))
    return rows


def check() -> tuple[Transcription, list[str], list[str]]:
    """Decode the example and compare with the expected tables.

    Returns ``(transcription, winner_problems, table_problems)``; the winner
    is right when ``winner_problems`` is empty.
    """
    dist = distribution()
    t = predict_max_sequence(dist)
    rows = length_table(dist)
    table_problems = []
    for name, got, want in (
        ("log P(L)", dist.length_logp, EXPECTED_LENGTH_LOGP),
        ("prefix", np.array([r[2] for r in rows]), EXPECTED_PREFIX),
        ("total", np.array([r[3] for r in rows]), EXPECTED_TOTALS),
    ):
        for i, (g, w) in enumerate(zip(got, want)):
            if abs(g - w) > TOLERANCE:
                table_problems.append(f"{name} row {rows[i][0]}: computed {g:.5f}, expected {w:.5f}")
    winner_problems = []
    text = "".join(str(c) for c in t.chars)
    if text != EXPECTED_TEXT or t.overflow:
        winner_problems.append(f"winner: got {text!r} (overflow={t.overflow}), expected {EXPECTED_TEXT!r}")
    if abs(t.log_prob - EXPECTED_LOG_PROB) > TOLERANCE:
        winner_problems.append(f"winner log-prob: got {t.log_prob:.5f}, expected {EXPECTED_LOG_PROB}")
    return t, winner_problems, table_problems
