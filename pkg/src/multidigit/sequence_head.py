"""Factorized distribution over bounded-length sequences.

A sequence ``s_1 .. s_n`` is scored as ``log P(L=n) + sum_i log P(S_i=s_i)``.
The length variable has ``N + 2`` values: ``0 .. N`` and an overflow bucket
for anything longer than ``N``. Each position has its own ``K``-way softmax.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_nn import log_softmax


@dataclass(frozen=True)
class SequenceLabel:
    """Ground-truth characters as class indices.

    When the true sequence is longer than ``N``, ``overflow`` is set and
    ``chars`` holds its first ``N`` characters.
    """

    chars: tuple[int, ...]
    overflow: bool = False

    def __post_init__(self):
        object.__setattr__(self, "chars", tuple(int(c) for c in self.chars))

    @classmethod
    def from_text(cls, text: str, alphabet: str, max_len: int) -> "SequenceLabel":
        idx = []
        for ch in text:
            pos = alphabet.find(ch)
            if pos < 0:
                raise IndexError(f"character {ch!r} is not in the alphabet {alphabet!r}")
            idx.append(pos)
        if len(idx) > max_len:
            return cls(tuple(idx[:max_len]), overflow=True)
        return cls(tuple(idx))

    def validate(self, max_len: int, alphabet_size: int) -> None:
        if len(self.chars) > max_len:
            raise ValueError(f"label has {len(self.chars)} characters but N={max_len}")
        if self.overflow and len(self.chars) != max_len:
            raise ValueError("overflow labels must carry exactly N characters")
        for c in self.chars:
            if not 0 <= c < alphabet_size:
                raise IndexError(f"class index {c} out of range for K={alphabet_size}")

    def length_class(self, max_len: int) -> int:
        return max_len + 1 if self.overflow else len(self.chars)

    def text(self, alphabet: str) -> str:
        return "".join(alphabet[c] for c in self.chars)


@dataclass(frozen=True)
class Transcription:
    chars: tuple[int, ...]
    log_prob: float
    overflow: bool = False

    @property
    def confidence(self) -> float:
        return confidence(self)

    def text(self, alphabet: str) -> str:
        return "".join(alphabet[c] for c in self.chars)


@dataclass(frozen=True)
class SequenceDistribution:
    """Log-probabilities for the length head and the ``N`` character heads.

    ``length_logp`` has ``N + 2`` entries, ``char_logp`` has shape ``(N, K)``.
    Construction checks shapes, finiteness and sign but not normalization,
    since hand-written tables are often rounded; see :meth:`check_normalized`.
    """

    length_logp: np.ndarray
    char_logp: np.ndarray
    max_len: int = field(init=False)
    alphabet_size: int = field(init=False)

    def __post_init__(self):
        length = np.asanyarray(self.length_logp, dtype=np.float64)
        chars = np.asanyarray(self.char_logp, dtype=np.float64)
        if chars.ndim != 2:
            raise ValueError(f"char_logp must be (N, K), got shape {chars.shape}")
        n, k = chars.shape
        if n < 1 or k < 1:
            raise ValueError("need N >= 1 and K >= 1")
        if length.shape != (n + 2,):
            raise ValueError(f"length_logp must have N+2={n + 2} entries, got shape {length.shape}")
        if not (np.isfinite(length).all() and np.isfinite(chars).all()):
            raise ValueError("log-probabilities must be finite")
        if (length > 1e-9).any() or (chars > 1e-9).any():
            raise ValueError("log-probabilities must be <= 0")
        object.__setattr__(self, "length_logp", length)
        object.__setattr__(self, "char_logp", chars)
        object.__setattr__(self, "max_len", n)
        object.__setattr__(self, "alphabet_size", k)

    @classmethod
    def from_logits(cls, length_logits, char_logits) -> "SequenceDistribution":
        return cls(log_softmax(np.asarray(length_logits, np.float64)), log_softmax(np.asarray(char_logits, np.float64)))

    @classmethod
    def from_probs(cls, length_probs, char_probs) -> "SequenceDistribution":
        return cls(np.log(length_probs), np.log(char_probs))

    def check_normalized(self, atol: float = 1e-6) -> bool:
        return bool(
            abs(np.exp(self.length_logp).sum() - 1.0) <= atol
            and np.all(np.abs(np.exp(self.char_logp).sum(axis=1) - 1.0) <= atol)
        )


def sequence_log_prob(dist: SequenceDistribution, label: SequenceLabel) -> float:
    """Total log-probability the distribution assigns to ``label``."""
    label.validate(dist.max_len, dist.alphabet_size)
    total = dist.length_logp[label.length_class(dist.max_len)]
    for i, c in enumerate(label.chars):
        total += dist.char_logp[i, c]
    return float(total)


def confidence(t: Transcription) -> float:
    """Probability that the transcription is right; overflow reports 0."""
    if t.overflow:
        return 0.0
    return float(min(1.0, math.exp(t.log_prob)))


def predict_max_sequence(dist: SequenceDistribution) -> Transcription:
    """Exact MAP transcription in ``O(N * K)``.

    Positions are maximized independently; a running sum of the per-position
    maxima plus ``log P(L=l)`` scores each length. The overflow bucket uses
    all ``N`` positions. Ties go to the lowest class and the shortest length.
    """
    best_chars = np.argmax(dist.char_logp, axis=1)
    best_logp = np.max(dist.char_logp, axis=1)
    n = dist.max_len
    running = 0.0
    best_len, best_total = 0, dist.length_logp[0]
    for length in range(1, n + 2):
        if length <= n:
            running += best_logp[length - 1]
        total = running + dist.length_logp[length]
        if total > best_total:
            best_len, best_total = length, total
    if best_len == n + 1:
        return Transcription(tuple(int(c) for c in best_chars), float(best_total), overflow=True)
    return Transcription(tuple(int(c) for c in best_chars[:best_len]), float(best_total))


def predict_max_sequence_batch(length_logp: np.ndarray, char_logp: np.ndarray) -> list[Transcription]:
    """Vectorized :func:`predict_max_sequence` over ``(B, N+2)`` and ``(B, N, K)``."""
    length_logp = np.asarray(length_logp, dtype=np.float64)
    char_logp = np.asarray(char_logp, dtype=np.float64)
    n = char_logp.shape[1]
    best_chars = char_logp.argmax(axis=2)
    prefix = np.concatenate(
        [np.zeros((len(char_logp), 1)), np.cumsum(char_logp.max(axis=2), axis=1)], axis=1
    )
    prefix = np.concatenate([prefix, prefix[:, -1:]], axis=1)  # overflow uses all N
    totals = prefix + length_logp
    best_len = totals.argmax(axis=1)  # first max == shortest length
    out = []
    for b, length in enumerate(best_len):
        overflow = length == n + 1
        keep = n if overflow else length
        out.append(Transcription(tuple(int(c) for c in best_chars[b, :keep]), float(totals[b, length]), bool(overflow)))
    return out


def brute_force_max_sequence(dist: SequenceDistribution, limit: int = 250_000) -> Transcription:
    """Enumerate every sequence of every length; test oracle for small N, K.

    Candidates are scored with :func:`sequence_log_prob` semantics but
    without per-label validation, shortest length first and
    lexicographically within a length, so a strict ``>`` keeps the same tie
    breaking as :func:`predict_max_sequence`.
    """
    n, k = dist.max_len, dist.alphabet_size
    count = sum(k**l for l in range(n + 1)) + k**n
    if count > limit:
        raise ValueError(f"{count} candidate sequences exceed the enumeration limit {limit}")
    length_logp = dist.length_logp.tolist()
    char_logp = dist.char_logp.tolist()
    best_lp, best_seq, best_len = -math.inf, (), 0
    for length in range(n + 2):
        used = min(length, n)
        for seq in itertools.product(range(k), repeat=used):
            lp = length_logp[length]
            for i, c in enumerate(seq):
                lp += char_logp[i][c]
            if lp > best_lp:
                best_lp, best_seq, best_len = lp, seq, length
    return Transcription(best_seq, best_lp, overflow=best_len == n + 1)


# --------------------------------------------------------------------------
# training loss


def label_arrays(labels: list[SequenceLabel], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode labels as length classes ``(B,)`` and char targets ``(B, N)``
    padded with -1 where no character is supervised."""
    lengths = np.array([lab.length_class(max_len) for lab in labels], dtype=np.int64)
    chars = np.full((len(labels), max_len), -1, dtype=np.int64)
    for b, lab in enumerate(labels):
        chars[b, : len(lab.chars)] = lab.chars
    return lengths, chars


def nll_loss_and_grad_batch(length_logits, char_logits, lengths, chars):
    """Mean negative log-likelihood over a batch and its logit gradients.

    ``chars`` uses -1 for positions beyond the true length; those heads get
    exactly zero gradient. Each supervised head gets ``softmax - onehot``.
    """
    length_logits = np.asarray(length_logits)
    char_logits = np.asarray(char_logits)
    bsz, n, k = char_logits.shape
    lp_len = log_softmax(length_logits, axis=1)
    lp_chr = log_softmax(char_logits, axis=2)
    rows = np.arange(bsz)
    mask = chars >= 0
    safe = np.where(mask, chars, 0)
    picked = np.take_along_axis(lp_chr, safe[..., None], axis=2)[..., 0]
    per_example = -(lp_len[rows, lengths].astype(np.float64) + np.where(mask, picked, 0).sum(axis=1))
    loss = float(per_example.mean())

    d_len = np.exp(lp_len)
    d_len[rows, lengths] -= 1
    d_chr = np.exp(lp_chr)
    np.put_along_axis(d_chr, safe[..., None], np.take_along_axis(d_chr, safe[..., None], axis=2) - 1, axis=2)
    d_chr *= mask[..., None]
    scale = d_len.dtype.type(1.0 / bsz)
    return loss, d_len * scale, d_chr * scale, per_example


def nll_loss_and_grad(length_logits, char_logits, label: SequenceLabel):
    """Single-example NLL ``-log P(S=label)`` and gradients w.r.t. all logits."""
    char_logits = np.asarray(char_logits)
    n, k = char_logits.shape
    label.validate(n, k)
    lengths, chars = label_arrays([label], n)
    loss, d_len, d_chr, _ = nll_loss_and_grad_batch(
        np.asarray(length_logits)[None], char_logits[None], lengths, chars
    )
    return loss, d_len[0], d_chr[0]
