"""Decode a hand-written house-number distribution.

The length head is fairly sure there are three digits, the character heads
favour 1, 7, 5, and a door edge makes a fourth digit plausible. MAP decoding
takes one argmax per position and a running sum over lengths.
"""

from multidigit import worked_example
from multidigit.sequence_head import brute_force_max_sequence, predict_max_sequence

dist = worked_example.distribution()

print("best character per position")
for i, row in enumerate(dist.char_logp, 1):
    print(f"  S_{i}: {row.argmax()}  log p = {row.max():.5f}")

print("\nscore of the best sequence of each length")
for label, pred, prefix, total in worked_example.length_table(dist):
    print(f"  L={label:>2}  {pred:<9} prefix {prefix:9.4f}   total {total:9.4f}")

fast = predict_max_sequence(dist)
print(f"\nlinear-time decode: {''.join(map(str, fast.chars))!r}, log P = {fast.log_prob:.5f}, confidence {fast.confidence:.3f}")

# enumerating all 211,111 candidate sequences gives the same answer
slow = brute_force_max_sequence(dist)
print(f"exhaustive search:  {''.join(map(str, slow.chars))!r}, log P = {slow.log_prob:.5f}")

_, winner_problems, table_problems = worked_example.check()
for p in table_problems:
    print("note:", p)
