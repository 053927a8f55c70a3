"""Greedy, beam and diverse beam search on hand-written next-token tables.

Run: python3 demos/02_decoding.py
"""

import math

from moca.decoding import DecodeConfig, TableModel, beam_search, diverse_beam_search, exhaustive_search, greedy_decode
from moca.model import EOS

A, B = 4, 5


def spread(mass):
    return {t: mass / 4 for t in (4, 5, 6, 7)}


# Greedy takes A (p = e^-0.5) and then pays e^-1.5 to stop; B is the better path overall.
table = {
    (): {A: math.exp(-0.5), B: math.exp(-1.0), EOS: 1 - math.exp(-0.5) - math.exp(-1.0)},
    (A,): {EOS: math.exp(-1.5), **spread(1 - math.exp(-1.5))},
    (B,): {EOS: math.exp(-0.5), **spread(1 - math.exp(-0.5))},
}
model = TableModel(8, table, default={EOS: 1.0})
greedy = greedy_decode(model, (), DecodeConfig(beam_size=1, max_length=2))
beam = beam_search(model, (), DecodeConfig(beam_size=2, max_length=2))[0]
print(f"greedy {greedy.tokens} logprob {greedy.sum_logprob:.2f}")
print(f"beam-2 {beam.tokens} logprob {beam.sum_logprob:.2f}")
print("exhaustive agrees:", exhaustive_search(model, (), 2, 1.0, vocab_size=8).tokens == beam.tokens)

# Diverse beam search: the second group pays for reusing the first group's token.
dominant = TableModel(8, {(): {A: 0.9, B: 0.05, EOS: 0.05}}, default={EOS: 1.0})
for strength in (0.0, 10.0):
    out = diverse_beam_search(dominant, (), DecodeConfig(beam_size=2, num_groups=2, diversity_strength=strength, max_length=3))
    print(f"diversity {strength:>4}: {[h.tokens for h in out]}")

# The length penalty decides between a short and a long answer.
table = {
    (): {EOS: math.exp(-1.0), A: 0.6, 6: 1 - math.exp(-1.0) - 0.6},
    (A,): {A: 0.7, EOS: 0.3},
    (A, A): {EOS: 0.7, 6: 0.3},
}
model = TableModel(8, table, default={EOS: 1.0})
for alpha in (0.0, 2.0):
    best = exhaustive_search(model, (), 3, alpha, vocab_size=8)
    print(f"length penalty {alpha}: best {best.tokens} (normalized {best.normalized_score:.3f})")
