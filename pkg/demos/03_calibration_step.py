"""One momentum-calibration step, taken apart.

A generator (an EMA copy of the model) decodes candidates, ROUGE ranks them
worst-first, and a margin ranking loss on length-normalized costs pulls the
online model toward the better candidates.

Run: python3 demos/03_calibration_step.py
"""

import numpy as np

from moca.calibration import (
    CalibConfig,
    TrainState,
    generate_candidates,
    moca_train_step,
    positional_weights,
    rank_candidates,
    ranking_loss,
    sequence_cost,
)
from moca.decoding import DecodeConfig
from moca.model import Example, ModelConfig, Vocab, init_params
from moca.tensor import AdamState

print("positional weights, n=3:", positional_weights(3).round(4), "(12/49, 27/49, 108/49)")
print("ranking loss [1.0, 1.5] at margin 0.001:", ranking_loss([1.0, 1.5], 0.001).item())

vocab = Vocab.synthetic(12)
cfg = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=1, d_ff=32, max_positions=16)
p = init_params(cfg, 11)
theta = p.replace({k: v * 3 if v.ndim == 2 else v for k, v in p.tensors.items()})  # sharper, more varied outputs
config = CalibConfig(K=6, cost_alpha=1.0, decode=DecodeConfig(beam_size=6, num_groups=6, diversity_strength=1.0, max_length=6))

example = Example(vocab.encode("t1 t2 t3"), vocab.encode("t3 t2 t1"))
ranked = rank_candidates(generate_candidates(theta, example.source, config), example.target, source=example.source)
print(f"\n{len(ranked)} candidates for '{vocab.decode(example.source)}', worst first:")
for c in ranked.candidates:
    cost = sequence_cost(theta, example.source, c.tokens, config.cost_alpha).item()
    print(f"  {vocab.decode(c.tokens):<22} metric {c.metric_score:.3f}  cost {cost:.3f}")

state = TrainState(theta, theta, AdamState(lr=1e-3), 0, {}, np.random.default_rng(0))
batch = [example, Example(vocab.encode("t4 t5"), vocab.encode("t5 t4"))]
for _ in range(5):
    state, report = moca_train_step(state, batch, config)
    print(f"step {report.step}: loss {report.loss:.4f}  ranking {report.ranking_loss:.4f}  tau {report.kendall_tau:+.3f}")
