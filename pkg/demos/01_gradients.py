"""Record a computation, differentiate it, and check the result numerically.

Run: python3 demos/01_gradients.py
"""

import numpy as np

from moca import tensor as T
from moca.model import Example, ModelConfig, TransformerParams, init_params, mle_loss

# A tape records every primitive applied while it is active.
w = T.Tensor(np.array([1.0, -2.0, 0.5]), name="w")
with T.Tape() as tape:
    loss = T.sum_(T.scale(w, 3.0))
grads = T.grad_by_name(tape, T.backward(tape, loss), {"w": w})
print("d/dw sum(3w) =", grads["w"])  # [3, 3, 3]

# The same machinery drives a whole encoder-decoder. In f64 its gradient
# should agree with central differences to about 1e-7.
cfg = ModelConfig(vocab_size=10, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_positions=12)
params = init_params(cfg, seed=0, dtype=np.float64)
example = Example(source=(4, 5, 6), target=(6, 5, 4))


def objective(leaves):
    return mle_loss(TransformerParams.from_leaves(cfg, leaves), example)


err = T.finite_difference_check(objective, params.tensors, step=1e-5, max_coords=16)
print(f"MLE loss {mle_loss(params, example).item():.4f}, worst relative gradient error {err:.2e}")

# Adam with a short warmup, then inverse-sqrt decay.
state = T.AdamState(lr=1e-2, warmup=4)
print("learning rate by step:", [round(state.rate(s), 5) for s in (1, 2, 4, 8, 16)])
for step in range(20):
    with T.Tape() as tape:
        loss = mle_loss(params, example)
    g = T.grad_by_name(tape, T.backward(tape, loss), params.leaves())
    params, state = T.adam_step(params, g, state)
print(f"after 20 Adam steps the loss is {mle_loss(params, example).item():.4f}")
