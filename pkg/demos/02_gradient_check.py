"""Finite-difference checks, first per layer, then through a whole network."""

import numpy as np

from multidigit import tensor_nn as nn
from multidigit.gradcheck import grad_check, max_relative_error, numeric_gradient, relative_error
from multidigit.network import LayerSpec, NetworkConfig, build
from multidigit.sequence_head import SequenceLabel, label_arrays, nll_loss_and_grad_batch

rng = np.random.default_rng(0)

# a single conv layer: analytic gradients against central differences
inputs = {"x": rng.standard_normal((2, 6, 6, 2)), "w": rng.standard_normal((5, 5, 2, 3)), "b": rng.standard_normal(3)}


def forward(x, w, b):
    return nn.conv2d(x, w, b, stride=1)


def backward(dout, x, w, b):
    dx, dw, db = nn.conv2d_backward(dout, nn.conv2d_forward(x, w, b)[1])
    return {"x": dx, "w": dw, "b": db}


print("conv relative errors:", {k: f"{v:.1e}" for k, v in grad_check(forward, backward, inputs).items()})

# now a tiny network with every layer type, all the way to the sequence loss
cfg = NetworkConfig(
    (8, 8, 1),
    (
        LayerSpec("conv", 6, kernel=3, activation="maxout", pieces=3, pool_stride=2, normalize=True),
        LayerSpec("locally_connected", 2, kernel=3),
        LayerSpec("dense", 5),
    ),
    max_len=2,
    alphabet_size=3,
)
model = build(cfg, seed=1, dtype=np.float64)
x = rng.standard_normal((2, 8, 8, 1))
lengths, chars = label_arrays([SequenceLabel((1, 2)), SequenceLabel((0,))], 2)


def loss_and_grads():
    out = model.forward(x, train=True, dropout=False)
    loss, d_len, d_chr, _ = nll_loss_and_grad_batch(out.length_logits, out.char_logits, lengths, chars)
    return loss, model.backward(out.cache, d_len, d_chr)


_, grads = loss_and_grads()
print(f"\n{model.parameter_count()} parameters")
for name, p in model.params.items():
    numeric = numeric_gradient(lambda: loss_and_grads()[0], p, eps=1e-5)
    print(f"  {name:<10} {relative_error(grads[name], numeric, floor=1e-6):.1e}")
