"""
Kronecker-structured linear layers
==================================

A PHM layer stores n small n x n factors and n (k/n) x (d/n) blocks and
builds its weight as a sum of Kronecker products. This walk-through checks
that the layer is an ordinary affine map and counts what it saves.
"""

# %%
# Build a layer and materialise its weight.
import numpy as np

from instaprompt import autodiff as ad
from instaprompt.phm import BottleneckProjector, Dense, PhmLayer, phm_param_count

rng = np.random.default_rng(0)
layer = PhmLayer.init(d_in=16, d_out=8, n=4, rng=rng)
M = layer.materialize().data
print("weight shape", M.shape, "from", len(layer.A), "factor pairs")

# %%
# The forward pass equals a dense layer holding the materialised weight.
x = ad.constant(rng.normal(size=(3, 16)))
dense = Dense(ad.constant(M), ad.constant(layer.bias.data))
print("max |phm - dense| =", np.abs(layer(x).data - dense(x).data).max())

# %%
# Parameter count n^3 + k*d/n against k*d for the dense weight.
for n in (1, 2, 4, 5, 10):
    count = phm_param_count(n, 300, 300)
    print(f"n={n:2d}: {count:6d} parameters, {count / 90000:.4f} of dense")

# %%
# Projectors used for prompts: d -> bottleneck -> d.
phm = BottleneckProjector.init(64, 16, 4, rng)
mlp = BottleneckProjector.init(64, 16, 4, rng, mlp=True)
print("PHM projector", phm.param_count(), "parameters; dense ablation", mlp.param_count())

# %%
# Gradients reach every factor through the Kronecker sum.
loss = ad.sum(ad.relu(layer(x)))
ad.backward(loss)
print("gradient norms:", [round(float(np.linalg.norm(p.grad)), 3) for p in layer.parameters()[:4]])
