"""
Stochastic codebook quantisation
================================

Each continuous prompt is replaced by the average of M codes drawn from a
softmax over negative squared distances. Temperature sets how sharp the
draw is; the codebook itself follows the prompts by an exponential moving
average rather than by gradients.
"""

# %%
# A four-code book in the plane and one prompt close to code 2.
import numpy as np

from instaprompt.rng import stream
from instaprompt.vq import Codebook, distances_and_logits, ema_update, quantize, softmax

E = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
p_c = np.array([[0.1, 0.9]])

# %%
# Lower temperature concentrates the draw on the nearest code.
for tau in (10.0, 1.0, 0.1, 1e-6):
    cb = Codebook(E.copy(), np.ones(4), tau=tau, samples=10)
    _, logits = distances_and_logits(cb, p_c)
    print(f"tau={tau:g}: probabilities {np.round(softmax(logits)[0], 3)}")

# %%
# The quantised prompt averages M draws, so it lies inside the codes' hull.
cb = Codebook(E.copy(), np.ones(4), tau=1.0, samples=10)
p_q, idx = quantize(cb, p_c, stream(0, "demo"))
print("draws", idx[0], "-> p_q", p_q[0])

# %%
# EMA: counts move first, then each code moves to the running mean of the
# prompts that drew it. alpha = 0 jumps straight to the batch mean.
cb = Codebook(E.copy(), np.ones(4), alpha=0.0)
batch = np.array([[0.2, 0.8], [0.0, 1.2]])
ema_update(cb, batch, np.full((2, 10), 2))
print("code 2 after alpha=0 update:", cb.E[2], "batch mean:", batch.mean(axis=0))
print("untouched codes keep the count floor:", cb.counts)
