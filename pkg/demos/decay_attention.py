"""
Exponential-decay attention
===========================

Attention over past hidden states, with older steps pushed down by an
exponential forgetting term. Two readings of the decay are available:
``shift`` (default) subtracts lambda * D from the similarity logits, while
``scale`` multiplies the logits by exp(-lambda * D).
"""

import numpy as np
from progkt import dsm
from progkt import numkernel as nk

np.set_printoptions(precision=3, suppress=True)

t = 8                               # predicting step 8 from steps 1..7
D = dsm.step_differences(t)
print("step distances", D)

rng = np.random.default_rng(4)
s = nk.Tensor(rng.uniform(-1, 1, size=(1, t - 1)))     # query-state similarity scores
print("similarities  ", s.data[0])

for lam in (0.0, 0.3, 0.6, 1.0, 30.0):
    on = dsm.decay_attention(s, lam, True).data[0]
    off = dsm.decay_attention(s, lam, False).data[0]
    print(f"lambda={lam:5.1f}  with similarity {on}  decay only {off}")

###############################################################################
# At lambda=0 the attention is plain softmax over similarities; as lambda
# grows both modes put all the weight on the latest step, so a model trained
# at lambda=30 predicts the same thing with or without similarity scores.

a = dsm.decay_attention(s, 30.0, True).data[0]
b = dsm.decay_attention(s, 30.0, False).data[0]
print("max difference at lambda=30:", np.abs(a - b).max())

###############################################################################
# The multiplicative form behaves differently: old logits shrink towards 0
# instead of towards -inf, so old steps keep a share of the weight.

print("scale form, lambda=30:", dsm.decay_attention(s, 30.0, False, form="scale").data[0])
print("scale form, [1, 1], lambda=0.6:",
      dsm.decay_attention(nk.Tensor([[1.0, 1.0]]), 0.6, True, form="scale").data[0])
