"""
Reverse-mode autodiff on numpy arrays
=====================================

Every model in the package is built on a small tape-based autodiff kernel.
This walks through recording a computation, pulling gradients back, and
checking them against finite differences.
"""

import numpy as np
from progkt import numkernel as nk

rng = np.random.default_rng(0)

# leaf tensors that want gradients
W = nk.Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="W")
x = nk.Tensor(rng.normal(size=(5, 4)))
y = (rng.random(5) < 0.5).astype(float)

# a logistic model: everything inside the tape is recorded
with nk.Tape() as tape:
    h = nk.tanh(x @ W.T)
    p = nk.sigmoid(nk.sum_(h, axis=1))
    loss = nk.bce_loss(p, y)
tape.backward(loss)
print("loss", loss.item())
print("dL/dW\n", W.grad)

###############################################################################
# The analytic gradient, checked on random coordinates by central differences.

def f():
    return nk.bce_loss(nk.sigmoid(nk.sum_(nk.tanh(x @ W.T), axis=1)), y)

print("max relative error", nk.gradcheck(f, [W], rng, n_coords=12))

###############################################################################
# Masked softmax puts exact zeros on masked entries, which keeps padded
# positions out of both forward values and gradients.

s = nk.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
a = nk.softmax(s, axis=-1, mask=mask)
print(a.data.round(3))

###############################################################################
# A few steps of Adam on the logistic model.

opt = nk.Adam([W], lr=0.05)
for step in range(50):
    opt.zero_grad()
    with nk.Tape() as tape:
        loss = f()
    tape.backward(loss)
    opt.step()
    if step % 10 == 0:
        print(step, round(loss.item(), 4))
