"""
A tiny reverse-mode autodiff engine
===================================

Tensors record the operation that produced them; ``backward`` replays the
recorded graph in reverse. ``grad_check`` compares the analytic gradient with
central finite differences.
"""

import numpy as np

from scanformer import autodiff as ad

rng = np.random.default_rng(0)

# a two-layer network written directly against the primitives
x = ad.Tensor(rng.normal(size=(5, 3)))
w1 = ad.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
w2 = ad.Tensor(rng.normal(size=(8, 4)), requires_grad=True)
targets = np.array([0, 3, 1, 1, 2])

logits = ad.matmul(ad.relu(ad.matmul(x, w1)), w2)
loss = ad.cross_entropy(logits, targets)
ad.backward(loss)
print("loss", loss.item())
print("|dL/dw1|", np.linalg.norm(w1.grad), " |dL/dw2|", np.linalg.norm(w2.grad))

# the analytic gradient agrees with finite differences to ~1e-9 in float64
err = ad.grad_check(lambda w: ad.cross_entropy(ad.matmul(ad.relu(ad.matmul(x, w)), w2), targets), w1)
print("grad_check relative error on w1:", err)

# softmax with an additive bias and a -inf mask: masked positions get exactly zero weight
scores = ad.Tensor(rng.normal(size=(3, 4)))
mask = np.array([0.0, 0.0, -np.inf, 0.0])
print(np.round(ad.softmax_with_bias(scores, mask=mask).data, 3))

# a GLU convolution, the building block of the convolutional mixer
seq = ad.Tensor(rng.normal(size=(6, 4)))
kernel = ad.Tensor(rng.normal(size=(3, 4, 8)) * 0.3)
print("glu(conv1d) output shape:", ad.glu(ad.conv1d(seq, kernel, "causal")).shape)

# precision is global and switchable; float32 halves the memory traffic of training
with ad.precision("float32"):
    print("dtype inside the context:", ad.Tensor([1.0, 2.0]).data.dtype)
