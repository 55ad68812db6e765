"""
Reverse-mode autodiff on numpy arrays
=====================================

The model is trained with a small tape-based autodiff built into
``ggode.tensor``. This script differentiates a two-layer MLP and checks
the result against central finite differences.
"""

import numpy as np

from ggode.tensor import Mlp2, Rng, Tensor, grad_check_many

rng = Rng(0)
mlp = Mlp2.init(3, 8, 2, rng)
x = Tensor(rng.normal((5, 3)))

# forward, then backward from a scalar
loss = (mlp(x) ** 2).sum()
loss.backward()
print("loss:", loss.item())
print("dL/dW1 shape:", mlp.w1.grad.shape)

# every parameter coordinate against finite differences
err = grad_check_many(lambda: (mlp(x) ** 2).sum(), mlp.parameters())
print(f"max relative error vs finite differences: {err:.2e}")
