"""
Training objectives
===================

ELBO pieces, the contrastive loss on environment embeddings and the
Jensen-Shannon mutual-information bound, on hand-checkable inputs.
"""

import numpy as np

from ggode.losses import contrastive_loss, kl_standard_normal, mi_from_scores

print("KL(N(1,1) || N(0,1)) =", kl_standard_normal([1.0], [1.0]).item())
print("contrastive, aligned positive and orthogonal negative:",
      contrastive_loss(np.array([1.0, 0.0]), np.array([3.0, 0.0]), np.array([[0.0, 1.0]]), 1.0).item())
# an uninformative critic scores 0 everywhere
print("JSD bound at zero scores:", mi_from_scores(np.zeros(4), np.zeros(4)).item(), "= -2 ln 2")
