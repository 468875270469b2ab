# %% [markdown]
# # The four member losses
#
# Each loss works on a batch of embeddings and returns its value together with
# an analytic gradient.  Below we evaluate them on tiny hand-made batches and
# then let the finite-difference checker confirm every gradient.

# %%
import math

import numpy as np

from dmlensemble import losses as L
from dmlensemble.gradcheck import run_gradchecks
from dmlensemble.numcore import l2_normalize

# %% [markdown]
# ## Triplet hinge with semi-hard mining
# Two classes on the unit circle.  The miner picks, for each anchor/positive
# pair, the nearest negative that is still farther than the positive.

# %%
angles = np.array([0.0, 0.3, 1.4, 1.7])
emb = np.stack([np.cos(angles), np.sin(angles)], axis=1)
labels = np.array([0, 0, 1, 1])
triplets = L.mine_semi_hard(emb, labels, margin=0.1)
print("triplets (anchor, positive, negative):\n", triplets)
loss, grad = L.triplet_hinge(emb, triplets, margin=0.1)
print("triplet loss", loss)

# %% [markdown]
# ## Binomial deviance
# A negative pair at cosine 0.54 sits just above the 0.5 offset, so the
# heavily weighted negative branch gives ln(1 + e^2).

# %%
s = 0.54
pair = np.array([[1.0, 0.0], [s, math.sqrt(1 - s * s)]])
print(L.binomial_deviance(pair, np.array([[0, 1, 0]]))[0], math.log1p(math.e**2))

# %% [markdown]
# ## Proxy-NCA
# The positive proxy is left out of the denominator, so the loss goes negative
# once a sample sits on its own proxy.

# %%
for theta in (0.0, math.pi / 4, math.pi / 2):
    u = np.array([[math.cos(theta), math.sin(theta)]])
    print(f"angle {theta:.2f}: loss {L.proxy_nca(u, np.array([0]), np.eye(2))[0]:+.3f}")

# %% [markdown]
# ## Label-smoothed classification

# %%
print(L.smoothed_targets(np.array([0, 1]), 2, 0.15))

# %% [markdown]
# ## Gradient check
# Every analytic gradient in the package against central differences.

# %%
for name, err in run_gradchecks(instances=5, seed=1).items():
    print(f"{name:<22} {err:.2e}")
