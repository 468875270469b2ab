# %% [markdown]
# # Compressing a WEDL ensemble
#
# The ensemble distance is a weighted sum over heads, which equals a plain
# squared distance on the sqrt(w)-scaled concatenation.  A tanh regressor then
# learns to keep that geometry in a single e-dimensional vector.

# %%
import numpy as np

from dmlensemble.compressor import (
    compressed_embeddings,
    concat_weighted,
    normalized_distance_matrix,
    distance_loss,
    train_compressor,
)
from dmlensemble.ensemble import EnsembleModel, TrainConfig, ensemble_distance, train
from dmlensemble.evalkit import DistanceSource, evaluate
from dmlensemble.featstore import synth_gaussians, zsl_split

split = zsl_split(synth_gaussians(16, 40, 16, 4.0, "tanh-mix", np.random.default_rng(3)))
model = EnsembleModel("WEDL", 16, 8, split.train.class_count, rng=np.random.default_rng(4),
                      base_lr=1e-3)
train(model, split.train, TrainConfig(epochs=8, lr=1e-3), np.random.default_rng(5))

# %% [markdown]
# ## The concatenation identity

# %%
U = model.per_head_embeddings(split.test.features[:2])
w = model.weights()
a, b = concat_weighted(U[:, 0], w), concat_weighted(U[:, 1], w)
print(np.sum((a - b) ** 2), ensemble_distance(U[:, 0], U[:, 1], w))

# %% [markdown]
# ## Fitting the regressor

# %%
reg, history = train_compressor(model, split.train, epochs=30, rng=np.random.default_rng(6))
print("l_dist per epoch:", np.round(history[::5], 8))

X = split.test.features
K = normalized_distance_matrix(concat_weighted(model.per_head_embeddings(X), w))
K2 = normalized_distance_matrix(compressed_embeddings(model, reg, X))
print("held-out l_dist", distance_loss(K, K2)[0])

full = evaluate(model.distance_source(X), split.test.labels)
small = evaluate(DistanceSource.from_embedding(compressed_embeddings(model, reg, X)),
                 split.test.labels)
print(f"ensemble  ({len(w) * 8} dims) R@1 {full.recall[1]:.3f}")
print(f"compressed ({8} dims)  R@1 {small.recall[1]:.3f}")
