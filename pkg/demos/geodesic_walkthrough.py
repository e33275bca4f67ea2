"""
Geodesics on the statistical manifold
=====================================

A geodesic here is a natural cubic spline in latent space whose decoded NB
distributions change as little as possible, measured by summed KL
divergence between consecutive points.  When the latent metric is flat the
straight chord is already optimal, so the gap between chord and optimised
energies is a direct read-out of curvature.
"""

import numpy as np
import torch

from flatvi.geodesics import GeodesicOptions, optimize_geodesics, pairwise_geodesics
from flatvi.metrics import euclidean_distances, knn_overlap
from flatvi.nbvae import NbVaeModel, TrainConfig, latent_means, train
from flatvi.simulate import simulate

torch.set_num_threads(1)

data = simulate(n=600, g=10, seed=1)
model = NbVaeModel(10, latent_dim=2, seed=1, use_size_factor=False)
train(model, data.X, TrainConfig(max_epochs=100, seed=1, use_size_factor=False))
model.eval()
z = latent_means(model, data.X)

# %%
# A handful of endpoint pairs, each optimised from the straight chord.
# The best iterate is kept, so the optimised energy never exceeds the chord.

rng = np.random.default_rng(1)
pairs = np.array([rng.choice(len(z), 2, replace=False) for _ in range(5)])
results = optimize_geodesics(z[pairs[:, 0]], z[pairs[:, 1]], model, 1.0, keep_trace=True)
for (i, j), r in zip(pairs, results):
    print(f"cells {i:>3} -> {j:>3}: chord {r.chord_energy:.5f}  geodesic {r.energy:.5f}  "
          f"gap {(r.chord_energy - r.energy) / r.chord_energy:.2%}  iterations {r.iterations}")

# midpoint of the first path versus the chord midpoint
first = results[0]
print("spline midpoint", first.path(0.5).numpy(), "chord midpoint", ((first.path.z0 + first.path.z1) / 2).numpy())

# %%
# Neighbourhood agreement: do Euclidean latent distances rank neighbours the
# same way as geodesic energies?  Twenty points keep this quick.

pts = z[rng.choice(len(z), 20, replace=False)]
g = pairwise_geodesics(pts, model, 1.0, GeodesicOptions(iters=200))
print("3-NN overlap, Euclidean vs geodesic:", knn_overlap(euclidean_distances(pts.numpy()), g.energy, 3))
