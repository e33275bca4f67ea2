"""
Flattening the latent geometry of an NB-VAE
===========================================

Train two small negative binomial VAEs on simulated counts, one plain and
one with the flattening penalty, and compare how uniform their Fisher
pullback metrics are across the latent space.

Run with ``python demos/flattening_walkthrough.py``; it takes a minute or two.
"""

import numpy as np
import torch

from flatvi import geometry
from flatvi.nbvae import NbVaeModel, TrainConfig, latent_means, parameter_mse, train
from flatvi.simulate import simulate

torch.set_num_threads(1)

# 1000 cells, 10 genes, three classes with log-mean centres -1, 0 and 1
data = simulate(n=1000, g=10, seed=0)
print("counts", data.X.shape, "mean library size", data.X.sum(1).mean())

# %%
# Two models that differ only in the weight of the flattening term.
# A short epoch cap keeps the demo fast; the acceptance suite trains to
# convergence.

models = {}
for lam in (0.0, 10.0):
    model = NbVaeModel(10, latent_dim=2, seed=0, use_size_factor=False)
    result = train(model, data.X, TrainConfig(lambda_flat=lam, max_epochs=150, use_size_factor=False))
    model.eval()
    models[lam] = model
    print(f"lambda={lam:>4}: {len(result.history)} epochs, final validation loss "
          f"{result.history[-1]['val_total']:.3f}, alpha={model.alpha.item():.3f}")

# %%
# Metric diagnostics on 256 encoded cells.  VoR is zero for a metric that is
# the same everywhere; the condition number is one for a scaled identity.

idx = np.random.default_rng(0).choice(1000, 256, replace=False)
for lam, model in models.items():
    z = latent_means(model, data.X)[idx]
    metrics = geometry.pullback_metric(model, z, 1.0).detach()
    cn = geometry.condition_number(metrics)
    mse_mu, mse_theta = parameter_mse(model, data.X, data.mu_true, data.theta_true)
    print(f"lambda={lam:>4}: VoR {geometry.vor(metrics):.4f}  mean CN {np.mean(cn):.3f}  "
          f"MSE(theta) {mse_theta:.2f}")
