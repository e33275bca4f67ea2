"""Negative binomial VAE with optional flattening regularisation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .errors import DataValidationError, DomainError, NumericError
from .nb import nb_log_pmf
from .tensor_core import DTYPE, MlpNet, as_tensor, load_into, read_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOG_THETA_BOUND = 10.0


@dataclass
class TrainConfig:
    lambda_flat: float = 0.0
    batch_size: int = 32
    max_epochs: int = 1000
    learning_rate: float = 1e-3
    kl_anneal_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    use_size_factor: bool = True
    flat_subsample: int | None = None
    random_theta_init: bool = False

    def __post_init__(self):
        if self.lambda_flat < 0:
            raise ValueError("lambda_flat must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


class NbVaeModel(nn.Module):
    """Encoder to a diagonal Gaussian posterior, softmax mean decoder, per-gene theta, flatness scale alpha."""

    def __init__(
        self,
        n_genes: int,
        latent_dim: int = 10,
        hidden: tuple[int, ...] = (256,),
        activation: str = "elu",
        batchnorm: bool = True,
        seed: int = 0,
        use_size_factor: bool = True,
    ):
        super().__init__()
        self.n_genes = int(n_genes)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.use_size_factor = bool(use_size_factor)
        self.encoder = MlpNet(
            [self.n_genes, *self.hidden, 2 * self.latent_dim],
            activation=activation, final="identity", batchnorm=batchnorm, seed=seed,
        )
        self.decoder = MlpNet(
            [self.latent_dim, *self.hidden[::-1], self.n_genes],
            activation=activation, final="softmax", batchnorm=batchnorm, seed=seed + 1,
        )
        self.log_theta = nn.Parameter(torch.zeros(self.n_genes, dtype=DTYPE))
        # softplus(log(e - 1)) == 1
        self.log_alpha_raw = nn.Parameter(torch.tensor(math.log(math.e - 1.0), dtype=DTYPE))

    @property
    def theta(self) -> torch.Tensor:
        return torch.exp(self.log_theta.clamp(-LOG_THETA_BOUND, LOG_THETA_BOUND))

    @property
    def alpha(self) -> torch.Tensor:
        return F.softplus(self.log_alpha_raw)

    def arch(self) -> dict:
        return {
            "n_genes": self.n_genes,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "activation": self.encoder.activation,
            "batchnorm": self.encoder.batchnorm,
            "use_size_factor": self.use_size_factor,
        }


def validate_counts(x) -> np.ndarray:
    """Check a count matrix: finite non-negative integers, no all-zero cells."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DataValidationError(f"count matrix must be 2-d, got shape {x.shape}")
    xf = x.astype(np.float64)
    if not np.all(np.isfinite(xf)):
        raise DataValidationError("count matrix has non-finite entries")
    if np.any(xf < 0):
        raise DataValidationError("count matrix has negative entries")
    if np.any(xf != np.round(xf)):
        raise DataValidationError("count matrix has non-integer entries")
    empty = np.flatnonzero(xf.sum(axis=1) == 0)
    if empty.size:
        raise DataValidationError(f"{empty.size} all-zero cells, first at row {empty[0]}")
    return xf


def size_factor(x):
    """Total counts per cell. Rejects cells with no counts."""
    t = as_tensor(x)
    l = t.sum(-1)
    if not bool((l > 0).all()):
        raise DataValidationError("all-zero cell has no size factor")
    return l if isinstance(x, torch.Tensor) else (float(l) if l.dim() == 0 else l.numpy())


def library_sizes(model: NbVaeModel, x: torch.Tensor) -> torch.Tensor:
    if model.use_size_factor:
        return size_factor(as_tensor(x))
    return torch.ones(x.shape[:-1], dtype=DTYPE)


def encode(model: NbVaeModel, x, generator: torch.Generator | None = None, sample: bool = True):
    """Return (z, mean_z, logvar_z). Uses the model's current train/eval mode."""
    x = as_tensor(x)
    squeeze = x.dim() == 1
    xb = x.unsqueeze(0) if squeeze else x
    out = model.encoder(torch.log1p(xb))
    mean, logvar = out[..., : model.latent_dim], out[..., model.latent_dim:]
    if not torch.isfinite(out).all():
        raise NumericError("encoder produced non-finite output")
    if sample:
        eps = torch.randn(mean.shape, generator=generator, dtype=DTYPE)
        z = mean + torch.exp(0.5 * logvar) * eps
    else:
        z = mean
    if squeeze:
        return z[0], mean[0], logvar[0]
    return z, mean, logvar


def decode(model: NbVaeModel, z, l=1.0) -> torch.Tensor:
    """mu = l * softmax(rho(z)), with the softmax floored at 1e-12."""
    z = as_tensor(z)
    l = as_tensor(l)
    if not bool((l > 0).all()):
        raise DomainError("size factor must be positive")
    squeeze = z.dim() == 1
    zb = z.unsqueeze(0) if squeeze else z
    if l.dim() == 1:
        l = l[:, None]
    mu = l * model.decoder(zb).clamp(min=geometry.SOFTMAX_FLOOR)
    return mu[0] if squeeze else mu


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-cell KL(N(mean, diag exp(logvar)) || N(0, I))."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)


def elbo(model: NbVaeModel, x, generator=None, kl_weight: float = 1.0, l=None, sample: bool = True):
    """Return (recon_nll, kl, total, z) averaged per cell for a batch of counts."""
    x = as_tensor(x)
    if x.dim() != 2 or x.shape[0] == 0:
        raise DataValidationError("batch must be a non-empty 2-d count matrix")
    if l is None:
        l = library_sizes(model, x)
    z, mean, logvar = encode(model, x, generator, sample=sample)
    mu = decode(model, z, l)
    recon = -nb_log_pmf(x, mu, model.theta).sum() / x.shape[0]
    kl = gaussian_kl(mean, logvar).mean()
    return recon, kl, recon + kl_weight * kl, z


@dataclass
class TrainResult:
    model: NbVaeModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    diverged: bool = False
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _flat_term(model, z, l, subsample, generator):
    if subsample is not None and subsample < z.shape[0]:
        pick = torch.randperm(z.shape[0], generator=generator)[:subsample]
        z, l = z[pick], l[pick]
    metrics = geometry.pullback_metric(model, z, l)
    return geometry.flattening_loss(metrics, model.alpha)


def _evaluate(model, x, l, config, generator):
    model.eval()
    with torch.enable_grad():
        recon, kl, _, z = elbo(model, x, generator, 1.0, l, sample=True)
        flat = _flat_term(model, z, l, None, generator) if config.lambda_flat > 0 else torch.zeros((), dtype=DTYPE)
    total = recon + kl + config.lambda_flat * flat
    return recon.item(), kl.item(), flat.item(), total.item()


def train(
    model: NbVaeModel,
    data,
    config: TrainConfig,
    callback=None,
) -> TrainResult:
    """Minibatch Adam on recon + w_kl * kl + lambda * flat with early stopping on validation loss.

    The KL weight ramps linearly from 0 to 1 over ``kl_anneal_epochs``; the
    validation loss always uses weight 1. On a non-finite loss, training stops
    and the best parameters seen so far are restored.
    """
    x_all = torch.as_tensor(validate_counts(data), dtype=DTYPE)
    model.use_size_factor = config.use_size_factor
    l_all = library_sizes(model, x_all)

    train_idx, val_idx = split_indices(x_all.shape[0], config.val_fraction, config.seed)
    if val_idx.size == 0:
        val_idx = train_idx
    x_tr, l_tr = x_all[train_idx], l_all[train_idx]
    x_va, l_va = x_all[val_idx], l_all[val_idx]

    gen = torch.Generator().manual_seed(int(config.seed))
    if config.random_theta_init:
        with torch.no_grad():
            model.log_theta.copy_(torch.randn(model.n_genes, generator=gen, dtype=DTYPE))

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    result = TrainResult(model, train_idx=train_idx, val_idx=val_idx)
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    n_tr = x_tr.shape[0]

    for epoch in range(config.max_epochs):
        kl_weight = min(1.0, epoch / config.kl_anneal_epochs) if config.kl_anneal_epochs > 0 else 1.0
        perm = torch.randperm(n_tr, generator=gen)
        sums = np.zeros(4)
        seen = 0
        model.train()
        diverged = False
        for start in range(0, n_tr, config.batch_size):
            idx = perm[start: start + config.batch_size]
            if idx.numel() < 2:  # batchnorm needs two samples
                continue
            xb, lb = x_tr[idx], l_tr[idx]
            try:
                recon, kl, loss, z = elbo(model, xb, gen, kl_weight, lb)
                if config.lambda_flat > 0:
                    flat = _flat_term(model, z, lb, config.flat_subsample, gen)
                    loss = loss + config.lambda_flat * flat
                else:
                    flat = torch.zeros((), dtype=DTYPE)
            except NumericError:
                loss = torch.tensor(math.nan)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            b = idx.numel()
            sums += b * np.array([recon.item(), kl.item(), flat.item(), loss.item()])
            seen += b
        if diverged:
            logger.warning("non-finite loss at epoch %d; restoring best parameters", epoch)
            result.diverged = True
            break

        try:
            val = _evaluate(model, x_va, l_va, config, gen)
        except NumericError:
            val = (math.nan,) * 4
        row = dict(zip(("recon", "kl", "flat", "total"), (sums / max(seen, 1)).tolist()))
        row.update(epoch=epoch, kl_weight=kl_weight, val_total=val[3])
        result.history.append(row)
        if callback is not None:
            callback(row)
        if not math.isfinite(val[3]):
            result.diverged = True
            break
        if val[3] < best_val:
            best_val = val[3]
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break

    model.load_state_dict(best_state)
    model.eval()
    return result


# ---------------------------------------------------------------- inference helpers


@torch.no_grad()
def latent_means(model: NbVaeModel, x) -> torch.Tensor:
    """Posterior means for a count matrix, eval mode."""
    model.eval()
    _, mean, _ = encode(model, as_tensor(x), sample=False)
    return mean


@torch.no_grad()
def reconstruct_means(model: NbVaeModel, x) -> torch.Tensor:
    """Decoded NB means at the posterior mean, using the model's size-factor convention."""
    x = as_tensor(x)
    return decode(model, latent_means(model, x), library_sizes(model, x))


def parameter_mse(model: NbVaeModel, x, mu_true, theta_true) -> tuple[float, float]:
    """(MSE of decoded means vs true means, MSE of learned vs true theta)."""
    mu_hat = reconstruct_means(model, x).numpy()
    theta_hat = model.theta.detach().numpy()
    mse_mu = float(np.mean((mu_hat - np.asarray(mu_true)) ** 2))
    mse_theta = float(np.mean((theta_hat - np.asarray(theta_true)) ** 2))
    return mse_mu, mse_theta


# ---------------------------------------------------------------- persistence


def save_model(model: NbVaeModel, directory, meta: dict | None = None) -> Path:
    nets = {"encoder": model.encoder.config(), "decoder": model.decoder.config()}
    full_meta = {"kind": "nbvae", "arch": model.arch(), **(meta or {})}
    return save_checkpoint(directory, model, nets=nets, meta=full_meta)


def load_model(directory) -> NbVaeModel:
    manifest, tensors = read_checkpoint(directory)
    arch = manifest["meta"]["arch"]
    model = NbVaeModel(
        arch["n_genes"], arch["latent_dim"], tuple(arch["hidden"]),
        activation=arch["activation"], batchnorm=arch["batchnorm"],
        use_size_factor=arch["use_size_factor"],
    )
    load_into(model, tensors)
    model.eval()
    return model


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
