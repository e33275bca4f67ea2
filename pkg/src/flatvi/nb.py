"""Negative binomial distribution in the (mean, inverse dispersion) parameterisation.

All functions accept scalars, numpy arrays or torch tensors and broadcast.
Torch inputs stay on the autograd graph; anything else is returned as numpy.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError

COUNT_CAP = 2**31 - 1


def _prep(*args):
    use_torch = any(isinstance(a, torch.Tensor) for a in args)
    out = [a.to(torch.float64) if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
           for a in args]
    return use_torch, out


def _finish(use_torch: bool, value: torch.Tensor):
    if use_torch:
        return value
    arr = value.detach().numpy()
    return float(arr) if arr.ndim == 0 else arr


def _require_positive(**named):
    for name, t in named.items():
        with torch.no_grad():
            if not bool((t > 0).all()):
                raise DomainError(f"{name} must be strictly positive")


def nb_log_pmf(x, mu, theta):
    """log NB(x | mu, theta) computed through log-gamma."""
    use_torch, (x, mu, theta) = _prep(x, mu, theta)
    _require_positive(mu=mu, theta=theta)
    with torch.no_grad():
        if not bool((x >= 0).all()):
            raise DomainError("counts must be non-negative")
    log_theta_mu = torch.log(theta + mu)
    value = (
        torch.lgamma(theta + x) - torch.lgamma(x + 1.0) - torch.lgamma(theta)
        + theta * (torch.log(theta) - log_theta_mu)
        + x * (torch.log(mu) - log_theta_mu)
    )
    return _finish(use_torch, value)


def nb_fisher_mu(mu, theta):
    """Fisher information of NB(mu, theta) with respect to mu: theta / (mu (mu + theta))."""
    use_torch, (mu, theta) = _prep(mu, theta)
    _require_positive(mu=mu, theta=theta)
    return _finish(use_torch, theta / (mu * (mu + theta)))


def nb_kl_same_theta(mu1, mu2, theta):
    """KL(NB(mu1, theta) || NB(mu2, theta)) in closed form."""
    use_torch, (mu1, mu2, theta) = _prep(mu1, mu2, theta)
    _require_positive(mu1=mu1, mu2=mu2, theta=theta)
    # mu1 log(mu1/mu2) + (theta+mu1) log((theta+mu2)/(theta+mu1)), in log1p form
    diff = mu1 - mu2
    value = mu1 * torch.log1p(diff / mu2) - (theta + mu1) * torch.log1p(diff / (theta + mu2))
    # cancellation can leave tiny negatives when mu1 ~ mu2
    return _finish(use_torch, torch.clamp(value, min=0.0))


def nb_sample(mu, theta, rng: np.random.Generator, size=None) -> np.ndarray:
    """Gamma-Poisson draw: lambda ~ Gamma(theta, scale=mu/theta), x ~ Poisson(lambda)."""
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if not (np.all(mu > 0) and np.all(theta > 0)):
        raise DomainError("mu and theta must be strictly positive")
    rate = rng.gamma(shape=theta, scale=mu / theta, size=size)
    if np.any(rate > COUNT_CAP):
        raise OverflowError("NB draw exceeds the int32 count cap")
    x = rng.poisson(rate)
    if np.any(x > COUNT_CAP):
        raise OverflowError("NB draw exceeds the int32 count cap")
    return x.astype(np.int64)
