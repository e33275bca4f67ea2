"""Pullback Fisher metric of the NB decoder, the flattening loss, and metric diagnostics.

The torch functions here take any model exposing ``decoder`` (an
:class:`~flatvi.tensor_core.MlpNet` with softmax output) and ``theta`` (per-gene
inverse dispersion); they stay differentiable so the flattening loss can be
trained through them. The diagnostics operate on numpy arrays.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import torch

from .errors import DomainError, ShapeError
from .tensor_core import as_tensor

SOFTMAX_FLOOR = 1e-12


def _decoder_jacobian(model, z: torch.Tensor, l: torch.Tensor):
    """Decoded means h(z) = l softmax(rho(z)) and their Jacobian (B, G, d), eval-mode batchnorm."""
    d = z.shape[-1]
    eye = torch.eye(d, dtype=z.dtype).expand(z.shape[0], d, d)
    s, ts = model.decoder.jvp(z, eye)
    floor = s.clamp(min=SOFTMAX_FLOOR)
    h = l[:, None] * floor
    jac = l[:, None, None] * ts.transpose(-1, -2)
    return h, jac


def _batched(z, l):
    z = as_tensor(z)
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    l = as_tensor(l)
    if l.dim() == 0:
        l = l.expand(z.shape[0])
    if l.shape != (z.shape[0],):
        raise ShapeError(f"size factors {tuple(l.shape)} do not match {z.shape[0]} latent points")
    if not bool((l > 0).all()):
        raise DomainError("size factor must be positive")
    return z, l, squeeze


def pullback_metric(model, z, l=1.0) -> torch.Tensor:
    """Fisher pullback metric J^T diag(w) J with w_g = theta_g / (h_g (h_g + theta_g)).

    ``z`` is ``(d,)`` or ``(B, d)``; returns ``(d, d)`` or ``(B, d, d)``.
    Assembly is O(G d^2) per point; the G x G Fisher matrix is never formed.
    """
    z, l, squeeze = _batched(z, l)
    h, jac = _decoder_jacobian(model, z, l)
    theta = model.theta
    w = theta / (h * (h + theta))
    m = torch.einsum("bgi,bg,bgj->bij", jac, w, jac)
    m = 0.5 * (m + m.transpose(-1, -2))
    return m.squeeze(0) if squeeze else m


def pullback_metric_outer(model, z, l=1.0) -> torch.Tensor:
    """Same metric assembled as sum_g w_g grad h_g (x) grad h_g, one gene at a time."""
    z, l, squeeze = _batched(z, l)
    h, jac = _decoder_jacobian(model, z, l)
    theta = model.theta
    m = torch.zeros(z.shape[0], z.shape[1], z.shape[1], dtype=z.dtype)
    for g in range(h.shape[1]):
        grad = jac[:, g, :]
        wg = theta[g] / (h[:, g] * (h[:, g] + theta[g]))
        m = m + wg[:, None, None] * grad[:, :, None] * grad[:, None, :]
    return m.squeeze(0) if squeeze else m


def flattening_loss(metrics, alpha) -> torch.Tensor:
    """Batch mean of ||M(z) - alpha I||_F^2 (no division by d^2)."""
    m = as_tensor(metrics)
    if m.dim() == 2:
        m = m.unsqueeze(0)
    if m.dim() != 3 or m.shape[-1] != m.shape[-2] or m.shape[0] == 0:
        raise ShapeError(f"expected a non-empty batch of square metrics, got {tuple(m.shape)}")
    alpha = as_tensor(alpha)
    eye = torch.eye(m.shape[-1], dtype=m.dtype)
    return ((m - alpha * eye) ** 2).sum(dim=(-1, -2)).mean()


# ---------------------------------------------------------------- diagnostics


def _np_metric(m) -> np.ndarray:
    if isinstance(m, torch.Tensor):
        m = m.detach().numpy()
    return np.asarray(m, dtype=np.float64)


def eigenvalues(m) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix or a stack of them."""
    m = _np_metric(m)
    return np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))


def condition_number(m) -> float | np.ndarray:
    """Largest over smallest eigenvalue; ``inf`` when the smallest is <= 1e-12 * trace."""
    ev = eigenvalues(m)
    top, bottom = ev[..., -1], ev[..., 0]
    trace = ev.sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cn = np.where(bottom > 1e-12 * np.abs(trace), top / bottom, np.inf)
    return float(cn) if np.ndim(cn) == 0 else cn


def _clamped_spd(m: np.ndarray) -> np.ndarray:
    """Lift eigenvalues below 1e-12 * trace (reporting only, never used in training)."""
    ev, vec = np.linalg.eigh(0.5 * (m + m.T))
    floor = 1e-12 * max(abs(ev.sum()), np.finfo(float).tiny)
    if ev[0] >= floor:
        return m
    ev = np.maximum(ev, floor)
    return (vec * ev) @ vec.T


def affine_invariant_distance(a, b) -> float:
    """sqrt(sum_i log^2 S_i(B^-1 A)) via the generalized symmetric eigenproblem."""
    a, b = _np_metric(a), _np_metric(b)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"incompatible metric shapes {a.shape} and {b.shape}")
    a = 0.5 * (a + a.T)
    b = 0.5 * (b + b.T)
    try:
        s = scipy.linalg.eigh(a, b, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise DomainError("B must be positive definite") from exc
    if np.any(s <= 0):
        raise DomainError("A must be positive definite")
    return float(np.sqrt(np.sum(np.log(s) ** 2)))


def vor_terms(metrics, clamp: bool = True) -> np.ndarray:
    """Per-point squared affine-invariant distances to the arithmetic mean metric."""
    ms = _np_metric(metrics)
    if ms.ndim != 3 or ms.shape[0] < 2:
        raise ShapeError("VoR needs a batch of at least two metrics")
    if clamp:
        ms = np.stack([_clamped_spd(m) for m in ms])
    mean = ms.mean(axis=0)
    return np.array([affine_invariant_distance(m, mean) ** 2 for m in ms])


def vor(metrics, clamp: bool = True) -> float:
    """Variance of the Riemannian metric around its batch mean."""
    return float(vor_terms(metrics, clamp=clamp).mean())


def metric_report(metrics) -> dict[str, np.ndarray]:
    """Per-point CN, VoR contribution, trace and extreme eigenvalues."""
    ms = _np_metric(metrics)
    ev = eigenvalues(ms)
    return {
        "cn": np.atleast_1d(condition_number(ms)),
        "vor": vor_terms(ms),
        "trace": ev.sum(-1),
        "min_eig": ev[:, 0],
        "max_eig": ev[:, -1],
    }
