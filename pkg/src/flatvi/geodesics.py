"""Latent geodesics as natural cubic splines minimising the decoded NB KL energy."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import torch

from .errors import DomainError, ShapeError
from .nb import nb_kl_same_theta
from .tensor_core import DTYPE, as_tensor


@lru_cache(maxsize=64)
def _second_derivative_map(n_knots: int) -> np.ndarray:
    """Linear map knot values -> knot second derivatives of the natural spline (uniform knots on [0, 1])."""
    h = 1.0 / (n_knots - 1)
    n = n_knots - 2
    out = np.zeros((n_knots, n_knots))
    if n == 0:
        return out
    rhs = np.zeros((n, n_knots))
    for i in range(n):
        rhs[i, i: i + 3] = np.array([1.0, -2.0, 1.0]) / h
    banded = np.zeros((3, n))
    banded[0, 1:] = h / 6.0
    banded[1, :] = 2.0 * h / 3.0
    banded[2, :-1] = h / 6.0
    out[1:-1] = scipy.linalg.solve_banded((1, 1), banded, rhs)
    return out


def spline_basis(n_knots: int, t) -> np.ndarray:
    """Matrix ``B`` with ``gamma(t_j) = sum_i B[j, i] y_i`` for the natural cubic spline through ``y``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("spline parameter must lie in [0, 1]")
    if n_knots < 2:
        raise ShapeError("a spline needs at least two knots")
    seg = n_knots - 1
    h = 1.0 / seg
    second = _second_derivative_map(n_knots)
    scaled = t * seg
    idx = np.minimum(np.floor(scaled).astype(int), seg - 1)
    b = scaled - idx
    a = 1.0 - b
    basis = np.zeros((t.size, n_knots))
    rows = np.arange(t.size)
    basis[rows, idx] += a
    basis[rows, idx + 1] += b
    basis += ((a**3 - a) * h * h / 6.0)[:, None] * second[idx]
    basis += ((b**3 - b) * h * h / 6.0)[:, None] * second[idx + 1]
    return basis


@dataclass
class SplinePath:
    """Natural cubic spline through ``(z0, c_1..c_K, z1)`` at uniform knots on [0, 1].

    ``z0``/``z1`` are ``(d,)`` or ``(P, d)`` and ``controls`` ``(K, d)`` or ``(P, K, d)``.
    """

    z0: torch.Tensor
    z1: torch.Tensor
    controls: torch.Tensor

    @classmethod
    def chord(cls, z0, z1, n_controls: int = 8) -> "SplinePath":
        z0, z1 = as_tensor(z0), as_tensor(z1)
        if z0.shape != z1.shape:
            raise ShapeError("endpoints must have the same shape")
        s = torch.arange(1, n_controls + 1, dtype=DTYPE) / (n_controls + 1)
        controls = z0.unsqueeze(-2) + s[:, None] * (z1 - z0).unsqueeze(-2)
        return cls(z0, z1, controls)

    @property
    def n_controls(self) -> int:
        return self.controls.shape[-2]

    def knots(self) -> torch.Tensor:
        return torch.cat([self.z0.unsqueeze(-2), self.controls, self.z1.unsqueeze(-2)], dim=-2)

    def points(self, t) -> torch.Tensor:
        basis = torch.as_tensor(spline_basis(self.n_controls + 2, t), dtype=DTYPE)
        return basis @ self.knots()

    def __call__(self, t) -> torch.Tensor:
        out = self.points(t)
        return out[..., 0, :] if np.ndim(t) == 0 else out


def spline_eval(path: SplinePath, t) -> torch.Tensor:
    return path(t)


def _decode_eval(model, pts: torch.Tensor, l) -> torch.Tensor:
    from .nbvae import decode

    was_training = model.training
    model.eval()
    try:
        return decode(model, pts, l)
    finally:
        model.train(was_training)


def kl_energy(path: SplinePath, model, l=1.0, n_steps: int = 100) -> torch.Tensor:
    """Sum over ``n_steps`` uniform steps of KL(NB(h(gamma(t_i))) || NB(h(gamma(t_{i+1})))).

    Returns a scalar for a single path or ``(P,)`` for a batch; ``l`` is a
    scalar or one size factor per path.
    """
    if n_steps < 2:
        raise DomainError("n_steps must be >= 2")
    t = np.linspace(0.0, 1.0, n_steps + 1)
    pts = path.points(t)
    batched = pts.dim() == 3
    if not batched:
        pts = pts.unsqueeze(0)
    n_paths, n_pts, d = pts.shape
    l = as_tensor(l)
    l_rep = l.expand(n_paths) if l.dim() == 0 else l
    l_rep = l_rep.repeat_interleave(n_pts)
    mu = _decode_eval(model, pts.reshape(-1, d), l_rep).reshape(n_paths, n_pts, -1)
    kl = nb_kl_same_theta(mu[:, :-1], mu[:, 1:], model.theta)
    energy = kl.sum(dim=(-1, -2))
    return energy if batched else energy[0]


def quadratic_energy(path: SplinePath, model, l=1.0, n_steps: int = 1000) -> torch.Tensor:
    """0.5 * integral of gamma'^T M(gamma) gamma' dt by the midpoint rule."""
    from .geometry import pullback_metric

    t = (np.arange(n_steps) + 0.5) / n_steps
    eps = 1e-6
    pts = path.points(t)
    vel = (path.points(np.clip(t + eps, 0, 1)) - path.points(np.clip(t - eps, 0, 1))) / (2 * eps)
    m = pullback_metric(model, pts.reshape(-1, pts.shape[-1]), l)
    v = vel.reshape(-1, vel.shape[-1])
    q = torch.einsum("bi,bij,bj->b", v, m, v)
    return 0.5 * q.mean()


@dataclass
class GeodesicOptions:
    n_controls: int = 8
    iters: int = 500
    lr: float = 1e-2
    n_steps: int = 100
    window: int = 50
    rtol: float = 1e-5
    chunk: int = 64  # paths per batch; small enough to stay cache resident


@dataclass
class GeodesicResult:
    path: SplinePath
    energy: float
    chord_energy: float
    length_kl: float
    converged: bool
    iterations: int
    trace: list[float] = field(default_factory=list)


def _optimize_chunk(z0, z1, model, l, opts: GeodesicOptions, keep_trace: bool):
    """Batched Adam on the interior controls; converged paths leave the active set.

    The update is the standard Adam rule (betas 0.9/0.999, eps 1e-8) with
    per-path moment estimates, so dropping finished paths does not change the
    trajectory of the others.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    init = SplinePath.chord(z0, z1, opts.n_controls)
    n = z0.shape[0]
    with torch.no_grad():
        chord = kl_energy(init, model, l, opts.n_steps)
    controls = init.controls.detach().clone()
    m = torch.zeros_like(controls)
    v = torch.zeros_like(controls)
    best = chord.clone()
    best_controls = controls.clone()
    history = [best.clone()]
    iters_done = torch.zeros(n, dtype=torch.long)
    converged = torch.zeros(n, dtype=torch.bool)
    active = torch.arange(n)
    for it in range(1, opts.iters + 1):
        c = controls[active].requires_grad_(True)
        energy = kl_energy(SplinePath(z0[active], z1[active], c), model, l[active], opts.n_steps)
        finite = torch.isfinite(energy)
        # energies are per path, so the gradient of the sum is per path
        grad, = torch.autograd.grad(torch.where(finite, energy, 0.0).sum(), c)
        with torch.no_grad():
            e = energy.detach()
            improved = finite & (e < best[active])
            idx = active[improved]
            best[idx] = e[improved]
            best_controls[idx] = c.detach()[improved]
            grad[~finite] = 0.0
            m[active] = beta1 * m[active] + (1 - beta1) * grad
            v[active] = beta2 * v[active] + (1 - beta2) * grad * grad
            m_hat = m[active] / (1 - beta1**it)
            v_hat = v[active] / (1 - beta2**it)
            step = c.detach() - opts.lr * m_hat / (v_hat.sqrt() + eps)
            # restart diverged paths from their best iterate
            step[~finite] = best_controls[active[~finite]]
            controls[active] = step
            history.append(best.clone())
            iters_done[active] = it
            if len(history) > opts.window:
                old = history[-opts.window - 1]
                rel = (old - best) / old.clamp(min=1e-300)
                converged |= rel < opts.rtol
            active = torch.nonzero(~converged).flatten()
            if active.numel() == 0:
                break
    trace = torch.stack(history, dim=1) if keep_trace else None
    return best_controls, best, chord, converged, iters_done, trace


def optimize_geodesics(z0, z1, model, l=1.0, opts: GeodesicOptions | None = None,
                       keep_trace: bool = False) -> list[GeodesicResult]:
    """Optimise a batch of spline geodesics between rows of ``z0`` and ``z1``.

    Each path starts on the straight chord and the best iterate is kept, so
    the returned energy never exceeds the chord energy. A path converges when
    its best energy improves by less than ``rtol`` (relative) over ``window``
    iterations.
    """
    opts = opts or GeodesicOptions()
    z0 = as_tensor(z0).detach()
    z1 = as_tensor(z1).detach()
    if z0.dim() == 1:
        z0, z1 = z0.unsqueeze(0), z1.unsqueeze(0)
    if z0.shape != z1.shape:
        raise ShapeError("endpoint batches must match")
    l = as_tensor(l)
    l_all = l.expand(z0.shape[0]) if l.dim() == 0 else l
    params = [p for p in model.parameters() if p.requires_grad]
    for p in params:
        p.requires_grad_(False)
    results: list[GeodesicResult] = []
    try:
        for start in range(0, z0.shape[0], opts.chunk):
            sl = slice(start, start + opts.chunk)
            ctrl, best, chord, conv, iters, trace = _optimize_chunk(
                z0[sl], z1[sl], model, l_all[sl], opts, keep_trace)
            for i in range(ctrl.shape[0]):
                energy = float(best[i])
                results.append(GeodesicResult(
                    path=SplinePath(z0[sl][i], z1[sl][i], ctrl[i]),
                    energy=energy,
                    chord_energy=float(chord[i]),
                    length_kl=float(np.sqrt(2.0 * energy)),
                    converged=bool(conv[i]),
                    iterations=int(iters[i]),
                    trace=trace[i].tolist() if trace is not None else [],
                ))
    finally:
        for p in params:
            p.requires_grad_(True)
    return results


def optimize_geodesic(z0, z1, model, l=1.0, opts: GeodesicOptions | None = None,
                      keep_trace: bool = False) -> GeodesicResult:
    return optimize_geodesics(z0, z1, model, l, opts, keep_trace)[0]


@dataclass
class GeodesicMatrix:
    energy: np.ndarray   # symmetrised optimised energies, hollow
    chord: np.ndarray    # symmetrised chord energies
    failed: np.ndarray   # bool, pairs where no finite optimised energy was found


def pairwise_geodesics(points, model, l=1.0, opts: GeodesicOptions | None = None) -> GeodesicMatrix:
    """Optimise geodesics for every ordered pair and symmetrise by averaging both directions."""
    pts = as_tensor(points).detach()
    n = pts.shape[0]
    if n < 2:
        raise ShapeError("need at least two points")
    ii, jj = np.where(~np.eye(n, dtype=bool))
    results = optimize_geodesics(pts[ii], pts[jj], model, l, opts)
    energy = np.zeros((n, n))
    chord = np.zeros((n, n))
    failed = np.zeros((n, n), dtype=bool)
    for i, j, r in zip(ii, jj, results):
        chord[i, j] = r.chord_energy
        if np.isfinite(r.energy):
            energy[i, j] = r.energy
        else:
            energy[i, j] = r.chord_energy
            failed[i, j] = True
    return GeodesicMatrix(
        energy=0.5 * (energy + energy.T),
        chord=0.5 * (chord + chord.T),
        failed=failed | failed.T,
    )


def geodesic_distance_matrix(points, model, l=1.0, opts: GeodesicOptions | None = None) -> np.ndarray:
    """Symmetric hollow matrix of optimised KL energies (a squared-length proxy)."""
    return pairwise_geodesics(points, model, l, opts).energy
