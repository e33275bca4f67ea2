"""Optimal-transport conditional flow matching on latent states ``s = [z, log l]``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError
from .metrics import ot_coupling
from .tensor_core import DTYPE, MlpNet, as_tensor

logger = logging.getLogger(__name__)


@dataclass
class Snapshot:
    t_index: int
    states: np.ndarray  # (n, d + 1)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or not np.all(np.isfinite(self.states)):
            raise ShapeError("snapshot states must be a finite 2-d array")


class VelocityField(MlpNet):
    """MLP v(t, s) on the concatenation ``[s, t]``."""

    def __init__(self, state_dim: int, hidden: int = 64, n_hidden: int = 3,
                 activation: str = "selu", seed: int = 0):
        super().__init__([state_dim + 1, *([hidden] * n_hidden), state_dim],
                         activation=activation, final="identity", batchnorm=False, seed=seed)
        self.state_dim = state_dim

    def velocity(self, t, s) -> torch.Tensor:
        s = as_tensor(s)
        t = as_tensor(t)
        if t.dim() == 0:
            t = t.expand(s.shape[:-1])
        return self(torch.cat([s, t.unsqueeze(-1)], dim=-1))


@dataclass
class CfmConfig:
    sigma: float = 0.1
    batch_size: int = 256
    epochs: int = 2000
    learning_rate: float = 1e-3
    hidden: int = 64
    n_hidden: int = 3
    seed: int = 0


def cfm_sample(s0, s1, t, sigma: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw from N((1 - t) s0 + t s1, sigma^2 I); ``t`` broadcasts over rows."""
    s0, s1, t = as_tensor(s0), as_tensor(s1), as_tensor(t)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if t.dim() == 1 and s0.dim() == 2:
        t = t[:, None]
    mean = (1.0 - t) * s0 + t * s1
    if sigma == 0:
        return mean
    return mean + sigma * torch.randn(mean.shape, generator=generator, dtype=DTYPE)


def cfm_loss(field: VelocityField, s0, s1, t, sigma: float, t_start: float = 0.0,
             t_span: float = 1.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over rows of ||v(t_start + t t_span, s_t) - (s1 - s0) / t_span||^2.

    With unit spacing between snapshots this is the plain OT-CFM regression
    target ``s1 - s0`` at time ``t + t_start``.
    """
    s0, s1, t = as_tensor(s0), as_tensor(s1), as_tensor(t)
    st = cfm_sample(s0, s1, t, sigma, generator)
    target = (s1 - s0) / t_span
    pred = field.velocity(t_start + t * t_span, st)
    return ((pred - target) ** 2).sum(-1).mean()


def _batch(states: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    n = states.shape[0]
    if n < size:
        return states[rng.choice(n, size, replace=True)]
    return states[rng.choice(n, size, replace=False)]


@dataclass
class CfmResult:
    field: VelocityField
    losses: list[float] = field(default_factory=list)


def train_otcfm(snapshots: list[Snapshot], config: CfmConfig | None = None) -> CfmResult:
    """Fit a velocity field by OT-coupled flow matching over consecutive snapshots.

    Each epoch draws one equal-size batch per consecutive pair, couples it
    exactly, and takes a single optimiser step on the pooled loss. Times are
    the snapshots' ``t_index`` values, so a held-out index simply widens the
    interval between its neighbours.
    """
    config = config or CfmConfig()
    if len(snapshots) < 2:
        raise ConfigError("need at least two snapshots")
    times = [s.t_index for s in snapshots]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("snapshots must be sorted by strictly increasing t_index")
    dim = snapshots[0].states.shape[1]
    if any(s.states.shape[1] != dim for s in snapshots):
        raise ShapeError("snapshots disagree on state dimension")
    for s in snapshots:
        if s.states.shape[0] < config.batch_size:
            logger.warning("snapshot t=%d has %d cells < batch %d; sampling with replacement",
                           s.t_index, s.states.shape[0], config.batch_size)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(int(config.seed))
    field_net = VelocityField(dim, config.hidden, config.n_hidden, seed=config.seed)
    opt = torch.optim.Adam(field_net.parameters(), lr=config.learning_rate)
    result = CfmResult(field_net)
    field_net.train()
    for _ in range(config.epochs):
        preds, targets = [], []
        for a, b in zip(snapshots, snapshots[1:]):
            s0 = _batch(a.states, config.batch_size, rng)
            s1 = _batch(b.states, config.batch_size, rng)
            s1 = s1[ot_coupling(s0, s1).perm]
            span = float(b.t_index - a.t_index)
            s0t, s1t = torch.from_numpy(s0), torch.from_numpy(s1)
            t = torch.rand(s0.shape[0], generator=gen, dtype=DTYPE)
            st = cfm_sample(s0t, s1t, t, config.sigma, gen)
            preds.append(field_net.velocity(a.t_index + t * span, st))
            targets.append((s1t - s0t) / span)
        loss = ((torch.cat(preds) - torch.cat(targets)) ** 2).sum(-1).mean()
        if not torch.isfinite(loss):
            raise NumericError("flow matching loss became non-finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
    field_net.eval()
    return result


def integrate(field, s_start, t_start: float, t_end: float, n_steps: int) -> torch.Tensor:
    """Fixed-step RK4 from ``t_start`` to ``t_end``; returns all ``n_steps + 1`` states.

    ``field`` is a :class:`VelocityField` or any callable ``(t, s) -> ds/dt``.
    On a non-finite state the path computed so far is returned with a
    :class:`NumericError` attached as ``partial``.
    """
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    f = field.velocity if isinstance(field, VelocityField) else field
    s = as_tensor(s_start).detach()
    dt = (t_end - t_start) / n_steps
    out = [s]
    with torch.no_grad():
        for i in range(n_steps):
            t = t_start + i * dt
            k1 = f(t, s)
            k2 = f(t + dt / 2, s + dt / 2 * k1)
            k3 = f(t + dt / 2, s + dt / 2 * k2)
            k4 = f(t + dt, s + dt * k3)
            s = s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not torch.isfinite(s).all():
                err = NumericError(f"non-finite state at step {i + 1}")
                err.partial = torch.stack(out)
                raise err
            out.append(s)
    return torch.stack(out)


def decode_trajectory(model, path, sample: bool = False, rng: np.random.Generator | None = None):
    """Split states into ``(z, log l)`` and decode NB means per step.

    Returns ``(mu, l)`` and, with ``sample=True``, NB count draws as a third element.
    """
    from .nb import nb_sample
    from .nbvae import decode

    path = as_tensor(path)
    if path.shape[-1] != model.latent_dim + 1:
        raise ConfigError(f"states have width {path.shape[-1]}, model expects {model.latent_dim + 1}")
    z, log_l = path[..., :-1], path[..., -1]
    l = torch.exp(log_l)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        mu = decode(model, z.reshape(-1, z.shape[-1]), l.reshape(-1)).reshape(*z.shape[:-1], -1)
    model.train(was_training)
    if not sample:
        return mu, l
    rng = rng or np.random.default_rng(0)
    theta = model.theta.detach().numpy()
    counts = nb_sample(mu.numpy(), np.broadcast_to(theta, mu.shape), rng)
    return mu, l, counts
