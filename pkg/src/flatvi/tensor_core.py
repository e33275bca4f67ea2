"""Small feed-forward networks with forward, reverse-mode and forward-mode derivatives.

Reverse-mode gradients come from torch autograd. Forward-mode Jacobian-vector
products are propagated explicitly layer by layer, so the tangents themselves
remain differentiable with respect to the network parameters (the flattening
loss needs gradients of decoder Jacobians).

All tensors are float64.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError, TapeError

DTYPE = torch.float64
FORMAT_VERSION = "1"

HIDDEN_ACTIVATIONS = ("elu", "selu", "relu", "identity")
FINAL_ACTIVATIONS = ("identity", "softmax")

_SELU_ALPHA = 1.6732632423543772848170429916717
_SELU_SCALE = 1.0507009873554804934193349852946


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _activate(name: str, pre: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (activation(pre), elementwise derivative at pre)."""
    if name == "elu":
        neg = torch.exp(torch.clamp(pre, max=0.0))
        return torch.where(pre > 0, pre, neg - 1.0), torch.where(pre > 0, torch.ones_like(pre), neg)
    if name == "selu":
        neg = torch.exp(torch.clamp(pre, max=0.0))
        out = _SELU_SCALE * torch.where(pre > 0, pre, _SELU_ALPHA * (neg - 1.0))
        der = _SELU_SCALE * torch.where(pre > 0, torch.ones_like(pre), _SELU_ALPHA * neg)
        return out, der
    if name == "relu":
        return torch.relu(pre), (pre > 0).to(pre.dtype)
    if name == "identity":
        return pre, torch.ones_like(pre)
    raise ValueError(f"unknown activation {name!r}")


_ACTIVATION_FN = {
    "elu": F.elu,
    "selu": F.selu,
    "relu": F.relu,
    "identity": lambda x: x,
}


class MlpNet(nn.Module):
    """Fully connected network ``layer_dims[0] -> ... -> layer_dims[-1]``.

    Hidden layers apply ``Linear -> [BatchNorm] -> activation``; the last layer
    applies ``Linear -> final`` where ``final`` is ``"identity"`` or ``"softmax"``.
    Weights are initialised uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from ``seed``.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        activation: str = "elu",
        final: str = "identity",
        batchnorm: bool = False,
        momentum: float = 0.1,
        eps: float = 1e-5,
        seed: int = 0,
    ):
        super().__init__()
        if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
            raise ShapeError(f"invalid layer_dims {list(layer_dims)}")
        if activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if final not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {final!r}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.activation = activation
        self.final = final
        self.batchnorm = bool(batchnorm)
        self.momentum = float(momentum)
        self.eps = float(eps)

        gen = torch.Generator().manual_seed(int(seed))
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = (torch.rand(fan_out, fan_in, generator=gen, dtype=DTYPE) * 2 - 1) * bound
            b = (torch.rand(fan_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))

        self.bn_gamma = nn.ParameterList()
        self.bn_beta = nn.ParameterList()
        if self.batchnorm:
            for i, width in enumerate(self.layer_dims[1:-1]):
                self.bn_gamma.append(nn.Parameter(torch.ones(width, dtype=DTYPE)))
                self.bn_beta.append(nn.Parameter(torch.zeros(width, dtype=DTYPE)))
                self.register_buffer(f"running_mean_{i}", torch.zeros(width, dtype=DTYPE))
                self.register_buffer(f"running_var_{i}", torch.ones(width, dtype=DTYPE))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def config(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "final": self.final,
            "batchnorm": self.batchnorm,
            "momentum": self.momentum,
            "eps": self.eps,
        }

    @classmethod
    def from_config(cls, cfg: Mapping) -> "MlpNet":
        return cls(
            cfg["layer_dims"],
            activation=cfg["activation"],
            final=cfg["final"],
            batchnorm=cfg["batchnorm"],
            momentum=cfg.get("momentum", 0.1),
            eps=cfg.get("eps", 1e-5),
        )

    def _running(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        return getattr(self, f"running_mean_{i}"), getattr(self, f"running_var_{i}")

    def _check_input(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x)
        self._check_input(x)
        squeeze = x.dim() == 1
        h = x.unsqueeze(0) if squeeze else x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            if i < last and self.batchnorm and not self.training:
                # fold running statistics into the affine map
                rm, rv = self._running(i)
                scale = self.bn_gamma[i] / torch.sqrt(rv + self.eps)
                w = self.weights[i] * scale[:, None]
                b = (self.biases[i] - rm) * scale + self.bn_beta[i]
                h = _ACTIVATION_FN[self.activation](F.linear(h, w, b))
                continue
            h = F.linear(h, self.weights[i], self.biases[i])
            if i < last:
                if self.batchnorm:
                    rm, rv = self._running(i)
                    h = F.batch_norm(
                        h, rm, rv, self.bn_gamma[i], self.bn_beta[i],
                        training=self.training, momentum=self.momentum, eps=self.eps,
                    )
                h = _ACTIVATION_FN[self.activation](h)
            elif self.final == "softmax":
                h = torch.softmax(h, dim=-1)  # max-shifted internally
        return h.squeeze(0) if squeeze else h

    def jvp(self, z: torch.Tensor, tangents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward-mode tangent propagation in eval mode.

        ``z`` has shape ``(B, in)`` and ``tangents`` ``(B, k, in)``; returns the
        primal output ``(B, out)`` and the pushed tangents ``(B, k, out)``.
        Batchnorm always uses running statistics here.
        """
        h, t = z, tangents
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w = self.weights[i]
            h = F.linear(h, w, self.biases[i])
            t = t @ w.T
            if i < last:
                if self.batchnorm:
                    rm, rv = self._running(i)
                    scale = self.bn_gamma[i] / torch.sqrt(rv + self.eps)
                    h = (h - rm) * scale + self.bn_beta[i]
                    t = t * scale
                h, der = _activate(self.activation, h)
                t = t * der.unsqueeze(-2)
            elif self.final == "softmax":
                h = torch.softmax(h, dim=-1)
                s = h.unsqueeze(-2)
                t = s * (t - (s * t).sum(-1, keepdim=True))
        return h, t


def forward(net: MlpNet, x, mode: str = "eval") -> torch.Tensor:
    """Evaluate ``net`` on ``x``. Train mode uses batch statistics and updates running ones."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = net.training
    net.train(mode == "train")
    try:
        return net(as_tensor(x))
    finally:
        net.train(was_training)


@dataclass
class Tape:
    """Primal record of one forward call, consumed by :func:`backward`."""

    input: torch.Tensor
    output: torch.Tensor
    param_shapes: dict[str, tuple[int, ...]]
    param_versions: dict[str, int] = field(default_factory=dict)


@dataclass
class Gradients:
    params: dict[str, torch.Tensor]
    input: torch.Tensor


def record(net: MlpNet, x, mode: str = "eval") -> Tape:
    """Run :func:`forward` while keeping what the backward pass needs."""
    x = as_tensor(x).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        out = forward(net, x, mode)
    params = dict(net.named_parameters())
    return Tape(
        input=x,
        output=out,
        param_shapes={k: tuple(p.shape) for k, p in params.items()},
        param_versions={k: p._version for k, p in params.items()},
    )


def backward(net: MlpNet, tape: Tape, output_grad) -> Gradients:
    """Vector-Jacobian products of the recorded output with respect to parameters and input."""
    params = dict(net.named_parameters())
    shapes = {k: tuple(p.shape) for k, p in params.items()}
    if shapes != tape.param_shapes:
        raise TapeError("network parameters changed shape since the tape was recorded")
    if any(params[k]._version != v for k, v in tape.param_versions.items()):
        raise TapeError("network parameters were modified since the tape was recorded")
    g = as_tensor(output_grad)
    if g.shape != tape.output.shape:
        raise ShapeError(f"output_grad shape {tuple(g.shape)} != output {tuple(tape.output.shape)}")
    names = list(params)
    grads = torch.autograd.grad(
        tape.output, [params[k] for k in names] + [tape.input], g,
        retain_graph=True, allow_unused=True,
    )
    out = {}
    for k, gr in zip(names, grads[:-1]):
        out[k] = torch.zeros_like(params[k]) if gr is None else gr.detach()
    gin = grads[-1]
    return Gradients(out, torch.zeros_like(tape.input) if gin is None else gin.detach())


def _check_finite(t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError("non-finite value in forward-mode propagation")
    return t


def jvp(net: MlpNet, z, v) -> torch.Tensor:
    """J_net(z) @ v for a single point or a batch of points (eval mode)."""
    z, v = as_tensor(z), as_tensor(v)
    net._check_input(z)
    if z.shape != v.shape:
        raise ShapeError(f"z {tuple(z.shape)} and v {tuple(v.shape)} differ")
    squeeze = z.dim() == 1
    zb = z.unsqueeze(0) if squeeze else z
    vb = v.unsqueeze(0) if squeeze else v
    was_training = net.training
    net.eval()
    try:
        _, t = net.jvp(zb, vb.unsqueeze(-2))
    finally:
        net.train(was_training)
    t = _check_finite(t.squeeze(-2))
    return t.squeeze(0) if squeeze else t


def jacobian(net: MlpNet, z) -> torch.Tensor:
    """Jacobian of ``net`` at ``z``: ``(out, in)`` for a point, ``(B, out, in)`` for a batch.

    Built from ``in`` forward-mode passes along the standard basis.
    """
    z = as_tensor(z)
    net._check_input(z)
    squeeze = z.dim() == 1
    zb = z.unsqueeze(0) if squeeze else z
    eye = torch.eye(net.in_dim, dtype=zb.dtype).expand(zb.shape[0], -1, -1)
    was_training = net.training
    net.eval()
    try:
        _, t = net.jvp(zb, eye)
    finally:
        net.train(was_training)
    jac = _check_finite(t.transpose(-1, -2))
    return jac.squeeze(0) if squeeze else jac


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    directory: str | os.PathLike,
    module: nn.Module,
    nets: Mapping[str, dict] | None = None,
    meta: Mapping | None = None,
) -> Path:
    """Write ``manifest.json`` + ``params.bin`` (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f8", copy=False)
            blob = np.ascontiguousarray(arr).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
            fh.write(blob)
            offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "nets": dict(nets or {}),
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_checkpoint(directory: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    raw = (directory / "params.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return manifest, tensors


def load_into(module: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    module.load_state_dict(dict(tensors), strict=True)
