"""Drift networks f_theta(x, t) and their training plumbing.

Gradients come from torch's reverse-mode autograd. All modules are built
in float64.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor, nn

from .targets import DTYPE, TargetDensity

KINDS = ("plain", "langevin_precond", "energy_conditioned", "potential")

LG_HIDDEN = (64, 64)
PLAIN_HIDDEN = (256, 256, 256, 256, 256)

# Learning rates of the reference experiments, keyed "<method>.<objective>".
LEARNING_RATES = {
    "dds.rkl": 5e-4,
    "dds.lv": 5e-4,
    "dds.tb": 5e-4,
    "cmcd.rkl": 5e-4,
    "cmcd.lv": 5e-3,
    "cmcd.tb": 5e-4,
}
DEFAULT_LR = 5e-4


def learning_rate(key: str) -> float:
    return LEARNING_RATES.get(key, DEFAULT_LR)


class TargetQuery:
    """Lazily evaluated target quantities at a fixed batch of points.

    Shares one density / gradient evaluation between every consumer of the
    same state (drifts of both processes, boundary terms), so energy
    accounting reflects what a careful implementation would pay.
    """

    __slots__ = ("target", "x", "_log_p", "_grad", "extra")

    def __init__(self, target: TargetDensity | None, x: Tensor):
        self.target = target
        self.x = x
        self._log_p = None
        self._grad = None
        self.extra: dict = {}

    @property
    def log_p(self) -> Tensor:
        if self._log_p is None:
            self._log_p = self.target.log_unnorm(self.x)
        return self._log_p

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            self._grad = self.target.grad_log(self.x)
        return self._grad


class TimeEmbedding(nn.Module):
    """Fixed sinusoidal features of t / T."""

    def __init__(self, n_features: int = 64, T: float = 1.0):
        super().__init__()
        half = n_features // 2
        self.register_buffer("freqs", torch.linspace(0.1, 100.0, half, dtype=DTYPE))
        self.T = T
        self.n_features = 2 * half

    def forward(self, t: Tensor) -> Tensor:
        arg = (t.reshape(-1, 1) / self.T) * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def mlp(sizes: Sequence[int], zero_last: bool = True, act: type[nn.Module] = nn.GELU) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1], dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(act())
    if zero_last:
        nn.init.zeros_(layers[-1].weight)
        nn.init.zeros_(layers[-1].bias)
    return nn.Sequential(*layers)


def _time_tensor(t, n: int) -> Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    return t.expand(n) if t.ndim == 0 else t.reshape(n)


def _symlog(v: Tensor) -> Tensor:
    return torch.sign(v) * torch.log1p(v.abs())


class DriftModel(nn.Module):
    """Drift network in one of four parameterizations.

    * ``plain``: MLP(x, emb(t)).
    * ``langevin_precond``: NN1(x, t) + NN2(t) * grad log p~(x); NN1 starts at
      zero and NN2(t) = 2 sigmoid(g(t)) starts at one.
    * ``energy_conditioned``: MLP(x, symlog(log p~(x)), emb(t)).
    * ``potential``: grad_x phi(x, t) of a scalar network with a learnable
      diagonal quadratic skip term.

    ``target`` is the density whose score or value the network consumes;
    the models that need it raise if it is missing. ``output_scale(t)`` is an
    optional fixed factor on the whole output (see
    :func:`samplerlab.processes.dds_output_scale`). ``input_scale`` multiplies
    x before it enters the networks, e.g. 1/v for a N(0, v^2 I) prior, and
    ``net_gain`` multiplies the learned network head (not the score skip
    term), so outputs of the data's scale need only O(1) weights.
    """

    def __init__(
        self,
        dim: int,
        kind: str = "plain",
        hidden: Sequence[int] | None = None,
        time_features: int = 64,
        target: TargetDensity | None = None,
        T: float = 1.0,
        output_scale: Callable[[float], float] | None = None,
        input_scale: float = 1.0,
        net_gain: float = 1.0,
    ):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if kind in ("langevin_precond", "energy_conditioned") and target is None:
            raise ValueError(f"{kind} model needs a target hook")
        if hidden is None:
            hidden = LG_HIDDEN if kind == "langevin_precond" else PLAIN_HIDDEN
        self.dim, self.kind, self.hidden = dim, kind, tuple(hidden)
        self.target = target
        self.output_scale = output_scale
        self.input_scale = float(input_scale)
        self.net_gain = float(net_gain)
        self.embed = TimeEmbedding(time_features, T)
        tf = self.embed.n_features
        if kind == "potential":
            self.net = mlp([dim + tf, *hidden, 1])
            self.quad = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        else:
            extra = 1 if kind == "energy_conditioned" else 0
            self.net = mlp([dim + extra + tf, *hidden, dim])
        if kind == "langevin_precond":
            self.scale_net = mlp([tf, 64, dim])

    def _features(self, x: Tensor, t) -> Tensor:
        return self.embed(_time_tensor(t, x.shape[0]))

    def langevin_scale(self, t, n: int = 1) -> Tensor:
        return 2.0 * torch.sigmoid(self.scale_net(self.embed(_time_tensor(t, n))))

    def potential(self, x: Tensor, t) -> Tensor:
        """phi(x, t), shape (B,). Only for ``kind='potential'``."""
        h = torch.cat([x * self.input_scale, self._features(x, t)], dim=-1)
        return self.net_gain * self.net(h)[:, 0] + 0.5 * (self.quad * x**2).sum(-1)

    def forward(self, x: Tensor, t, query: TargetQuery | None = None) -> Tensor:
        if self.kind == "potential":
            outer = torch.is_grad_enabled()
            with torch.enable_grad():
                if not x.requires_grad:
                    x = x.detach().requires_grad_(True)
                phi = self.potential(x, t)
                g = torch.autograd.grad(phi.sum(), x, create_graph=outer)[0]
            return self._scaled(g if outer else g.detach(), t)
        if query is None and self.target is not None:
            query = TargetQuery(self.target, x)
        emb = self._features(x, t)
        if self.kind == "energy_conditioned":
            out = self.net(torch.cat([x * self.input_scale, _symlog(query.log_p)[:, None], emb], dim=-1))
        else:
            out = self.net(torch.cat([x * self.input_scale, emb], dim=-1))
        out = self.net_gain * out
        if self.kind == "langevin_precond":
            scale = 2.0 * torch.sigmoid(self.scale_net(emb))
            out = out + scale * query.grad
        return self._scaled(out, t)

    def _scaled(self, out: Tensor, t) -> Tensor:
        if self.output_scale is None:
            return out
        scale = torch.as_tensor(self.output_scale(t), dtype=DTYPE)
        return out * (scale[:, None] if scale.ndim == 1 else scale)


def eval_drift(model: DriftModel, x: Tensor, t, query: TargetQuery | None = None) -> Tensor:
    return model(x, t, query)


class TimeScalar(nn.Module):
    """Scalar network of time, e.g. the free-energy offset F(t) of the PINN residual."""

    def __init__(self, time_features: int = 32, hidden: Sequence[int] = (64, 64), T: float = 1.0):
        super().__init__()
        self.embed = TimeEmbedding(time_features, T)
        self.net = mlp([self.embed.n_features, *hidden, 1])

    def forward(self, t: Tensor) -> Tensor:
        return self.net(self.embed(t))[:, 0]


# ---------------------------------------------------------------------------
# flat parameter vectors

def flat_params(module: nn.Module) -> Tensor:
    return nn.utils.parameters_to_vector(module.parameters()).detach().clone()


def set_flat_params(module: nn.Module, vec: Tensor) -> None:
    nn.utils.vector_to_parameters(vec.to(DTYPE), module.parameters())


def param_segments(module: nn.Module) -> list[tuple[str, int]]:
    """Named segments of the flat parameter vector (name, length)."""
    return [(name, p.numel()) for name, p in module.named_parameters()]


def grad_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor]) -> Tensor:
    """Flat gradient of a scalar loss; parameters the loss ignores get zeros."""
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1) for g, p in zip(grads, params)]
    return torch.cat(flat)


def make_optimizer(params: Iterable[Tensor], lr: float = DEFAULT_LR) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr)


def adam_step(params: Tensor, grad: Tensor, state: torch.optim.Adam | None = None, lr: float = DEFAULT_LR):
    """One Adam update of a flat parameter tensor; returns (params, optimizer state)."""
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if state is None:
        params = params.detach().clone().requires_grad_(True)
        state = torch.optim.Adam([params], lr=lr)
    else:
        params = state.param_groups[0]["params"][0]
    params.grad = grad.detach().clone()
    state.step()
    return params, state


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], meta: dict | None = None) -> None:
    """Write named parameter segments plus a shape header."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "shapes": {k: {n: tuple(p.shape) for n, p in m.state_dict().items()} for k, m in modules.items()},
        "state": {k: m.state_dict() for k, m in modules.items()},
    }
    _atomic_save(payload, Path(path))


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload
