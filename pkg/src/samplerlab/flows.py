"""Time-indexed normalizing flows x = F(x_base, t) and their two sampling routes."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .models import TimeEmbedding, mlp
from .targets import DTYPE, GaussianSpec

SCALE_CLAMP = 5.0


def _times(t, n: int) -> Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    return t.expand(n).clone() if t.ndim == 0 else t.reshape(n)


def _soft_clamp(s: Tensor) -> Tensor:
    return SCALE_CLAMP * torch.tanh(s / SCALE_CLAMP)


class TimeAffine(nn.Module):
    """Elementwise x -> x * exp(a(t)) + b(t)."""

    def __init__(self, dim: int, embed: TimeEmbedding, hidden: Sequence[int]):
        super().__init__()
        self.embed = embed
        self.net = mlp([embed.n_features, *hidden, 2 * dim])
        self.dim = dim

    def _params(self, t: Tensor):
        a, b = self.net(self.embed(t)).chunk(2, dim=-1)
        return _soft_clamp(a), b

    def forward(self, x: Tensor, t: Tensor):
        a, b = self._params(t)
        return x * torch.exp(a) + b, a.sum(-1)

    def inverse(self, y: Tensor, t: Tensor):
        a, b = self._params(t)
        return (y - b) * torch.exp(-a), a.sum(-1)


class TimeCoupling(nn.Module):
    """Affine coupling: the masked-out half is scaled and shifted given the kept half and t."""

    def __init__(self, dim: int, mask: Tensor, embed: TimeEmbedding, hidden: Sequence[int]):
        super().__init__()
        self.register_buffer("mask", mask)
        self.embed = embed
        self.net = mlp([dim + embed.n_features, *hidden, 2 * dim])

    def _params(self, x_keep: Tensor, t: Tensor):
        s, m = self.net(torch.cat([x_keep, self.embed(t)], dim=-1)).chunk(2, dim=-1)
        free = 1.0 - self.mask
        return _soft_clamp(s) * free, m * free

    def forward(self, x: Tensor, t: Tensor):
        s, m = self._params(x * self.mask, t)
        return x * torch.exp(s) + m, s.sum(-1)

    def inverse(self, y: Tensor, t: Tensor):
        s, m = self._params(y * self.mask, t)
        return (y - m) * torch.exp(-s), s.sum(-1)


class FlowMap(nn.Module):
    """Invertible map F(., t) from a Gaussian base, identity at initialization.

    Args:
        dim: sample dimension.
        base: base density; defaults to N(0, I).
        couplings: number of coupling layers (ignored in 1D, where only the
            elementwise affine layer is used).
        hidden: conditioner widths.
        time_features: size of the sinusoidal time embedding.
        T: horizon.
    """

    def __init__(
        self,
        dim: int,
        base: GaussianSpec | None = None,
        couplings: int = 4,
        hidden: Sequence[int] = (64, 64),
        time_features: int = 32,
        T: float = 1.0,
    ):
        super().__init__()
        self.dim, self.T = dim, T
        self.base = base if base is not None else GaussianSpec.isotropic(dim, 1.0)
        embed = TimeEmbedding(time_features, T)
        layers: list[nn.Module] = []
        if dim > 1:
            for i in range(couplings):
                mask = torch.zeros(dim, dtype=DTYPE)
                mask[i % 2 :: 2] = 1.0
                layers.append(TimeCoupling(dim, mask, embed, hidden))
        layers.append(TimeAffine(dim, embed, hidden))
        self.layers = nn.ModuleList(layers)

    def forward(self, x_base: Tensor, t) -> tuple[Tensor, Tensor]:
        """Returns F(x_base, t) and log|det dF/dx_base|."""
        t = _times(t, x_base.shape[0])
        x, log_det = x_base, torch.zeros(x_base.shape[0], dtype=DTYPE)
        for layer in self.layers:
            x, ld = layer(x, t)
            log_det = log_det + ld
        return x, log_det

    def inverse(self, x: Tensor, t) -> tuple[Tensor, Tensor]:
        """Returns F^{-1}(x, t) and log|det dF/dx_base| at that base point."""
        t = _times(t, x.shape[0])
        log_det = torch.zeros(x.shape[0], dtype=DTYPE)
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, t)
            log_det = log_det + ld
        return x, log_det

    def log_q(self, x: Tensor, t) -> Tensor:
        x_base, log_det = self.inverse(x, t)
        return self.base.log_prob(x_base) - log_det

    def score(self, x: Tensor, t) -> Tensor:
        """grad_x log q(x, t), differentiable in the parameters."""
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        return torch.autograd.grad(self.log_q(x, t).sum(), x, create_graph=True)[0]

    def push_with_velocity(self, x_base: Tensor, t) -> tuple[Tensor, Tensor]:
        """x = F(x_base, t) and d/dt F(x_base, t), one backward pass per coordinate."""
        t = _times(t, x_base.shape[0]).detach().requires_grad_(True)
        x, _ = self.forward(x_base, t)
        vel = [torch.autograd.grad(x[:, i].sum(), t, create_graph=True)[0] for i in range(self.dim)]
        return x, torch.stack(vel, dim=-1)

    def velocity(self, x: Tensor, t) -> Tensor:
        x_base, _ = self.inverse(x, t)
        return self.push_with_velocity(x_base, t)[1]

    def sample_base(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        return self.base.sample(n, generator)


def sample_route1(flow: FlowMap, t: float, n: int, seed: int = 0) -> Tensor:
    """Push base samples through F(., t); no integration and no target calls."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        return flow(flow.sample_base(n, gen), t)[0]


def sample_route2(
    flow: FlowMap,
    t: float,
    n: int,
    sigma: Callable[[float], float] | float = 0.0,
    steps: int = 256,
    seed: int = 0,
) -> Tensor:
    """Integrate dX = (v + sigma^2 grad log q) dt + sigma sqrt(2) dW from F(x_base, 0) up to time t.

    With sigma = 0 this is the flow's probability-flow ODE.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sig = sigma if callable(sigma) else (lambda s, c=float(sigma): c)
    gen = torch.Generator().manual_seed(seed)
    x = flow(flow.sample_base(n, gen), 0.0)[0].detach()
    dt = t / steps
    for k in range(steps):
        s = k * dt
        sk = sig(s)
        drift = flow.velocity(x, s)
        if sk > 0:
            drift = drift + sk**2 * flow.score(x, s)
        eps = torch.randn(x.shape, generator=gen, dtype=DTYPE)
        x = (x + drift * dt + sig(s + 0.5 * dt) * math.sqrt(2.0 * dt) * eps).detach()
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite state at step {k + 1}")
    return x


class FlowMarginal:
    """The flow's marginal at a fixed time as a start density (``log_prob`` / ``sample``)."""

    def __init__(self, flow: FlowMap, t: float):
        self.flow, self.t = flow, t
        self.dim = flow.dim

    def log_prob(self, x: Tensor) -> Tensor:
        return self.flow.log_q(x, self.t)

    def sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        with torch.no_grad():
            return self.flow(self.flow.sample_base(n, generator), self.t)[0]
