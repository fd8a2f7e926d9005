"""Unnormalized target densities, Gaussian priors and energy-call accounting.

All densities live on R^dim and operate on batches of shape (B, dim) in float64.
Every density or gradient evaluation is charged to the target's
:class:`EvalCounter`, one unit per point.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import Tensor

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)


class EvalCounter:
    """Thread-safe tally of density and gradient evaluations (in points)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.density_calls = 0
        self.grad_calls = 0

    def add(self, density: int = 0, grad: int = 0) -> None:
        with self._lock:
            self.density_calls += density
            self.grad_calls += grad

    @property
    def total(self) -> int:
        return self.density_calls + self.grad_calls

    def reset(self) -> None:
        with self._lock:
            self.density_calls = 0
            self.grad_calls = 0


def _check_batch(x: Tensor, dim: int) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected a (B, {dim}) batch, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input point")


@dataclass
class GaussianSpec:
    """Isotropic or diagonal Gaussian N(mean, diag(variance))."""

    mean: Tensor
    variance: Tensor

    def __post_init__(self) -> None:
        self.mean = torch.as_tensor(self.mean, dtype=DTYPE).reshape(-1)
        var = torch.as_tensor(self.variance, dtype=DTYPE)
        if var.ndim == 0:
            var = var.expand(self.mean.shape[0]).clone()
        if var.shape != self.mean.shape:
            raise ValueError("variance must be scalar or match the mean's dimension")
        if not (var > 0).all():
            raise ValueError("variance must be strictly positive")
        self.variance = var

    @classmethod
    def isotropic(cls, dim: int, variance: float = 1.0, mean: float = 0.0) -> "GaussianSpec":
        return cls(torch.full((dim,), float(mean), dtype=DTYPE), torch.tensor(float(variance), dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_prob(self, x: Tensor) -> Tensor:
        z = (x - self.mean) ** 2 / self.variance
        return -0.5 * (z.sum(-1) + torch.log(self.variance).sum() + self.dim * LOG_2PI)

    def grad_log(self, x: Tensor) -> Tensor:
        return -(x - self.mean) / self.variance

    def sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        eps = torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return self.mean + eps * self.variance.sqrt()


class TargetDensity:
    """Unnormalized log-density with an analytic gradient.

    Args:
        dim: dimension of the sample space.
        log_fn: batch map x -> log p~(x), shape (B,).
        grad_fn: batch map x -> grad log p~(x), shape (B, dim).
        exact_log_z: log normalizer when known.
        sampler: ``sampler(n, generator)`` drawing exact samples, when available.
    """

    def __init__(
        self,
        dim: int,
        log_fn: Callable[[Tensor], Tensor],
        grad_fn: Callable[[Tensor], Tensor],
        exact_log_z: float | None = None,
        sampler: Callable[[int, torch.Generator | None], Tensor] | None = None,
        name: str = "target",
    ):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._log_fn = log_fn
        self._grad_fn = grad_fn
        self.exact_log_z = exact_log_z
        self._sampler = sampler
        self.name = name
        self.counter = EvalCounter()

    def log_unnorm(self, x: Tensor) -> Tensor:
        _check_batch(x, self.dim)
        self.counter.add(density=x.shape[0])
        return self._log_fn(x)

    # start-density protocol shared with GaussianSpec (unnormalized here)
    log_prob = log_unnorm

    def grad_log(self, x: Tensor) -> Tensor:
        _check_batch(x, self.dim)
        self.counter.add(grad=x.shape[0])
        return self._grad_fn(x)

    def log_density_and_grad(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.log_unnorm(x), self.grad_log(x)

    @property
    def has_sampler(self) -> bool:
        return self._sampler is not None

    def sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        if self._sampler is None:
            raise RuntimeError(f"target {self.name!r} has no exact sampler")
        return self._sampler(n, generator)


class GMMTarget(TargetDensity):
    """Finite Gaussian mixture with diagonal components."""

    def __init__(self, means: Tensor, variances: Tensor, weights: Tensor, name: str = "gmm"):
        self.means = means
        self.variances = variances  # (K, dim)
        self.weights = weights
        self._log_w = torch.log(weights)
        self._log_norm = -0.5 * (torch.log(variances).sum(-1) + means.shape[1] * LOG_2PI)
        super().__init__(
            means.shape[1], self._log_prob, self._grad, exact_log_z=0.0, sampler=self._sample, name=name
        )

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _component_logits(self, x: Tensor) -> Tensor:
        diff = x[:, None, :] - self.means[None]
        quad = (diff**2 / self.variances[None]).sum(-1)
        return self._log_w + self._log_norm - 0.5 * quad

    def _log_prob(self, x: Tensor) -> Tensor:
        return torch.logsumexp(self._component_logits(x), dim=1)

    def _grad(self, x: Tensor) -> Tensor:
        resp = torch.softmax(self._component_logits(x), dim=1)
        comp = -(x[:, None, :] - self.means[None]) / self.variances[None]
        return (resp[..., None] * comp).sum(1)

    def _sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        idx = torch.multinomial(self.weights, n, replacement=True, generator=generator)
        eps = torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return self.means[idx] + eps * self.variances[idx].sqrt()

    def moments(self) -> tuple[Tensor, Tensor]:
        """Analytic mean and per-coordinate variance of the mixture."""
        w = self.weights[:, None]
        mean = (w * self.means).sum(0)
        second = (w * (self.variances + self.means**2)).sum(0)
        return mean, second - mean**2


def make_gmm(
    means: Sequence[Sequence[float]] | Tensor,
    variances: Sequence[float] | Tensor,
    weights: Sequence[float] | Tensor,
    name: str = "gmm",
) -> GMMTarget:
    """Normalized Gaussian mixture. Per-component variances may be scalars or vectors."""
    means = torch.as_tensor(means, dtype=DTYPE)
    if means.ndim != 2:
        raise ValueError("means must be a (K, dim) array; all means must share a dimension")
    k, dim = means.shape
    variances = torch.as_tensor(variances, dtype=DTYPE)
    if variances.ndim == 1:
        variances = variances[:, None].expand(k, dim).clone()
    if variances.shape != (k, dim):
        raise ValueError("variances must have one entry (or one vector) per component")
    if not (variances > 0).all():
        raise ValueError("variances must be strictly positive")
    weights = torch.as_tensor(weights, dtype=DTYPE)
    if weights.shape != (k,) or (weights < 0).any() or abs(weights.sum().item() - 1.0) > 1e-12:
        raise ValueError("weights must be a probability vector with one entry per component")
    return GMMTarget(means, variances, weights, name=name)


def make_gmm40(seed: int = 0, scale: float = 40.0, n_modes: int = 40) -> GMMTarget:
    """40 equally weighted unit-variance modes with means uniform in [-scale, scale]^2."""
    g = torch.Generator().manual_seed(seed)
    means = (torch.rand(n_modes, 2, generator=g, dtype=DTYPE) * 2.0 - 1.0) * scale
    return make_gmm(means, torch.ones(n_modes, dtype=DTYPE), torch.full((n_modes,), 1.0 / n_modes, dtype=DTYPE), name="gmm40")


def make_gmm3(radius: float = 5.0) -> GMMTarget:
    """Three unit-variance modes on the vertices of an equilateral triangle."""
    angles = torch.tensor([math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3], dtype=DTYPE)
    means = radius * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
    return make_gmm(means, torch.ones(3, dtype=DTYPE), torch.full((3,), 1.0 / 3, dtype=DTYPE), name="gmm3")


def make_gauss(dim: int = 2, variance: float = 1.0, mean: float = 0.0) -> GMMTarget:
    """Single Gaussian, expressed as a one-component mixture."""
    means = torch.full((1, dim), float(mean), dtype=DTYPE)
    return make_gmm(means, torch.tensor([float(variance)], dtype=DTYPE), torch.ones(1, dtype=DTYPE), name="gauss")


def log_density_and_grad(target: TargetDensity, x: Tensor) -> tuple[Tensor, Tensor]:
    return target.log_density_and_grad(x)


TARGETS: dict[str, Callable[..., TargetDensity]] = {
    "gmm3": make_gmm3,
    "gmm40": make_gmm40,
    "gauss": make_gauss,
}


def make_target(key: str, **overrides) -> TargetDensity:
    try:
        factory = TARGETS[key]
    except KeyError:
        raise ValueError(f"unknown target {key!r}; choose from {sorted(TARGETS)}") from None
    return factory(**overrides)


def export_gmm_csv(target: GMMTarget, path: str | Path) -> None:
    """Write one row per component: weight, mean_0..mean_d, var_0..var_d."""
    dim = target.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["weight", *[f"mean_{i}" for i in range(dim)], *[f"var_{i}" for i in range(dim)]])
        for k in range(target.n_components):
            w.writerow(
                [repr(target.weights[k].item()), *[repr(v) for v in target.means[k].tolist()],
                 *[repr(v) for v in target.variances[k].tolist()]]
            )
