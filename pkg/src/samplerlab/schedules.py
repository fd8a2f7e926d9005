"""Noise schedules (VP, VE) and annealing paths between a prior and a target.

Time conventions: ``beta(t)`` and ``lam(t)`` are indexed by the noising
(target-process) clock, while ``sigma(t)``, ``cond_scale(t)`` and
``cond_var(t)`` are indexed by the sampling clock, where sampling time t
corresponds to noising time T - t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .targets import DTYPE, LOG_2PI, GaussianSpec, GMMTarget, TargetDensity


def _col(t: float | Tensor, n: int) -> Tensor:
    """Broadcast a scalar or per-point time to shape (n, 1)."""
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        return t.expand(n, 1)
    return t.reshape(n, 1)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear VP schedule beta_t = beta_min + (beta_max - beta_min) t / T with prior scale v."""

    T: float = 1.0
    beta_min: float = 0.03
    beta_max: float = 3.0
    v: float = 1.0

    def __post_init__(self) -> None:
        if self.T <= 0 or self.beta_min <= 0 or self.v <= 0:
            raise ValueError("T, beta_min and v must be positive")
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must be >= beta_min")

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.T

    def beta_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    def lam(self, t):
        """lambda_t = 1 - exp(-2 int_0^t beta_s ds)."""
        b = self.beta_integral(t)
        if isinstance(b, Tensor):
            return -torch.expm1(-2.0 * b)
        return -math.expm1(-2.0 * b)

    def sigma(self, t):
        """Sampling-clock diffusion coefficient v sqrt(beta_{T-t})."""
        b = self.beta(self.T - t)
        return self.v * (b.sqrt() if isinstance(b, Tensor) else math.sqrt(b))

    @property
    def prior(self) -> float:
        return self.v**2

    def cond_scale(self, t):
        """X_t | X_T ~ N(cond_scale * X_T, cond_var) at sampling time t."""
        lam = self.lam(self.T - t)
        return (1.0 - lam) ** 0.5

    def cond_var(self, t):
        return self.v**2 * self.lam(self.T - t)


@dataclass(frozen=True)
class VESchedule:
    """Variance-exploding process dY = sqrt(2 s) dW, prior N(0, T^2 I)."""

    T: float = 1.0

    def __post_init__(self) -> None:
        if self.T <= 0:
            raise ValueError("T must be positive")

    def sigma(self, t):
        s = self.T - t
        return s.clamp_min(0).sqrt() if isinstance(s, Tensor) else math.sqrt(max(s, 0.0))

    @property
    def prior(self) -> float:
        return self.T**2

    def cond_scale(self, t):
        return 1.0

    def cond_var(self, t):
        return (self.T - t) ** 2


def vp_schedule(T: float = 1.0, beta_min: float = 0.03, beta_max: float = 3.0, v: float = 1.0) -> NoiseSchedule:
    return NoiseSchedule(T=T, beta_min=beta_min, beta_max=beta_max, v=v)


def ve_schedule(T: float = 1.0) -> VESchedule:
    return VESchedule(T=T)


@dataclass(frozen=True)
class Exponent:
    """Monotone annealing exponent on [0, T] with beta(0) = 0 and beta(T) = 1."""

    T: float = 1.0
    kind: str = "linear"

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown exponent schedule {self.kind!r}")

    def __call__(self, t):
        u = t / self.T
        if self.kind == "linear":
            return u
        c = torch.cos(math.pi * u) if isinstance(u, Tensor) else math.cos(math.pi * u)
        return 0.5 * (1.0 - c)

    def deriv(self, t):
        if self.kind == "linear":
            return (t * 0 + 1.0) / self.T
        u = t / self.T
        s = torch.sin(math.pi * u) if isinstance(u, Tensor) else math.sin(math.pi * u)
        return 0.5 * math.pi * s / self.T


class AnnealingPath:
    """Prescribed family of unnormalized densities pi_t, t in [0, T].

    Subclasses provide ``log_pi``, ``grad_log_pi`` and ``dt_log_pi``; each
    accepts a (B, d) batch and a scalar or (B,) time.
    """

    kind = "custom"

    def __init__(self, dim: int, T: float = 1.0):
        self.dim = dim
        self.T = T

    def log_pi(self, x: Tensor, t) -> Tensor:
        raise NotImplementedError

    def grad_log_pi(self, x: Tensor, t) -> Tensor:
        raise NotImplementedError

    def dt_log_pi(self, x: Tensor, t) -> Tensor:
        raise NotImplementedError


class FunctionalPath(AnnealingPath):
    """Path assembled from explicit callables; used for analytic checks."""

    def __init__(self, dim, log_pi, grad_log_pi, dt_log_pi, T: float = 1.0):
        super().__init__(dim, T)
        self._log, self._grad, self._dt = log_pi, grad_log_pi, dt_log_pi

    def log_pi(self, x, t):
        return self._log(x, _col(t, x.shape[0]))

    def grad_log_pi(self, x, t):
        return self._grad(x, _col(t, x.shape[0]))

    def dt_log_pi(self, x, t):
        return self._dt(x, _col(t, x.shape[0]))


class GeometricPath(AnnealingPath):
    """log pi_t = beta_t log p~_target + (1 - beta_t) log p_prior."""

    kind = "geometric"

    def __init__(self, prior: GaussianSpec, target: TargetDensity, exponent: Exponent | None = None):
        if prior.dim != target.dim:
            raise ValueError("prior and target dimensions differ")
        exponent = exponent or Exponent()
        super().__init__(target.dim, exponent.T)
        self.prior, self.target, self.exponent = prior, target, exponent

    def _beta(self, x, t):
        tc = _col(t, x.shape[0])[:, 0]
        return self.exponent(tc), self.exponent.deriv(tc)

    def log_pi(self, x, t):
        b, _ = self._beta(x, t)
        return b * self.target.log_unnorm(x) + (1 - b) * self.prior.log_prob(x)

    def grad_log_pi(self, x, t):
        b, _ = self._beta(x, t)
        b = b[:, None]
        return b * self.target.grad_log(x) + (1 - b) * self.prior.grad_log(x)

    def dt_log_pi(self, x, t):
        _, db = self._beta(x, t)
        return db * (self.target.log_unnorm(x) - self.prior.log_prob(x))

    def grad_from_target(self, x, t, target_grad: Tensor) -> Tensor:
        """grad log pi_t given a precomputed target score (no extra target calls)."""
        b = self._beta(x, t)[0][:, None]
        return b * target_grad + (1 - b) * self.prior.grad_log(x)


class ModePath(AnnealingPath):
    """Mixture path whose component means and variances move linearly from the prior to the target.

    Component k at time t has mean (1 - b_t) m_prior + b_t m_k and variance
    (1 - b_t) v_prior + b_t v_k; mixture weights are held fixed. Each
    evaluation is charged to the target's counter, since it needs the
    target's parameters at every time.
    """

    kind = "mode"

    def __init__(self, prior: GaussianSpec, target: TargetDensity, exponent: Exponent | None = None):
        if not isinstance(target, GMMTarget):
            raise TypeError("mode interpolation needs a Gaussian-mixture target")
        if prior.dim != target.dim:
            raise ValueError("prior and target dimensions differ")
        exponent = exponent or Exponent()
        super().__init__(target.dim, exponent.T)
        self.prior, self.target, self.exponent = prior, target, exponent

    def components(self, t) -> tuple[Tensor, Tensor]:
        """Means (K, d) and variances (K, d) at a scalar time t."""
        b = self.exponent(t)
        m = (1 - b) * self.prior.mean[None] + b * self.target.means
        v = (1 - b) * self.prior.variance[None] + b * self.target.variances
        return m, v

    def _terms(self, x, t):
        tc = _col(t, x.shape[0])[:, 0]
        b = self.exponent(tc)[:, None, None]
        db = self.exponent.deriv(tc)[:, None, None]
        pm, pv = self.prior.mean[None, None], self.prior.variance[None, None]
        tm, tv = self.target.means[None], self.target.variances[None]
        mean = (1 - b) * pm + b * tm  # (B, K, d)
        var = (1 - b) * pv + b * tv
        dmean = db * (tm - pm)
        dvar = db * (tv - pv)
        diff = x[:, None, :] - mean
        logits = (
            torch.log(self.target.weights)[None]
            - 0.5 * ((diff**2 / var).sum(-1) + torch.log(var).sum(-1) + self.dim * LOG_2PI)
        )
        self.target.counter.add(density=x.shape[0])
        return logits, diff, var, dmean, dvar

    def log_pi(self, x, t):
        logits, *_ = self._terms(x, t)
        return torch.logsumexp(logits, 1)

    def grad_log_pi(self, x, t):
        logits, diff, var, _, _ = self._terms(x, t)
        r = torch.softmax(logits, 1)[..., None]
        return (r * (-diff / var)).sum(1)

    def dt_log_pi(self, x, t):
        logits, diff, var, dmean, dvar = self._terms(x, t)
        r = torch.softmax(logits, 1)
        dlog = (diff * dmean / var).sum(-1) + 0.5 * ((diff**2 / var**2 - 1.0 / var) * dvar).sum(-1)
        return (r * dlog).sum(1)

    def sample(self, t: float, n: int, generator: torch.Generator | None = None) -> Tensor:
        m, v = self.components(t)
        idx = torch.multinomial(self.target.weights, n, replacement=True, generator=generator)
        eps = torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return m[idx] + eps * v[idx].sqrt()


def geometric_path(prior: GaussianSpec, target: TargetDensity, exponent: Exponent | None = None) -> GeometricPath:
    return GeometricPath(prior, target, exponent)


def mode_path(prior: GaussianSpec, target: TargetDensity, exponent: Exponent | None = None) -> ModePath:
    return ModePath(prior, target, exponent)


def make_path(kind: str, prior: GaussianSpec, target: TargetDensity, exponent: Exponent | None = None) -> AnnealingPath:
    if kind in ("geom", "geometric"):
        return GeometricPath(prior, target, exponent)
    if kind == "mode":
        return ModePath(prior, target, exponent)
    raise ValueError(f"unknown interpolation {kind!r}")


def gaussian_geometric_closed_form(prior: GaussianSpec, target_mean: Tensor, target_var: Tensor, beta: float):
    """Mean and variance of pi_t when both endpoints are diagonal Gaussians."""
    prec = beta / target_var + (1 - beta) / prior.variance
    mean = (beta * target_mean / target_var + (1 - beta) * prior.mean / prior.variance) / prec
    return mean, 1.0 / prec
