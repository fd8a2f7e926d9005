"""MCMC baseline: Langevin kernels, parallel tempering and a post-hoc diffusion fit."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import Tensor

from .models import DriftModel
from .processes import dds_output_scale, make_dds, simulate_process
from .schedules import NoiseSchedule
from .targets import DTYPE, TargetDensity


def ula_step(x: Tensor, grad_log: Callable[[Tensor], Tensor] | Tensor, step: float,
             generator: torch.Generator | None = None) -> Tensor:
    """x + step * grad log pi(x) + sqrt(2 step) xi.

    ``grad_log`` may be a callable or a precomputed gradient at ``x``; ``step``
    may be a scalar or a per-row column.
    """
    if not (torch.as_tensor(step) > 0).all():
        raise ValueError("step must be positive")
    g = grad_log(x) if callable(grad_log) else grad_log
    xi = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    out = x + step * g + torch.sqrt(torch.as_tensor(2.0 * step, dtype=DTYPE)) * xi
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite Langevin proposal")
    return out


def mala_step(x: Tensor, logp: Tensor, grad: Tensor, log_grad_fn: Callable[[Tensor], tuple[Tensor, Tensor]],
              step, generator: torch.Generator | None = None):
    """Metropolis-adjusted Langevin step with cached log density and gradient.

    Returns (x', logp', grad', accepted mask).
    """
    step = torch.as_tensor(step, dtype=DTYPE)
    xi = torch.randn(x.shape, generator=generator, dtype=DTYPE)
    y = x + step * grad + torch.sqrt(2.0 * step) * xi
    logp_y, grad_y = log_grad_fn(y)
    fwd = -((y - x - step * grad) ** 2).sum(-1) / (4.0 * step.reshape(-1))
    bwd = -((x - y - step * grad_y) ** 2).sum(-1) / (4.0 * step.reshape(-1))
    log_alpha = logp_y - logp + bwd - fwd
    u = torch.rand(x.shape[0], generator=generator, dtype=DTYPE)
    acc = torch.log(u) < log_alpha
    x = torch.where(acc[:, None], y, x)
    logp = torch.where(acc, logp_y, logp)
    grad = torch.where(acc[:, None], grad_y, grad)
    return x, logp, grad, acc


def _swap_rows(a: Tensor, i: int, acc: Tensor) -> None:
    lo, hi = a[i].clone(), a[i + 1].clone()
    a[i] = torch.where(acc, hi, lo)
    a[i + 1] = torch.where(acc, lo, hi)


def _mala_tempered(target, x, lp_u, g_u, beta_rows, steps, gen):
    """MALA on p~^beta with cached untempered log density and gradient."""

    def log_grad(y):
        lp, g = target.log_unnorm(y), target.grad_log(y)
        return beta_rows[:, 0] * lp, beta_rows * g

    x_new, lp_t, g_t, _ = mala_step(x, beta_rows[:, 0] * lp_u, beta_rows * g_u, log_grad, steps, gen)
    return x_new, lp_t / beta_rows[:, 0], g_t / beta_rows


def geometric_ladder(n: int = 10, beta_min: float = 0.05) -> list[float]:
    if n == 1:
        return [1.0]
    ratio = (1.0 / beta_min) ** (1.0 / (n - 1))
    ladder = [beta_min * ratio**i for i in range(n)]
    ladder[-1] = 1.0
    return ladder


@dataclass
class PTState:
    ladder: list[float]
    chains: Tensor  # (R, C, d)
    swap_attempts: list[int] = field(default_factory=list)
    swap_accepts: list[int] = field(default_factory=list)
    energy_calls: int = 0

    def __post_init__(self) -> None:
        check_ladder(self.ladder)
        if not self.swap_attempts:
            self.swap_attempts = [0] * (len(self.ladder) - 1)
            self.swap_accepts = [0] * (len(self.ladder) - 1)

    @property
    def acceptance(self) -> list[float]:
        return [a / n if n else 0.0 for a, n in zip(self.swap_accepts, self.swap_attempts)]


def check_ladder(ladder: Sequence[float]) -> None:
    if len(ladder) == 0 or ladder[-1] != 1.0:
        raise ValueError("temperature ladder must end at exactly 1")
    if any(b <= 0 for b in ladder) or any(b2 <= b1 for b1, b2 in zip(ladder, ladder[1:])):
        raise ValueError("temperature ladder must be positive and strictly increasing")


def swap_log_accept(beta_i: Tensor | float, beta_j: Tensor | float, energy_i: Tensor, energy_j: Tensor) -> Tensor:
    """log acceptance of exchanging states between inverse temperatures i and j, E = -log p~."""
    return torch.clamp((beta_i - beta_j) * (energy_i - energy_j), max=0.0)


def pt_run(
    target: TargetDensity,
    ladder: Sequence[float] | None = None,
    steps_per_swap: int = 10,
    n_sweeps: int = 100,
    n_chains: int = 100,
    step: float = 0.05,
    kernel: str = "ula",
    seed: int = 0,
    burn_in: int = 0,
    thin: int = 1,
    init_scale: float | None = None,
) -> tuple[Tensor, PTState]:
    """Parallel tempering over tempered densities p~^beta.

    Each sweep runs ``steps_per_swap`` local Langevin steps (step size
    ``step / beta``) on every chain, then proposes swaps between adjacent
    temperatures (even pairs on even sweeps, odd pairs on odd sweeps).
    Energies are cached, so swaps cost no extra target calls.

    Returns samples of the beta = 1 chains collected after every sweep past
    ``burn_in`` (every ``thin``-th), shape (n_kept * n_chains, d), and the
    final state.
    """
    ladder = list(ladder) if ladder is not None else geometric_ladder()
    check_ladder(ladder)
    if kernel not in ("ula", "mala"):
        raise ValueError(f"unknown kernel {kernel!r}")
    gen = torch.Generator().manual_seed(seed)
    R, d = len(ladder), target.dim
    betas = torch.tensor(ladder, dtype=DTYPE)
    before = target.counter.total
    scale = init_scale if init_scale is not None else 1.0
    x = scale * torch.randn(R * n_chains, d, generator=gen, dtype=DTYPE)
    beta_rows = betas.repeat_interleave(n_chains)[:, None]
    steps = step / beta_rows
    state = PTState(ladder, x.reshape(R, n_chains, d))

    if kernel == "mala":
        lp_u, g_u = target.log_unnorm(x), target.grad_log(x)
    kept = []
    for sweep in range(n_sweeps):
        for _ in range(steps_per_swap):
            if kernel == "ula":
                x = ula_step(x, beta_rows * target.grad_log(x), steps, gen)
            else:
                x, lp_u, g_u = _mala_tempered(target, x, lp_u, g_u, beta_rows, steps, gen)
        lp = target.log_unnorm(x) if kernel == "ula" else lp_u
        xr, er = x.reshape(R, n_chains, d), (-lp).reshape(R, n_chains)
        gr = g_u.reshape(R, n_chains, d) if kernel == "mala" else None
        for i in range(sweep % 2, R - 1, 2):
            log_a = swap_log_accept(betas[i], betas[i + 1], er[i], er[i + 1])
            acc = torch.log(torch.rand(n_chains, generator=gen, dtype=DTYPE)) < log_a
            _swap_rows(xr, i, acc[:, None])
            _swap_rows(er, i, acc)
            if gr is not None:
                _swap_rows(gr, i, acc[:, None])
            state.swap_attempts[i] += n_chains
            state.swap_accepts[i] += int(acc.sum())
        x = xr.reshape(R * n_chains, d)
        if kernel == "mala":
            lp_u, g_u = -er.reshape(-1), gr.reshape(R * n_chains, d)
        if sweep >= burn_in and (sweep - burn_in) % thin == 0:
            kept.append(xr[-1].clone())
    state.chains = x.reshape(R, n_chains, d)
    state.energy_calls = target.counter.total - before
    samples = torch.cat(kept) if kept else torch.empty(0, d, dtype=DTYPE)
    return samples, state


# ---------------------------------------------------------------------------
# post-hoc diffusion fit

def dsm_loss(model: DriftModel, data: Tensor, sched: NoiseSchedule, generator: torch.Generator | None = None,
             t_min: float = 1e-3) -> Tensor:
    """Denoising score matching under the VP schedule, weighted by the noise variance.

    Times are sampling times; t = T is the data end and is avoided by ``t_min``.
    """
    n = data.shape[0]
    t = torch.rand(n, generator=generator, dtype=DTYPE) * (sched.T - t_min)
    a = sched.cond_scale(t)[:, None]
    var = sched.cond_var(t)[:, None]
    eps = torch.randn(data.shape, generator=generator, dtype=DTYPE)
    x = a * data + var.sqrt() * eps
    pred = model(x, t)
    return ((var.sqrt() * pred + eps) ** 2).sum(-1).mean()


def posthoc_fit(
    samples: Tensor,
    sched: NoiseSchedule,
    model: DriftModel | None = None,
    iters: int = 3000,
    batch: int = 512,
    lr: float = 1e-3,
    seed: int = 0,
    hidden: Sequence[int] = (128, 128, 128),
) -> DriftModel:
    """Fit a score network to samples by denoising score matching; no target calls."""
    if samples.shape[0] == 0:
        raise ValueError("no samples to fit")
    torch.manual_seed(seed)
    if model is None:
        model = DriftModel(samples.shape[1], "plain", hidden=hidden, T=sched.T,
                           output_scale=dds_output_scale(sched))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(iters, 1))
    for _ in range(iters):
        idx = torch.randint(0, samples.shape[0], (batch,), generator=gen)
        loss = dsm_loss(model, samples[idx], sched, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
    return model


def sample_posthoc(model: DriftModel, target: TargetDensity, sched: NoiseSchedule, n: int, steps: int = 256,
                   seed: int = 0) -> Tensor:
    """Sample the fitted reversal of the VP process; the model never queries the target."""
    p, _ = make_dds(model, target, sched)
    with torch.no_grad():
        return simulate_process(p, n, steps, seed)
