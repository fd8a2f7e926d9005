"""Training objectives for diffusion-based samplers.

Path-measure objectives (rkl, lv, tb, stb, db) consume a :class:`Trajectory`.
Marginal objectives (pinn, am, idem) consume batches of (x, t). The
normalizing-flow objectives (nfdds, nfcmcd) sample the flow directly and
never integrate an SDE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

from .flows import FlowMap
from .models import DriftModel, TimeScalar
from .processes import Trajectory
from .schedules import AnnealingPath, Exponent, NoiseSchedule, VESchedule
from .targets import DTYPE, GaussianSpec, TargetDensity

OBJECTIVES = ("rkl", "lv", "tb", "stb", "db", "pinn", "am", "idem", "nfdds", "nfcmcd")

N_TIME_STRATA = 32


@dataclass
class LossReport:
    """A differentiable loss value with diagnostics.

    ``value`` keeps its autograd graph; call ``value.backward()`` or use
    :func:`samplerlab.models.grad_params` to get parameter gradients.
    """

    value: Tensor
    per_path_log_rnd: Tensor | None = None
    aux: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _check_finite(v: Tensor, name: str) -> Tensor:
    if not torch.isfinite(v).all():
        raise FloatingPointError(f"non-finite {name}")
    return v


# ---------------------------------------------------------------------------
# path-measure objectives

def rkl_loss(traj: Trajectory) -> LossReport:
    """Mean log dQ/dP over on-policy paths (reverse KL up to log Z)."""
    if traj.detached:
        raise ValueError("reverse KL needs an on-policy, non-detached trajectory")
    v = _check_finite(traj.log_rnd.mean(), "rkl loss")
    return LossReport(v, traj.log_rnd)


def lv_loss(traj: Trajectory) -> LossReport:
    """Unbiased sample variance of the per-path log RND."""
    if traj.log_rnd.shape[0] < 2:
        raise ValueError("log-variance loss needs at least two paths")
    v = _check_finite(traj.log_rnd.var(unbiased=True), "lv loss")
    return LossReport(v, traj.log_rnd)


def tb_loss(traj: Trajectory, k: Tensor) -> LossReport:
    """Mean squared deviation of the log RND from a learnable baseline k."""
    v = _check_finite(((traj.log_rnd - k) ** 2).mean(), "tb loss")
    return LossReport(v, traj.log_rnd, {"k": float(torch.as_tensor(k).detach())})


def _balance_potentials(traj: Trajectory, log_pis: Tensor, k: Tensor) -> Tensor:
    """a_i = log pi_i(x_i) - sum_{m<i} r_m + k_i, shape (N+1, B).

    The residual of segment (i, j) is a_i - a_j.
    """
    n = traj.n_steps
    if log_pis.shape[0] != n + 1:
        raise ValueError("need one log-density row per grid point")
    if k.shape[0] != n + 1:
        raise ValueError("need one baseline per grid point")
    prefix = torch.cat([torch.zeros_like(traj.step_log_ratio[:1]), traj.step_log_ratio.cumsum(0)])
    return log_pis - prefix + k[:, None]


def stb_loss(traj: Trajectory, log_pis: Tensor, k: Tensor, unit_segments: bool = False) -> LossReport:
    """Sub-trajectory balance summed over all segments 0 <= i < j <= N, averaged over paths.

    Args:
        traj: trajectory whose ``step_log_ratio`` holds log p_F - log p_B per step.
        log_pis: (N+1, B) log intermediate densities at the visited states,
            with row 0 the prior and row N the unnormalized target.
        k: (N+1,) learnable log-normalizer baselines.
        unit_segments: keep only j = i + 1 (detailed balance).
    """
    a = _balance_potentials(traj, log_pis, k)
    if unit_segments:
        resid = a[:-1] - a[1:]
        total = (resid**2).sum(0)
    else:
        diff = a[:, None, :] - a[None, :, :]
        upper = torch.triu(torch.ones(a.shape[0], a.shape[0], dtype=torch.bool), diagonal=1)
        total = (diff[upper] ** 2).sum(0)
    return LossReport(_check_finite(total.mean(), "balance loss"), traj.log_rnd)


def db_loss(traj: Trajectory, log_pis: Tensor, k: Tensor) -> LossReport:
    return stb_loss(traj, log_pis, k, unit_segments=True)


def geometric_log_pis(traj: Trajectory, prior: GaussianSpec, target: TargetDensity,
                      exponent: Exponent | None = None) -> Tensor:
    """Prescribed intermediate log densities b_i log p~ + (1 - b_i) log p_prior at the grid states.

    Endpoint rows reuse the trajectory's boundary terms, so they cost no
    target calls.
    """
    exponent = exponent or Exponent(float(traj.times[-1]))
    rows = [traj.log_start]
    for i in range(1, traj.n_steps):
        x = traj.states[i]
        b = float(exponent(float(traj.times[i])))
        rows.append(b * target.log_unnorm(x) + (1 - b) * prior.log_prob(x))
    rows.append(traj.log_end)
    return torch.stack(rows)


# ---------------------------------------------------------------------------
# marginal objectives

def divergence(f: Tensor, x: Tensor) -> Tensor:
    """Exact divergence of f(x) by one backward pass per output coordinate."""
    div = torch.zeros(x.shape[0], dtype=DTYPE)
    for i in range(x.shape[1]):
        div = div + torch.autograd.grad(f[:, i].sum(), x, create_graph=True)[0][:, i]
    return div


def pinn_residual(model: Callable, path: AnnealingPath, free_energy: TimeScalar | None,
                  x: Tensor, t: Tensor) -> Tensor:
    """div f + grad log pi_t . f + d/dt log pi_t + dF/dt at each (x, t)."""
    x = x.detach().requires_grad_(True)
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(x.shape[0]).clone()
    f = model(x, t)
    res = divergence(f, x)
    with torch.no_grad():
        score = path.grad_log_pi(x, t)
        dt_log = path.dt_log_pi(x, t)
    res = res + (score * f).sum(-1) + dt_log
    if free_energy is not None:
        tt = t.detach().requires_grad_(True)
        dF = torch.autograd.grad(free_energy(tt).sum(), tt, create_graph=True)[0]
        res = res + dF
    return res


def pinn_loss(model: Callable, path: AnnealingPath, free_energy: TimeScalar | None,
              x: Tensor, t: Tensor) -> LossReport:
    """Mean squared continuity-equation residual; no dependence on the noise level."""
    res = pinn_residual(model, path, free_energy, x, t)
    return LossReport(_check_finite((res**2).mean(), "pinn loss"), aux={"max_abs_residual": float(res.detach().abs().max())})


def am_loss(model: DriftModel, x: Tensor, t: Tensor, prior_samples: Tensor, target_samples: Tensor,
            T: float = 1.0) -> LossReport:
    """Action matching: T E[0.5 |grad phi|^2 + d/dt phi] + E_prior[phi_0] - E_target[phi_T].

    The last expectation needs exact target samples.
    """
    if model.kind != "potential":
        raise ValueError("action matching needs a potential model")
    x = x.detach().requires_grad_(True)
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(x.shape[0]).clone().requires_grad_(True)
    phi = model.potential(x, t)
    gx, gt = torch.autograd.grad(phi.sum(), (x, t), create_graph=True)
    inner = T * (0.5 * (gx**2).sum(-1) + gt).mean()
    n0, n1 = prior_samples.shape[0], target_samples.shape[0]
    boundary = model.potential(prior_samples, torch.zeros(n0, dtype=DTYPE)).mean() - model.potential(
        target_samples, torch.full((n1,), T, dtype=DTYPE)
    ).mean()
    return LossReport(_check_finite(inner + boundary, "am loss"), aux={"boundary": float(boundary.detach())})


# ---------------------------------------------------------------------------
# Monte Carlo score estimators

def _per_point(v, n: int) -> Tensor:
    v = torch.as_tensor(v, dtype=DTYPE)
    return v.expand(n).clone() if v.ndim == 0 else v.reshape(n)


def snis_score(
    target: TargetDensity,
    x_t: Tensor,
    t,
    sched: NoiseSchedule | VESchedule,
    m: int = 100,
    seed: int = 0,
    return_info: bool = False,
):
    """Self-normalized importance sampling estimate of the noised score.

    With X_t = a X_T + sqrt(var) eps, proposals X_T ~ N(x_t / a, var / a^2)
    are weighted by p~(X_T), and the estimate is (1 / a) sum_n w_n grad log p~(X_T^n).
    ``t`` is the sampling time (scalar or per point).
    """
    if m < 1:
        raise ValueError("need at least one proposal")
    b, d = x_t.shape
    gen = torch.Generator().manual_seed(seed)
    tt = _per_point(t, b)
    a = _per_point(sched.cond_scale(tt) if not isinstance(sched, VESchedule) else 1.0, b)[:, None]
    var = _per_point(sched.cond_var(tt), b)[:, None]
    eps = torch.randn(m, b, d, generator=gen, dtype=DTYPE)
    props = (x_t / a)[None] + eps * (var.sqrt() / a)[None]
    flat = props.reshape(m * b, d)
    logw = target.log_unnorm(flat).reshape(m, b)
    grads = target.grad_log(flat).reshape(m, b, d)
    if not torch.isfinite(logw.max(0).values).all():
        raise FloatingPointError("all importance weights underflow")
    w = torch.softmax(logw, dim=0)
    score = (w[..., None] * grads).sum(0) / a
    if not return_info:
        return score
    ess = 1.0 / (w**2).sum(0)
    return score, {"weights": w, "ess": ess}


def idem_regression(model: Callable, target: TargetDensity, sched, x: Tensor, t: Tensor, m: int = 100,
                    seed: int = 0) -> LossReport:
    """Mean squared error between the network and the SNIS score estimate on a buffer."""
    if x.shape[0] == 0:
        raise ValueError("empty buffer")
    with torch.no_grad():
        est, info = snis_score(target, x, t, sched, m, seed, return_info=True)
    pred = model(x.detach(), _per_point(t, x.shape[0]))
    v = ((pred - est) ** 2).sum(-1).mean()
    return LossReport(_check_finite(v, "idem loss"), aux={"ess": float(info["ess"].mean())})


def sfs_control(target: TargetDensity, x: Tensor, t: float, T: float = 1.0, sigma_init: float = 0.0,
                m: int = 1000, seed: int = 0) -> Tensor:
    """Monte Carlo optimal control for dX = u dt + dW started at N(0, sigma_init^2 I).

    u(x, t) = E[grad (p~/nu)(x + sqrt(T - t) Z)] / E[(p~/nu)(x + sqrt(T - t) Z)]
    with nu = N(0, (T + sigma_init^2) I), the uncontrolled terminal law.
    """
    gen = torch.Generator().manual_seed(seed)
    b, d = x.shape
    tau = T - t
    c = T + sigma_init**2
    eps = torch.randn(m, b, d, generator=gen, dtype=DTYPE)
    y = (x[None] + math.sqrt(max(tau, 0.0)) * eps).reshape(m * b, d)
    log_ref = -0.5 * (y**2).sum(-1) / c
    logw = (target.log_unnorm(y) - log_ref).reshape(m, b)
    if not torch.isfinite(logw.max(0).values).all():
        raise FloatingPointError("importance weights underflow")
    grad_ratio = (target.grad_log(y) + y / c).reshape(m, b, d)
    w = torch.softmax(logw, dim=0)
    return (w[..., None] * grad_ratio).sum(0)


# ---------------------------------------------------------------------------
# normalizing-flow objectives (simulation free)

def stratified_times(T: float, k: int = N_TIME_STRATA, generator: torch.Generator | None = None) -> Tensor:
    u = torch.rand(k, generator=generator, dtype=DTYPE)
    return (torch.arange(k, dtype=DTYPE) + u) * (T / k)


def _time_batch(T, n_times, n, generator):
    ts = stratified_times(T, n_times, generator)
    return ts.repeat_interleave(n)


def terminal_kl(flow: FlowMap, target: TargetDensity, n: int, generator: torch.Generator | None = None) -> Tensor:
    """E_{q_T}[log q_T - log p~]; equals KL(q_T || p) - log Z."""
    xb = flow.sample_base(n, generator)
    x, log_det = flow(xb, flow.T)
    return (flow.base.log_prob(xb) - log_det - target.log_unnorm(x)).mean()


def nf_dds_loss(flow: FlowMap, target: TargetDensity, sched: NoiseSchedule, n_times: int = N_TIME_STRATA,
                n: int = 16, seed: int = 0, n_terminal: int | None = None) -> LossReport:
    """Path KL between the flow-induced diffusion and the VP noising process.

    int_0^T 1/(4 v^2 beta_{T-t}) E_q |v_t - v^2 beta_{T-t} grad log q_t - beta_{T-t} x|^2 dt
    + E_{q_T}[log q_T - log p~].
    """
    gen = torch.Generator().manual_seed(seed)
    t = _time_batch(sched.T, n_times, n, gen)
    x, vel = flow.push_with_velocity(flow.sample_base(t.shape[0], gen), t)
    score = flow.score(x, t)
    beta = sched.beta(sched.T - t)[:, None]
    resid = vel - sched.v**2 * beta * score - beta * x
    integrand = (resid**2).sum(-1) / (4.0 * sched.v**2 * beta[:, 0])
    running = sched.T * integrand.mean()
    term = terminal_kl(flow, target, n_terminal or n_times * n, gen)
    return LossReport(_check_finite(running + term, "nfdds loss"),
                      aux={"running": float(running.detach()), "terminal": float(term.detach())})


NF_CMCD_WEIGHTS = ("girsanov", "inverse_sigma", "unit")


def nf_cmcd_loss(flow: FlowMap, path: AnnealingPath, sigma: float | Callable[[float], float],
                 n_times: int = N_TIME_STRATA, n: int = 16, seed: int = 0, weight: str = "girsanov",
                 n_terminal: int | None = None) -> LossReport:
    """Weighted Fisher divergence between the flow marginals and pi_t, plus the terminal KL.

    ``weight='girsanov'`` multiplies |sigma^2 (grad log q - grad log pi)|^2 by
    1/(4 sigma^2), the exact path-KL rate for diffusion coefficient sigma sqrt(2).
    """
    if weight not in NF_CMCD_WEIGHTS:
        raise ValueError(f"unknown weight {weight!r}")
    sig = sigma if callable(sigma) else (lambda s, c=float(sigma): c)
    gen = torch.Generator().manual_seed(seed)
    t = _time_batch(path.T, n_times, n, gen)
    x, _ = flow(flow.sample_base(t.shape[0], gen), t)
    s2 = torch.stack([torch.as_tensor(sig(float(tt)), dtype=DTYPE) for tt in t]) ** 2
    diff = s2[:, None] * (flow.score(x, t) - path.grad_log_pi(x, t))
    sq = (diff**2).sum(-1)
    if weight == "girsanov":
        sq = sq / (4.0 * s2)
    elif weight == "inverse_sigma":
        sq = sq / s2.sqrt()
    running = path.T * sq.mean()
    term = terminal_kl(flow, path.target, n_terminal or n_times * n, gen)
    return LossReport(_check_finite(running + term, "nfcmcd loss"),
                      aux={"running": float(running.detach()), "terminal": float(term.detach())})
