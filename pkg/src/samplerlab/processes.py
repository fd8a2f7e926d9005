"""SDE specifications, Euler-Maruyama simulation and path-space log likelihood ratios.

Every process has the form dX = drift(X, t) dt + sigma(t) sqrt(2) dW on [0, T].
A *sampling* process runs forward in the sampling clock t. Its *target*
process is described in its own clock s = T - t: it starts from the target
density and its time reversal is what the sampler tries to match.

For a grid x_0, ..., x_N in the sampling clock the log Radon-Nikodym
derivative is

    log q_prior(x_0) - log p~(x_N)
        + sum_k [ log N(x_{k+1}; x_k + a(x_k, t_k) dt, 2 sig_Q(t_k + dt/2)^2 dt)
                  - log N(x_k; x_{k+1} + g(x_{k+1}, s_{k+1}) dt, 2 sig_P(s_{k+1} + dt/2)^2 dt) ]

with a the sampling drift, g the target-process drift and s_{k+1} = T - t_{k+1}.
Drifts are taken at the left end of each step in the respective clock; noise
scales at the step midpoint, so both kernels of a step share one variance
(exact for schedules with sigma^2 linear in time).
Because p~ is unnormalized, exp(-log_rnd) is an unbiased estimate of Z under Q.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch
from torch import Tensor

from .models import TargetQuery
from .schedules import AnnealingPath, GeometricPath, NoiseSchedule, VESchedule
from .targets import DTYPE, LOG_2PI, GaussianSpec, TargetDensity

DriftFn = Callable[[Tensor, float, Optional[TargetQuery]], Tensor]
ScoreFn = Callable[[Tensor, float], Tensor]

FAMILIES = ("pbm", "vp_reversal", "ve_reversal", "escorted", "annealed", "nf_induced", "custom")


@dataclass
class ProcessSpec:
    """One SDE on [0, T].

    Attributes:
        drift: ``drift(x, t, query)``; ``query`` is a :class:`TargetQuery`
            at ``x`` for the energy target (may be ignored).
        sigma: t -> noise scale; the diffusion coefficient is sigma * sqrt(2).
        T: horizon.
        family: tag describing the construction.
        start: initial density (``log_prob`` / ``sample``). For a target
            process this is the unnormalized target itself.
        point_mass: if set, the process starts deterministically here and
            ``start`` is ignored.
        energy: target density whose evaluations the drift consumes.
        score: optional marginal score ``score(x, t)`` in this process's clock,
            used by :func:`reverse` when no score is passed.
    """

    drift: DriftFn
    sigma: Callable[[float], float]
    T: float = 1.0
    family: str = "custom"
    start: object = None
    point_mass: Optional[Tensor] = None
    energy: Optional[TargetDensity] = None
    score: Optional[ScoreFn] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown process family {self.family!r}")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.start is None and self.point_mass is None:
            raise ValueError("process needs a start density or a point mass")

    def sample_start(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        if self.point_mass is not None:
            return self.point_mass.to(DTYPE).expand(n, -1).clone()
        return self.start.sample(n, generator)


@dataclass
class Trajectory:
    """Simulated paths on a uniform grid, stored in the sampling clock."""

    times: Tensor  # (N+1,)
    states: Tensor  # (N+1, B, d)
    noises: Tensor  # (N, B, d)
    step_log_ratio: Tensor  # (N, B): forward minus backward step log-densities
    log_start: Tensor  # (B,)
    log_end: Tensor  # (B,) log p~ at the final state
    log_rnd: Tensor  # (B,)
    energy_calls: int
    detached: bool

    @property
    def n_steps(self) -> int:
        return self.noises.shape[0]

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def _gauss_logpdf(resid: Tensor, var: float) -> Tensor:
    d = resid.shape[-1]
    return -0.5 * ((resid**2).sum(-1) / var + d * (LOG_2PI + math.log(var)))


def _query(energy: TargetDensity | None, x: Tensor) -> TargetQuery:
    return TargetQuery(energy, x)


def _energy_of(p: ProcessSpec, q: ProcessSpec) -> TargetDensity | None:
    return q.energy or p.energy or (q.start if isinstance(q.start, TargetDensity) else None)


def _check_pair(p: ProcessSpec, q: ProcessSpec) -> None:
    if abs(p.T - q.T) > 1e-12:
        raise ValueError("sampling and target processes have different horizons")


def _path_log_ratio(p: ProcessSpec, q: ProcessSpec, xs: list[Tensor], queries: list[TargetQuery],
                    drifts: list[Tensor], dt: float, forward_ref: bool = False) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Per-step forward-minus-backward log densities plus boundary terms."""
    T, n_steps = p.T, len(xs) - 1
    if forward_ref:
        return _forward_log_ratio(p, q, xs, queries, drifts, dt)
    steps = []
    for k in range(n_steps):
        t_k, t_next = k * dt, (k + 1) * dt
        fwd = _gauss_logpdf(xs[k + 1] - xs[k] - drifts[k] * dt, 2.0 * p.sigma(t_k + 0.5 * dt) ** 2 * dt)
        if k == 0 and p.point_mass is not None:
            # delta start: the backward kernel's last step is itself a point mass
            # at the same location, so this term and log q_prior cancel.
            bwd = torch.zeros_like(fwd)
        else:
            s = T - t_next
            g = q.drift(xs[k + 1], s, queries[k + 1])
            bwd = _gauss_logpdf(xs[k] - xs[k + 1] - g * dt, 2.0 * q.sigma(s + 0.5 * dt) ** 2 * dt)
        steps.append(fwd - bwd)
    step_log_ratio = torch.stack(steps)
    if p.point_mass is not None:
        log_start = torch.zeros(xs[0].shape[0], dtype=DTYPE)
    else:
        log_start = p.start.log_prob(xs[0])
    log_end = queries[-1].log_p if q.energy is not None else q.start.log_prob(xs[-1])
    return step_log_ratio, log_start, log_end, log_start - log_end + step_log_ratio.sum(0)


def _forward_log_ratio(p, q, xs, queries, drifts, dt):
    """Both processes run forward in the same clock; compare their kernels and start densities.

    Here ``log_start``/``log_end`` hold the two start densities at x_0.
    """
    steps = []
    for k in range(len(xs) - 1):
        t_k = k * dt
        resid_p = xs[k + 1] - xs[k] - drifts[k] * dt
        resid_q = xs[k + 1] - xs[k] - q.drift(xs[k], t_k, queries[k]) * dt
        tm = t_k + 0.5 * dt
        steps.append(_gauss_logpdf(resid_p, 2.0 * p.sigma(tm) ** 2 * dt) - _gauss_logpdf(resid_q, 2.0 * q.sigma(tm) ** 2 * dt))
    step_log_ratio = torch.stack(steps)
    zeros = torch.zeros(xs[0].shape[0], dtype=DTYPE)
    if p.point_mass is not None or p.start is q.start:
        return step_log_ratio, zeros, zeros, step_log_ratio.sum(0)
    log_p0 = p.start.log_prob(xs[0])
    log_q0 = q.start.log_prob(xs[0])
    return step_log_ratio, log_p0, log_q0, log_p0 - log_q0 + step_log_ratio.sum(0)


def simulate(
    p: ProcessSpec,
    q: ProcessSpec,
    n: int,
    steps: int = 128,
    seed: int | None = 0,
    detach: bool = False,
    x0: Tensor | None = None,
    generator: torch.Generator | None = None,
    forward_ref: bool = False,
) -> Trajectory:
    """Simulate the sampling process ``p`` and score paths against target process ``q``.

    Args:
        p: sampling process.
        q: target process (own clock).
        n: number of paths.
        steps: Euler-Maruyama steps.
        seed: seed of a private generator; ignored if ``generator`` is given.
        detach: cut the gradient through the states, keeping it through
            drift evaluations (off-policy objectives).
        x0: optional initial states overriding the start density.
        forward_ref: treat ``q`` as a forward process in the sampling clock;
            the boundary term is then log p_start(x_0) - log q_start(x_0),
            and vanishes when both share the same start object.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_pair(p, q)
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    energy = _energy_of(p, q)
    before = energy.counter.total if energy is not None else 0
    dt = p.T / steps
    x = p.sample_start(n, gen) if x0 is None else x0.to(DTYPE)
    if detach:
        x = x.detach()
    xs, queries, drifts, noises = [x], [_query(energy, x)], [], []
    for k in range(steps):
        t_k = k * dt
        a = p.drift(xs[k], t_k, queries[k])
        eps = torch.randn(xs[k].shape, generator=gen, dtype=DTYPE)
        x_next = xs[k] + a * dt + p.sigma(t_k + 0.5 * dt) * math.sqrt(2.0 * dt) * eps
        if detach:
            x_next = x_next.detach()
        if not torch.isfinite(x_next).all():
            raise FloatingPointError(f"non-finite state at step {k + 1}")
        drifts.append(a)
        noises.append(eps)
        xs.append(x_next)
        queries.append(_query(energy, x_next))
    step_lr, log_start, log_end, log_rnd = _path_log_ratio(p, q, xs, queries, drifts, dt, forward_ref)
    calls = (energy.counter.total - before) if energy is not None else 0
    return Trajectory(
        times=torch.linspace(0.0, p.T, steps + 1, dtype=DTYPE),
        states=torch.stack(xs),
        noises=torch.stack(noises),
        step_log_ratio=step_lr,
        log_start=log_start,
        log_end=log_end,
        log_rnd=log_rnd,
        energy_calls=calls,
        detached=detach,
    )


def rescore(p: ProcessSpec, q: ProcessSpec, traj: Trajectory) -> Trajectory:
    """Recompute the log-RND of fixed (detached) paths under the current drifts.

    Used for off-policy objectives that revisit stored paths after the
    parameters moved; the states and noises are copied from ``traj``.
    """
    _check_pair(p, q)
    energy = _energy_of(p, q)
    before = energy.counter.total if energy is not None else 0
    dt = p.T / traj.n_steps
    xs = [x.detach() for x in traj.states]
    queries = [_query(energy, x) for x in xs]
    drifts = [p.drift(xs[k], k * dt, queries[k]) for k in range(traj.n_steps)]
    step_lr, log_start, log_end, log_rnd = _path_log_ratio(p, q, xs, queries, drifts, dt)
    calls = (energy.counter.total - before) if energy is not None else 0
    return Trajectory(traj.times, traj.states.detach(), traj.noises, step_lr, log_start, log_end, log_rnd, calls, True)


def simulate_backward(
    p: ProcessSpec,
    q: ProcessSpec,
    y0: Tensor,
    steps: int = 128,
    seed: int | None = 0,
    generator: torch.Generator | None = None,
) -> Trajectory:
    """Run the target process ``q`` from ``y0`` and score the paths against ``p``.

    The returned trajectory is expressed in the sampling clock (states[0] is
    the end of the target process); ``-log_rnd`` averaged over paths is the
    evidence upper bound when ``y0`` holds exact target samples.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_pair(p, q)
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    energy = _energy_of(p, q)
    before = energy.counter.total if energy is not None else 0
    ds = q.T / steps
    with torch.no_grad():
        ys, noises = [y0.to(DTYPE)], []
        for j in range(steps):
            s_j = j * ds
            eps = torch.randn(ys[j].shape, generator=gen, dtype=DTYPE)
            y_next = ys[j] + q.drift(ys[j], s_j, _query(energy, ys[j])) * ds + q.sigma(s_j + 0.5 * ds) * math.sqrt(2.0 * ds) * eps
            if not torch.isfinite(y_next).all():
                raise FloatingPointError(f"non-finite state at step {j + 1}")
            ys.append(y_next)
            noises.append(eps)
        xs = ys[::-1]
        if p.point_mass is not None:
            xs[0] = p.point_mass.to(DTYPE).expand_as(xs[0]).clone()
        queries = [_query(energy, x) for x in xs]
        drifts = [p.drift(xs[k], k * ds, queries[k]) for k in range(steps)]
        step_lr, log_start, log_end, log_rnd = _path_log_ratio(p, q, xs, queries, drifts, ds)
    calls = (energy.counter.total - before) if energy is not None else 0
    return Trajectory(
        times=torch.linspace(0.0, p.T, steps + 1, dtype=DTYPE),
        states=torch.stack(xs),
        noises=torch.stack(noises[::-1]),
        step_log_ratio=step_lr,
        log_start=log_start,
        log_end=log_end,
        log_rnd=log_rnd,
        energy_calls=calls,
        detached=True,
    )


def simulate_process(p: ProcessSpec, n: int, steps: int = 128, seed: int = 0,
                     x0: Tensor | None = None, keep: bool = False) -> Tensor:
    """Plain Euler-Maruyama in the process's own clock, without likelihood ratios.

    Returns the final states, or all states (N+1, B, d) when ``keep``.
    """
    gen = torch.Generator().manual_seed(seed)
    dt = p.T / steps
    x = p.sample_start(n, gen) if x0 is None else x0.to(DTYPE)
    out = [x]
    for k in range(steps):
        t = k * dt
        eps = torch.randn(x.shape, generator=gen, dtype=DTYPE)
        x = x + p.drift(x, t, _query(p.energy, x)) * dt + p.sigma(t + 0.5 * dt) * math.sqrt(2.0 * dt) * eps
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite state at step {k + 1}")
        if keep:
            out.append(x)
    return torch.stack(out) if keep else x


def replay(p: ProcessSpec, x0: Tensor, noises: Tensor, energy: TargetDensity | None = None) -> Tensor:
    """Rebuild the states of a trajectory from its initial state and noises."""
    n_steps = noises.shape[0]
    dt = p.T / n_steps
    xs = [x0]
    with torch.no_grad():
        for k in range(n_steps):
            t = k * dt
            a = p.drift(xs[k], t, _query(energy or p.energy, xs[k]))
            xs.append(xs[k] + a * dt + p.sigma(t + 0.5 * dt) * math.sqrt(2.0 * dt) * noises[k])
    return torch.stack(xs)


def reverse(p: ProcessSpec, marginal_score: ScoreFn | None = None, start=None) -> ProcessSpec:
    """Time reversal by Nelson's relation.

    The reversed process has drift -(b(x, T - t) - 2 sigma(T - t)^2 score(x, T - t))
    and noise scale sigma(T - t). The returned spec carries the time-flipped
    score, so reversing twice restores the original drift.
    """
    score = marginal_score or p.score
    if score is None:
        raise ValueError("time reversal needs the marginal score")
    T = p.T

    def drift(x, t, query=None):
        s = T - t
        return -(p.drift(x, s, query) - 2.0 * p.sigma(s) ** 2 * score(x, s))

    def sigma(t):
        return p.sigma(T - t)

    def flipped(x, t):
        return score(x, T - t)

    return ProcessSpec(drift, sigma, T, p.family, start=start if start is not None else p.start,
                       point_mass=p.point_mass if start is None else None, energy=p.energy, score=flipped)


# ---------------------------------------------------------------------------
# sampler constructions; each returns (sampling process, target process)

PBM_MIN_GAP = 0.5 * 1e-4


def _const(c: float) -> Callable[[float], float]:
    return lambda t: c


def make_pis(model, target: TargetDensity, T: float = 1.0) -> tuple[ProcessSpec, ProcessSpec]:
    """Delta start at the origin, sigma = 1/sqrt(2); the target process is a pinned Brownian motion."""
    dim = target.dim
    sig = 1.0 / math.sqrt(2.0)

    def drift(x, t, query=None):
        return model(x, t, query)

    def pbm_drift(y, s, query=None):
        # the gap is floored at half of the smallest grid step we accept
        return -y / max(T - s, PBM_MIN_GAP)

    p = ProcessSpec(drift, _const(sig), T, "pbm", point_mass=torch.zeros(dim, dtype=DTYPE), energy=target)
    q = ProcessSpec(pbm_drift, _const(sig), T, "pbm", start=target, energy=target)
    return p, q


def make_dds(model, target: TargetDensity, sched: NoiseSchedule) -> tuple[ProcessSpec, ProcessSpec]:
    """Learned reversal of the VP process dY = -beta Y ds + v sqrt(2 beta) dW.

    Sampling drift: beta_{T-t} x + 2 sigma_t^2 f(x, t) with sigma_t = v sqrt(beta_{T-t}).
    """
    T = sched.T
    prior = GaussianSpec.isotropic(target.dim, sched.prior)

    def drift(x, t, query=None):
        b = sched.beta(T - t)
        return b * x + 2.0 * sched.sigma(t) ** 2 * model(x, t, query)

    def vp_drift(y, s, query=None):
        return -sched.beta(s) * y

    def vp_sigma(s):
        return sched.v * math.sqrt(sched.beta(s))

    p = ProcessSpec(drift, sched.sigma, T, "vp_reversal", start=prior, energy=target)
    q = ProcessSpec(vp_drift, vp_sigma, T, "vp_reversal", start=target, energy=target)
    return p, q


def dds_output_scale(sched: NoiseSchedule) -> Callable[[float], float]:
    """Fixed output factor 1 / ((1 - lam) + v^2 lam) at sampling time t.

    This is the ratio between the noised and clean scores of a unit-variance
    Gaussian mode. It is 1 at the data end and about 1/v^2 near the prior, which
    keeps explicit Euler steps stable when v is large.
    """

    def weight(t):
        lam = sched.lam(sched.T - t)
        return 1.0 / ((1.0 - lam) + sched.v**2 * lam)

    return weight


def make_idem_process(model, target: TargetDensity, T: float = 1.0) -> tuple[ProcessSpec, ProcessSpec]:
    """Reversal of the VE process dY = sqrt(2 s) dW; the network regresses the noised score."""
    sched = VESchedule(T)
    prior = GaussianSpec.isotropic(target.dim, sched.prior)

    def drift(x, t, query=None):
        return 2.0 * sched.sigma(t) ** 2 * model(x, t, query)

    def ve_drift(y, s, query=None):
        return torch.zeros_like(y)

    def ve_sigma(s):
        return math.sqrt(max(s, 0.0))

    p = ProcessSpec(drift, sched.sigma, T, "ve_reversal", start=prior, energy=target)
    q = ProcessSpec(ve_drift, ve_sigma, T, "ve_reversal", start=target, energy=target)
    return p, q


def path_score(path: AnnealingPath, x: Tensor, t: float, query: TargetQuery | None) -> Tensor:
    """grad log pi_t(x), cached on the state's query so each state pays once per time."""
    if query is None:
        return path.grad_log_pi(x, t)
    key = ("path_grad", float(t))
    if key not in query.extra:
        if isinstance(path, GeometricPath) and query.target is path.target:
            query.extra[key] = path.grad_from_target(x, t, query.grad)
        else:
            query.extra[key] = path.grad_log_pi(x, t)
    return query.extra[key]


def make_escorted(
    model,
    path: AnnealingPath,
    sigma: float | Callable[[float], float],
    langevin: bool = True,
    prior: GaussianSpec | None = None,
) -> tuple[ProcessSpec, ProcessSpec]:
    """Escorted transport along an annealing path.

    With Langevin terms the sampling drift is f + sigma^2 grad log pi_t and
    the target process (own clock s) has drift -(f - sigma^2 grad log pi) at
    t = T - s. Without them the sampling drift is f alone and the target
    drift is -(f - 2 sigma^2 grad log pi). ``model=None`` gives f = 0.
    """
    sig = sigma if callable(sigma) else _const(float(sigma))
    T = path.T
    prior = prior if prior is not None else path.prior
    target = path.target
    c_back = 1.0 if langevin else 2.0

    def f(x, t, query):
        return torch.zeros_like(x) if model is None else model(x, t, query)

    def drift(x, t, query=None):
        out = f(x, t, query)
        if langevin:
            out = out + sig(t) ** 2 * path_score(path, x, t, query)
        return out

    def back_drift(y, s, query=None):
        t = T - s
        return -(f(y, t, query) - c_back * sig(t) ** 2 * path_score(path, y, t, query))

    def back_sigma(s):
        return sig(T - s)

    family = "annealed" if model is None else "escorted"
    p = ProcessSpec(drift, sig, T, family, start=prior, energy=target, meta={"langevin": langevin})
    q = ProcessSpec(back_drift, back_sigma, T, family, start=target, energy=target)
    return p, q


def make_mcd(path: AnnealingPath, sigma: float | Callable[[float], float]) -> tuple[ProcessSpec, ProcessSpec]:
    """Annealed Langevin forward process sigma^2 grad log pi_t with its matching backward kernel."""
    return make_escorted(None, path, sigma, langevin=True)


def make_nf_induced(flow, target: TargetDensity, sched: NoiseSchedule) -> tuple[ProcessSpec, ProcessSpec]:
    """Diffusion whose marginals are a time-indexed flow's, paired with the VP noising process.

    Sampling drift velocity + sigma_t^2 grad log q_t with sigma_t = v sqrt(beta_{T-t}),
    started at the flow's t = 0 marginal. The flow is differentiated even
    when the caller runs under ``torch.no_grad``.
    """
    from .flows import FlowMarginal

    T = sched.T

    def drift(x, t, query=None):
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            out = flow.velocity(xg, t) + sched.sigma(t) ** 2 * flow.score(xg, t)
        return out if torch.is_grad_enabled() else out.detach()

    def vp_drift(y, s, query=None):
        return -sched.beta(s) * y

    def vp_sigma(s):
        return sched.v * math.sqrt(sched.beta(s))

    p = ProcessSpec(drift, sched.sigma, T, "nf_induced", start=FlowMarginal(flow, 0.0), energy=target)
    q = ProcessSpec(vp_drift, vp_sigma, T, "vp_reversal", start=target, energy=target)
    return p, q


# ---------------------------------------------------------------------------
# export

def export_trajectory(traj: Trajectory, path: str | Path) -> None:
    """Binary dump of all trajectory arrays."""
    torch.save(
        {k: getattr(traj, k).detach() if isinstance(getattr(traj, k), Tensor) else getattr(traj, k)
         for k in traj.__dataclass_fields__},
        path,
    )


def load_trajectory(path: str | Path) -> Trajectory:
    return Trajectory(**torch.load(path, map_location="cpu", weights_only=False))


def export_slices(traj: Trajectory, path: str | Path, fractions=(0.0, 0.8, 1.0)) -> None:
    """CSV of states at the grid points closest to the given fractions of T."""
    n = traj.n_steps
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = traj.states.shape[-1]
        w.writerow(["t", "path", *[f"x{i}" for i in range(dim)]])
        for frac in fractions:
            k = int(round(frac * n))
            t = traj.times[k].item()
            for b, row in enumerate(traj.states[k].detach().tolist()):
                w.writerow([repr(t), b, *[repr(v) for v in row]])
