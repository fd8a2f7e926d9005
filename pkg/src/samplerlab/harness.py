"""Config-driven experiment runner: sampler assembly, training loop, early stopping and reports."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor, nn

from . import config as config_mod
from .flows import FlowMap, FlowMarginal
from .mcmc import geometric_ladder, posthoc_fit, pt_run, sample_posthoc
from .metrics import (
    MetricsReport,
    MMDReference,
    atomic_write_text,
    evaluate,
    mmd,
    rows_to_csv,
    write_csv,
    write_json,
)
from .models import (
    LG_HIDDEN,
    PLAIN_HIDDEN,
    DriftModel,
    TimeScalar,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    LossReport,
    am_loss,
    db_loss,
    idem_regression,
    lv_loss,
    nf_cmcd_loss,
    nf_dds_loss,
    pinn_loss,
    rkl_loss,
    stb_loss,
    stratified_times,
    tb_loss,
)
from .processes import (
    ProcessSpec,
    dds_output_scale,
    make_dds,
    make_escorted,
    make_idem_process,
    make_mcd,
    make_nf_induced,
    make_pis,
    simulate,
    simulate_process,
)
from .schedules import Exponent, ModePath, VESchedule, make_path, vp_schedule
from .targets import DTYPE, GaussianSpec, TargetDensity, make_target

log = logging.getLogger(__name__)

# consecutive bad evaluation windows before a run is declared unstable
DIVERGENCE_WINDOWS = 3
SERIES_FIELDS = ("iter", "energy_calls", "elbo", "elbo_se", "eubo", "eubo_se", "mmd", "loss", "status")
BUDGET_FIELDS = ("run_id", "kind", "energy_calls", "mmd")
# hidden widths when the config leaves model.hidden empty
DEFAULT_HIDDEN = {"cmcd": (128, 128, 128), "pinn": (128, 128, 128), "am": (128, 128, 128),
                  "idem": (128, 128, 128), "pis": (128, 128, 128)}
EVAL_SEED_OFFSET = 7_777_777


class DivergenceError(RuntimeError):
    """Training became numerically unstable."""


def _model_kind(cfg: dict) -> str:
    if cfg["model.kind"]:
        return cfg["model.kind"]
    if cfg["sampler"] == "am":
        return "potential"
    if cfg["sampler"] in ("cmcd", "pinn"):
        # the Langevin term lives in the process, not in the network
        return "plain"
    return {"lg": "langevin_precond", "none": "plain", "energy_cond": "energy_conditioned"}[cfg["precond"]]


def _hidden(cfg: dict, kind: str) -> tuple[int, ...]:
    if cfg["model.hidden"]:
        return tuple(cfg["model.hidden"])
    if cfg["sampler"] in DEFAULT_HIDDEN:
        return DEFAULT_HIDDEN[cfg["sampler"]]
    return LG_HIDDEN if kind == "langevin_precond" else PLAIN_HIDDEN


def make_target_from_config(cfg: dict) -> TargetDensity:
    key = cfg["target"]
    if key == "gmm40":
        return make_target(key, seed=cfg["target.seed"])
    if key == "gauss":
        return make_target(key, dim=cfg["target.dim"], variance=cfg["target.variance"])
    return make_target(key)


def make_schedule(cfg: dict):
    return vp_schedule(cfg["T"], cfg["vp.beta_min"], cfg["vp.beta_max"], cfg["vp.v"])


def make_annealing_path(cfg: dict, target: TargetDensity):
    prior = GaussianSpec.isotropic(target.dim, cfg["prior.variance"])
    return make_path(cfg["path"], prior, target, Exponent(cfg["T"], cfg["anneal.kind"]))


@dataclass
class Sampler:
    """An assembled sampler: trainable modules, its process pair and a loss closure.

    ``loss(it)`` returns the training :class:`LossReport` for iteration ``it``;
    ``processes()`` returns the (sampling, target) pair used for evaluation.
    """

    cfg: dict
    target: TargetDensity
    modules: dict[str, nn.Module]
    processes: Callable[[], tuple[ProcessSpec, ProcessSpec]]
    loss: Callable[[int], LossReport] | None
    lr: float
    extras: dict = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules.values() for p in m.parameters()]

    def state(self) -> dict:
        return {k: m.state_dict() for k, m in self.modules.items()}

    def load_state(self, state: dict) -> None:
        for k, m in self.modules.items():
            m.load_state_dict(state[k])


class _Scalars(nn.Module):
    """Learnable log-normalizer baselines for the balance objectives."""

    def __init__(self, n: int):
        super().__init__()
        self.k = nn.Parameter(torch.zeros(n, dtype=DTYPE))


def _train_seed(cfg: dict, it: int) -> int:
    return cfg["seed"] * 1_000_003 + it


def _grid_log_pis(traj, density: Callable[[Tensor, float], Tensor]) -> Tensor:
    """Intermediate log densities at interior grid states; endpoints reuse the boundary terms."""
    rows = [traj.log_start]
    for i in range(1, traj.n_steps):
        rows.append(density(traj.states[i], float(traj.times[i])))
    rows.append(traj.log_end)
    return torch.stack(rows)


def _path_objective(cfg: dict, p: ProcessSpec, q: ProcessSpec, modules: dict,
                    density: Callable[[Tensor, float], Tensor] | None) -> Callable[[int], LossReport]:
    obj, n, steps = cfg["objective"], cfg["batch"], cfg["steps"]
    if obj == "tb":
        modules["baseline"] = _Scalars(1)
    elif obj in ("stb", "db"):
        if density is None:
            raise config_mod.ConfigError(f"objective {obj!r} needs intermediate densities")
        modules["baseline"] = _Scalars(steps + 1)

    def loss(it: int) -> LossReport:
        seed = _train_seed(cfg, it)
        if obj == "rkl":
            return rkl_loss(simulate(p, q, n, steps, seed=seed))
        traj = simulate(p, q, n, steps, seed=seed, detach=True)
        if obj == "lv":
            return lv_loss(traj)
        k = modules["baseline"].k
        if obj == "tb":
            return tb_loss(traj, k[0])
        log_pis = _grid_log_pis(traj, density)
        return stb_loss(traj, log_pis, k) if obj == "stb" else db_loss(traj, log_pis, k)

    return loss


def _random_grid_points(states: Tensor, dt: float, n: int, gen: torch.Generator) -> tuple[Tensor, Tensor]:
    """n (state, time) pairs drawn uniformly from a (K, B, d) state grid whose row k sits at time k * dt."""
    n_grid, b = states.shape[0], states.shape[1]
    ki = torch.randint(0, n_grid, (n,), generator=gen)
    bi = torch.randint(0, b, (n,), generator=gen)
    return states[ki, bi], ki.to(DTYPE) * dt


def build_sampler(cfg: dict, target: TargetDensity | None = None) -> Sampler:
    """Assemble model, processes and loss for a validated config."""
    config_mod.validate(cfg)
    torch.manual_seed(cfg["seed"])
    target = target or make_target_from_config(cfg)
    fam, T, dim = cfg["sampler"], cfg["T"], target.dim
    kind = _model_kind(cfg)
    hidden = _hidden(cfg, kind)
    tf = cfg["model.time_features"]
    lr = cfg["model.lr"] or learning_rate(f"{fam}.{cfg['objective']}")
    needs_target = kind in ("langevin_precond", "energy_conditioned")
    modules: dict[str, nn.Module] = {}

    def drift_model(output_scale=None) -> DriftModel:
        m = DriftModel(dim, kind, hidden, tf, target if needs_target else None, T, output_scale,
                       input_scale=cfg["model.input_scale"], net_gain=cfg["model.net_gain"])
        modules["model"] = m
        return m

    if fam == "dds":
        sched = make_schedule(cfg)
        model = drift_model(dds_output_scale(sched))
        p, q = make_dds(model, target, sched)
        prior = p.start
        density = lambda x, t: (t / T) * target.log_unnorm(x) + (1 - t / T) * prior.log_prob(x)  # noqa: E731
        loss = _path_objective(cfg, p, q, modules, density)
        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"schedule": sched})

    if fam == "pis":
        model = drift_model()
        p, q = make_pis(model, target, T)
        loss = _path_objective(cfg, p, q, modules, None)
        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr)

    if fam in ("cmcd", "mcd"):
        path = make_annealing_path(cfg, target)
        lg = cfg["precond"] != "none"
        if fam == "mcd":
            p, q = make_mcd(path, cfg["sigma"])
            return Sampler(cfg, target, modules, lambda: (p, q), None, lr, {"path": path})
        model = drift_model()
        p, q = make_escorted(model, path, cfg["sigma"], langevin=lg)
        loss = _path_objective(cfg, p, q, modules, path.log_pi)
        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"path": path})

    if fam == "idem":
        sched = VESchedule(T)
        model = drift_model(lambda t: 1.0 / (1.0 + sched.cond_var(t)))
        p, q = make_idem_process(model, target, T)
        buffer: dict = {}

        def loss(it: int) -> LossReport:
            gen = torch.Generator().manual_seed(_train_seed(cfg, it))
            if it % 10 == 0 or "states" not in buffer:
                with torch.no_grad():
                    buffer["states"] = simulate_process(p, cfg["batch"], cfg["steps"], _train_seed(cfg, it), keep=True)
            x, t = _random_grid_points(buffer["states"][:-1], T / cfg["steps"], cfg["batch"], gen)
            return idem_regression(model, target, sched, x, t, cfg["idem.m"], seed=_train_seed(cfg, it))

        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"schedule": sched})

    if fam == "pinn":
        path = make_annealing_path(cfg, target)
        model = drift_model()
        free = TimeScalar(T=T)
        modules["free_energy"] = free
        lg = cfg["precond"] != "none"
        # training paths: with preconditioning the escorted SDE, otherwise its sigma = 0 flow
        src, _ = make_escorted(model, path, cfg["sigma"] if lg else 0.0, langevin=lg)
        p, q = make_escorted(model, path, cfg["sigma"], langevin=True)

        def loss(it: int) -> LossReport:
            gen = torch.Generator().manual_seed(_train_seed(cfg, it))
            n_paths = max(2, cfg["pinn.points"] // 16)
            with torch.no_grad():
                states = simulate_process(src, n_paths, cfg["steps"], _train_seed(cfg, it), keep=True)
            x, t = _random_grid_points(states, T / cfg["steps"], cfg["pinn.points"], gen)
            return pinn_loss(model, path, free, x, t)

        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"path": path})

    if fam == "am":
        path = make_annealing_path(cfg, target)
        if not isinstance(path, ModePath):
            raise config_mod.ConfigError("action matching needs path = mode (exact intermediate samples)")
        if not target.has_sampler:
            raise config_mod.ConfigError("action matching needs an exact target sampler")
        model = drift_model()
        p, q = make_escorted(model, path, cfg["sigma"], langevin=True)

        def loss(it: int) -> LossReport:
            gen = torch.Generator().manual_seed(_train_seed(cfg, it))
            n_t = min(cfg["am.points"], 32)
            per = max(1, cfg["am.points"] // n_t)
            ts = stratified_times(T, n_t, gen)
            x = torch.cat([path.sample(float(tt), per, gen) for tt in ts])
            t = ts.repeat_interleave(per)
            x0 = path.prior.sample(per, gen)
            x1 = target.sample(per, gen)
            # intermediate and terminal draws use the target's parameters
            target.counter.add(density=x.shape[0] + x1.shape[0])
            return am_loss(model, x, t, x0, x1, T)

        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"path": path})

    if fam == "nfdds":
        sched = make_schedule(cfg)
        flow = FlowMap(dim, GaussianSpec.isotropic(dim, sched.prior), cfg["flow.couplings"],
                       tuple(cfg["flow.hidden"]), T=T)
        modules["flow"] = flow
        p, q = make_nf_induced(flow, target, sched)

        def loss(it: int) -> LossReport:
            return nf_dds_loss(flow, target, sched, cfg["nf.times"], cfg["nf.per_time"], seed=_train_seed(cfg, it))

        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"schedule": sched})

    if fam == "nfcmcd":
        path = make_annealing_path(cfg, target)
        flow = FlowMap(dim, path.prior, cfg["flow.couplings"], tuple(cfg["flow.hidden"]), T=T)
        modules["flow"] = flow

        def velocity(x, t, query=None):
            with torch.enable_grad():
                v = flow.velocity(x.detach(), t)
            return v.detach()

        p, q = make_escorted(velocity, path, cfg["sigma"], langevin=True, prior=FlowMarginal(flow, 0.0))

        def loss(it: int) -> LossReport:
            return nf_cmcd_loss(flow, path, cfg["sigma"], cfg["nf.times"], cfg["nf.per_time"],
                                seed=_train_seed(cfg, it), weight=cfg["nfcmcd.weight"])

        return Sampler(cfg, target, modules, lambda: (p, q), loss, lr, {"path": path})

    raise config_mod.ConfigError(f"unknown sampler {fam!r}")


# ---------------------------------------------------------------------------
# distillation and ablation recipes

def distill_init(
    teacher: DriftModel,
    student: DriftModel,
    states: Callable[[int], tuple[Tensor, Tensor]],
    iters: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Fit ``student`` to ``teacher`` by mean squared output error.

    ``states(it)`` supplies an (x, t) batch for iteration ``it``, normally
    drawn from the teacher's own sampling paths. Returns the loss history.
    """
    torch.manual_seed(seed)
    opt = torch.optim.Adam(student.parameters(), lr=lr)
    history = []
    for it in range(iters):
        x, t = states(it)
        with torch.no_grad():
            goal = teacher(x, t)
        loss = ((student(x, t) - goal) ** 2).sum(-1).mean()
        if not torch.isfinite(loss):
            raise DivergenceError("non-finite distillation loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def distill_loss(teacher: DriftModel, student: DriftModel, x: Tensor, t: Tensor) -> float:
    with torch.no_grad():
        return float(((student(x, t) - teacher(x, t)) ** 2).sum(-1).mean())


def remove_langevin(cfg: dict) -> dict:
    """The config without Langevin preconditioning, per sampler family.

    DDS switches to a plain MLP of five 256-unit layers; CMCD re-pairs its
    drifts so the sampling drift loses the sigma^2 grad log pi term; PINN
    trains on sigma = 0 paths. Other families have no recipe.
    """
    fam = cfg["sampler"]
    out = dict(cfg)
    if fam == "dds":
        out.update({"precond": "none", "model.kind": "plain", "model.hidden": list(PLAIN_HIDDEN)})
    elif fam in ("cmcd", "pinn"):
        out["precond"] = "none"
    else:
        raise config_mod.ConfigError(f"no Langevin-removal recipe for sampler {fam!r}")
    config_mod.validate(out)
    return out


def teacher_states(sampler: Sampler, batch: int, seed: int, refresh: int = 10) -> Callable[[int], tuple[Tensor, Tensor]]:
    """(x, t) batches from the teacher's sampling paths, resimulated every ``refresh`` iterations."""
    p, _ = sampler.processes()
    cache: dict = {}
    steps, T = sampler.cfg["steps"], p.T

    def states(it: int):
        if it % refresh == 0 or "grid" not in cache:
            with torch.no_grad():
                cache["grid"] = simulate_process(p, batch, steps, seed + it, keep=True)
        gen = torch.Generator().manual_seed(seed + it)
        return _random_grid_points(cache["grid"][:-1], T / steps, batch, gen)

    return states


def load_sampler(path: str | Path) -> Sampler:
    payload = load_checkpoint(path)
    cfg = config_mod.make_config(payload["meta"]["config"])
    sampler = build_sampler(cfg)
    sampler.load_state(payload["state"])
    return sampler


def _distilled_student(cfg: dict, sampler: Sampler) -> int:
    """Distill the teacher named in the config into the sampler's model; returns energy calls spent."""
    teacher = load_sampler(cfg["init.teacher"])
    if teacher.cfg["sampler"] != cfg["sampler"]:
        raise config_mod.ConfigError("teacher and student samplers differ")
    tm, sm = teacher.modules.get("model"), sampler.modules.get("model")
    if tm is None or sm is None:
        raise config_mod.ConfigError("distillation needs drift models on both sides")
    before = teacher.target.counter.total
    distill_init(tm, sm, teacher_states(teacher, cfg["batch"], cfg["seed"]), cfg["distill.iters"],
                 cfg["distill.lr"], cfg["seed"])
    return teacher.target.counter.total - before


# ---------------------------------------------------------------------------
# training loop

@dataclass
class RunResult:
    status: str  # "ok" or "diverged"
    series: list[dict]
    best: MetricsReport | None
    best_iter: int | None
    out: Path | None
    sampler: Sampler

    def report_row(self) -> dict:
        cfg = self.sampler.cfg
        if self.best is None or self.status != "ok":
            nan = float("nan")
            return {"run_id": cfg["run_id"], "objective": cfg["objective"], "precond": cfg["precond"],
                    "elbo": nan, "eubo": nan, "mmd": nan,
                    "energy_calls": self.series[-1]["energy_calls"] if self.series else 0, "seed": cfg["seed"]}
        return self.best.row(cfg["run_id"], cfg["objective"], cfg["precond"], cfg["seed"])


def _finite_report(r: MetricsReport) -> bool:
    return math.isfinite(r.elbo)


def run_experiment(cfg: dict, out: str | Path | None = None, target: TargetDensity | None = None,
                   progress: Callable[[dict], None] | None = None) -> RunResult:
    """Train per ``cfg`` with periodic evaluation and ELBO-based early stopping.

    Evaluates at iteration 0 and every ``eval_every`` iterations (and at the
    end). With ``max_minutes`` set, training stops once the wall-clock budget
    is spent and the last state is evaluated. Energy calls in the series count training only. A window whose
    loss or evaluation is non-finite is bad; after three consecutive bad
    windows the run stops with status ``diverged`` and its report holds N/A.
    Writes series.csv, report.json, report.csv, best.pt and final.pt when
    ``out`` is given.
    """
    config_mod.validate(cfg)
    sampler = build_sampler(cfg, target)
    target = sampler.target
    out = Path(out) if out else (Path(cfg["out"]) if cfg["out"] else None)
    counter = target.counter
    spent_extra = 0
    if cfg["init"] == "distilled":
        spent_extra = _distilled_student(cfg, sampler)
    params = sampler.parameters()
    opt = torch.optim.Adam(params, lr=sampler.lr) if params and sampler.loss is not None else None
    iters = cfg["iters"] if opt is not None else 0
    lr_sched = None
    if opt is not None and cfg["model.lr_schedule"] == "cosine" and iters > 0:
        # anneal to lr_final * lr over the run
        lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, iters, eta_min=sampler.lr * cfg["model.lr_final"])
    eval_every = cfg["eval_every"] or max(iters, 1)

    reference = None
    if target.has_sampler:
        reference = MMDReference(target.sample(cfg["eval_n"], torch.Generator().manual_seed(cfg["seed"] + EVAL_SEED_OFFSET)))
    eval_calls = 0
    series: list[dict] = []
    best: MetricsReport | None = None
    best_iter = None
    bad_windows, window_bad, status = 0, False, "ok"
    last_loss = float("nan")
    meta = {"config": dict(cfg)}

    def train_calls() -> int:
        return counter.total - eval_calls + spent_extra

    def do_eval(it: int) -> None:
        nonlocal eval_calls, best, best_iter, bad_windows, window_bad, status
        before = counter.total
        p, q = sampler.processes()
        try:
            rep = evaluate(p, q, target, cfg["eval_n"], cfg["steps"], seed=cfg["seed"] + EVAL_SEED_OFFSET,
                           energy_calls=0, reference=reference)
        except FloatingPointError:
            rep = MetricsReport(float("nan"), float("nan"), float("nan"), 0, cfg["eval_n"])
        eval_calls += counter.total - before
        rep.energy_calls = train_calls()
        bad = window_bad or not _finite_report(rep)
        bad_windows = bad_windows + 1 if bad else 0
        window_bad = False
        row = {"iter": it, "energy_calls": rep.energy_calls, "elbo": rep.elbo, "elbo_se": rep.elbo_se,
               "eubo": rep.eubo, "eubo_se": rep.eubo_se, "mmd": rep.mmd,
               "loss": last_loss, "status": "bad" if bad else "ok"}
        series.append(row)
        if progress:
            progress(row)
        if not bad and (best is None or rep.elbo > best.elbo):
            best, best_iter = rep, it
            if out:
                save_checkpoint(out / "best.pt", sampler.modules, {**meta, "iter": it})
        if bad_windows >= DIVERGENCE_WINDOWS:
            status = "diverged"

    deadline = time.monotonic() + 60.0 * cfg["max_minutes"] if cfg["max_minutes"] > 0 else None
    do_eval(0)
    for it in range(1, iters + 1):
        if status != "ok":
            break
        if deadline is not None and time.monotonic() > deadline:
            # out of wall-clock budget: close the run with a final evaluation
            if series[-1]["iter"] != it - 1:
                do_eval(it - 1)
            break
        try:
            rep = sampler.loss(it)
            opt.zero_grad()
            rep.value.backward()
            grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in params)
            if grads_ok:
                opt.step()
            else:
                window_bad = True
            if lr_sched is not None:
                lr_sched.step()
            last_loss = rep.item()
        except FloatingPointError:
            window_bad = True
            last_loss = float("nan")
        if it % eval_every == 0 or it == iters:
            do_eval(it)
    result = RunResult(status, series, best, best_iter, out, sampler)
    if out:
        save_checkpoint(out / "final.pt", sampler.modules, {**meta, "iter": series[-1]["iter"]})
        write_run_files(result, out)
    return result


def write_run_files(result: RunResult, out: Path) -> None:
    cfg = result.sampler.cfg
    write_csv(result.series, out / "series.csv", SERIES_FIELDS)
    row = result.report_row()
    write_csv([row], out / "report.csv")
    write_json({"status": result.status, "best_iter": result.best_iter, "report": row,
                "metrics": result.best.to_dict() if result.best else None,
                "config": dict(cfg)}, out / "report.json")
    atomic_write_text(out / "config.txt", config_mod.dump_config(cfg))


# ---------------------------------------------------------------------------
# PT baseline and budget curves

@dataclass
class PTResult:
    samples: Tensor
    energy_calls: int
    acceptance: list[float]
    mmd: float = float("nan")


def pt_sample(cfg: dict, target: TargetDensity | None = None) -> PTResult:
    target = target or make_target_from_config(cfg)
    ladder = geometric_ladder(cfg["pt.rungs"], cfg["pt.beta_min"])
    samples, state = pt_run(target, ladder, cfg["pt.steps_per_swap"], cfg["pt.sweeps"], cfg["pt.chains"],
                            cfg["pt.step"], cfg["pt.kernel"], cfg["seed"], cfg["pt.burn_in"],
                            init_scale=cfg["pt.init_scale"])
    return PTResult(samples, state.energy_calls, state.acceptance)


def pt_posthoc(cfg: dict, samples: Tensor, target: TargetDensity | None = None, n: int | None = None) -> tuple[DriftModel, Tensor, float]:
    """Fit a diffusion model to PT samples, sample it and score it by MMD against exact samples."""
    target = target or make_target_from_config(cfg)
    sched = make_schedule(cfg)
    model = posthoc_fit(samples, sched, iters=cfg["posthoc.iters"], batch=cfg["batch"], seed=cfg["seed"],
                        hidden=tuple(cfg["posthoc.hidden"]))
    n = n or cfg["eval_n"]
    draws = sample_posthoc(model, target, sched, n, cfg["posthoc.steps"], seed=cfg["seed"] + 1)
    dist = float("nan")
    if target.has_sampler:
        dist = mmd(draws, target.sample(n, torch.Generator().manual_seed(cfg["seed"] + EVAL_SEED_OFFSET)))
    return model, draws, dist


def budget_curve(runs: Iterable[tuple[str, Sequence[dict]]], pt_point: dict | None = None,
                 path: str | Path | None = None) -> str:
    """CSV of (cumulative energy calls, MMD) per evaluation, plus an optional PT reference point."""
    rows = []
    for run_id, series in runs:
        for r in series:
            rows.append({"run_id": run_id, "kind": "neural", "energy_calls": int(r["energy_calls"]),
                         "mmd": float(r["mmd"]) if r["mmd"] not in ("", None) else float("nan")})
    if pt_point is not None:
        rows.append({"run_id": pt_point.get("run_id", "pt_posthoc"), "kind": "pt_posthoc",
                     "energy_calls": int(pt_point["energy_calls"]), "mmd": float(pt_point["mmd"])})
    text = rows_to_csv(rows, BUDGET_FIELDS)
    if path is not None:
        atomic_write_text(path, text)
    return text


def gnuplot_script(csv_name: str = "budget_curve.csv") -> str:
    """Gnuplot commands drawing MMD against cumulative target evaluations from a budget-curve CSV."""
    return "\n".join([
        "set datafile separator ','",
        "set logscale xy",
        "set xlabel 'target evaluations'",
        "set ylabel 'MMD'",
        "set key outside",
        "set terminal pngcairo size 900,600",
        "set output 'budget_curve.png'",
        f"plot '{csv_name}' using 3:(strcol(2) eq 'neural' ? $4 : NaN) skip 1 with linespoints title 'neural samplers', \\",
        f"     '{csv_name}' using 3:(strcol(2) eq 'pt_posthoc' ? $4 : NaN) skip 1 with points pt 7 ps 2 title 'PT + post-hoc'",
        "",
    ])
