"""Evaluation metrics: evidence bounds, kernel two-sample distance and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import Tensor

from .processes import ProcessSpec, Trajectory, simulate, simulate_backward
from .targets import DTYPE, TargetDensity

N_EVAL = 10000
MMD_BASE_BANDWIDTH = 100.0
MMD_EXPONENTS = tuple(range(-4, 6))  # bandwidths 100 * 2^e
REPORT_FIELDS = ("run_id", "objective", "precond", "elbo", "eubo", "mmd", "energy_calls", "seed")


def elbo(traj: Trajectory) -> float:
    """E_Q[-log dQ/dP~], a lower bound on log Z."""
    return float(-traj.log_rnd.detach().mean())


def eubo(traj: Trajectory) -> float:
    """E_P[-log dQ/dP~] from target-process paths, an upper bound on log Z."""
    return float(-traj.log_rnd.detach().mean())


def stderr(values: Tensor) -> float:
    values = values.detach()
    return float(values.std() / math.sqrt(values.shape[0])) if values.shape[0] > 1 else float("nan")


# ---------------------------------------------------------------------------
# MMD

def mmd_bandwidths() -> list[float]:
    return [MMD_BASE_BANDWIDTH * 2.0**e for e in MMD_EXPONENTS]


def _kernel_sum(x: Tensor, y: Tensor, chunk: int = 2048) -> Tensor:
    """Sum over all pairs of sum_e exp(-|x - y|^2 / h_e).

    The bandwidths form a doubling ladder, so every kernel is obtained from
    the widest one by repeated squaring.
    """
    h_max = MMD_BASE_BANDWIDTH * 2.0 ** max(MMD_EXPONENTS)
    n_sq = len(MMD_EXPONENTS) - 1
    yy = (y**2).sum(-1)
    total = torch.zeros((), dtype=DTYPE)
    for i in range(0, x.shape[0], chunk):
        xc = x[i : i + chunk]
        d2 = ((xc**2).sum(-1)[:, None] + yy[None, :] - 2.0 * xc @ y.T).clamp_min(0.0)
        k = torch.exp(-d2 / h_max)
        acc = k.clone()
        for _ in range(n_sq):
            k = k * k
            acc += k
        total = total + acc.sum()
    return total


def _digest(x: Tensor) -> bytes:
    return hashlib.sha1(x.detach().contiguous().cpu().numpy().tobytes()).digest()


def mmd(xs: Tensor, ys: Tensor) -> float:
    """Biased squared MMD with a sum of 10 RBF kernels exp(-|x - y|^2 / h), h = 100 * 2^e, e = -4..5."""
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise ValueError("empty sample batch")
    if xs.shape[1] != ys.shape[1]:
        raise ValueError("sample dimensions differ")
    xs, ys = xs.detach().to(DTYPE), ys.detach().to(DTYPE)
    # canonical argument order makes the estimate bitwise symmetric
    if (ys.shape[0], _digest(ys)) < (xs.shape[0], _digest(xs)):
        xs, ys = ys, xs
    n, m = xs.shape[0], ys.shape[0]
    kxx = _kernel_sum(xs, xs) / (n * n)
    kyy = _kernel_sum(ys, ys) / (m * m)
    kxy = _kernel_sum(xs, ys) / (n * m)
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


class MMDReference:
    """Fixed reference sample with its kernel self-sum cached."""

    def __init__(self, ys: Tensor):
        if ys.shape[0] == 0:
            raise ValueError("empty sample batch")
        self.ys = ys.detach().to(DTYPE)
        self.kyy = _kernel_sum(self.ys, self.ys) / self.ys.shape[0] ** 2

    def __call__(self, xs: Tensor) -> float:
        xs = xs.detach().to(DTYPE)
        if xs.shape[1] != self.ys.shape[1]:
            raise ValueError("sample dimensions differ")
        n, m = xs.shape[0], self.ys.shape[0]
        kxx = _kernel_sum(xs, xs) / (n * n)
        kxy = _kernel_sum(xs, self.ys) / (n * m)
        return max(float(kxx + self.kyy - 2.0 * kxy), 0.0)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    elbo: float
    eubo: float
    mmd: float
    energy_calls: int
    n_eval: int
    elbo_se: float = float("nan")
    eubo_se: float = float("nan")
    meta: dict = field(default_factory=dict)

    def row(self, run_id: str = "", objective: str = "", precond: str = "", seed: int = 0) -> dict:
        return {
            "run_id": run_id, "objective": objective, "precond": precond,
            "elbo": self.elbo, "eubo": self.eubo, "mmd": self.mmd,
            "energy_calls": self.energy_calls, "seed": seed,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    p: ProcessSpec,
    q: ProcessSpec,
    target: TargetDensity,
    n: int = N_EVAL,
    steps: int = 128,
    seed: int = 0,
    energy_calls: int = 0,
    reference: Tensor | MMDReference | None = None,
) -> MetricsReport:
    """ELBO, EUBO and MMD of a sampler with ``n`` paths each.

    EUBO needs exact target samples. MMD compares the final states with
    ``reference`` if given, else with fresh exact samples. The evaluation's
    own target calls are not charged to ``energy_calls``, which should carry
    the training budget.
    """
    before = target.counter.total
    with torch.no_grad():
        fwd = simulate(p, q, n, steps, seed=seed)
    meta = {"mmd_bandwidths": mmd_bandwidths(), "eubo": "target-process paths from exact samples"}
    e_lo, e_lo_se = elbo(fwd), stderr(-fwd.log_rnd)
    e_up = e_up_se = float("nan")
    if target.has_sampler:
        exact = target.sample(n, torch.Generator().manual_seed(seed + 1))
        bwd = simulate_backward(p, q, exact, steps, seed=seed + 2)
        e_up, e_up_se = eubo(bwd), stderr(-bwd.log_rnd)
        if reference is None:
            reference = target.sample(n, torch.Generator().manual_seed(seed + 3))
    if isinstance(reference, MMDReference):
        dist = reference(fwd.final)
    elif reference is not None:
        dist = mmd(fwd.final, reference)
    else:
        dist = float("nan")
    meta["eval_energy_calls"] = target.counter.total - before
    return MetricsReport(e_lo, e_up, dist, int(energy_calls), n, e_lo_se, e_up_se, meta)


def evaluate_samples(samples: Tensor, target: TargetDensity, energy_calls: int = 0, seed: int = 0) -> MetricsReport:
    """MMD-only report for samplers without path likelihoods (e.g. MCMC)."""
    gen = torch.Generator().manual_seed(seed + 1)
    ref = target.sample(samples.shape[0], gen)
    return MetricsReport(float("nan"), float("nan"), mmd(samples, ref), int(energy_calls), samples.shape[0])


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "N/A" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Iterable[dict], fields: Sequence[str] = REPORT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f, "")) for f in fields])
    return buf.getvalue()


def write_csv(rows: Iterable[dict], path: str | Path, fields: Sequence[str] = REPORT_FIELDS) -> None:
    atomic_write_text(path, rows_to_csv(rows, fields))


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(obj, path: str | Path) -> None:
    def clean(v):
        if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    atomic_write_text(path, json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")
