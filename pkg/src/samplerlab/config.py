"""Flat key = value experiment configuration.

One run per file. Lines are ``key = value``; ``#`` starts a comment. Every
key must appear in :data:`DEFAULTS`; values are parsed to the type of the
default. List values are comma separated.
"""
from __future__ import annotations

import itertools
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SAMPLERS = ("dds", "pis", "idem", "cmcd", "mcd", "pinn", "am", "nfdds", "nfcmcd")
PRECONDS = ("lg", "none", "energy_cond")
INITS = ("fresh", "distilled")

# For each sampler, the objectives it can be trained with.
SAMPLER_OBJECTIVES = {
    "dds": ("rkl", "lv", "tb", "stb", "db"),
    "pis": ("rkl", "lv", "tb"),
    "cmcd": ("rkl", "lv", "tb", "stb", "db"),
    "mcd": ("none",),
    "idem": ("idem",),
    "pinn": ("pinn",),
    "am": ("am",),
    "nfdds": ("nfdds",),
    "nfcmcd": ("nfcmcd",),
}

DEFAULTS: dict[str, object] = {
    "run_id": "",
    "target": "gmm40",
    "target.seed": 0,
    "target.dim": 2,
    "target.variance": 1.0,
    "sampler": "dds",
    "objective": "rkl",
    "precond": "lg",
    "init": "fresh",
    "init.teacher": "",
    "model.kind": "",
    "model.hidden": [],
    "model.lr": 0.0,
    "model.lr_schedule": "constant",
    "model.lr_final": 0.01,
    "model.time_features": 64,
    "model.input_scale": 1.0,
    "model.net_gain": 1.0,
    "flow.couplings": 4,
    "flow.hidden": [64, 64],
    "T": 1.0,
    "vp.beta_min": 0.03,
    "vp.beta_max": 3.0,
    "vp.v": 30.0,
    "prior.variance": 2.0,
    "path": "geometric",
    "anneal.kind": "linear",
    "sigma": 1.0,
    "steps": 128,
    "batch": 512,
    "iters": 20000,
    "eval_every": 500,
    "eval_n": 10000,
    "max_minutes": 0.0,
    "seed": 0,
    "out": "",
    "offpolicy.source": "detached",
    "idem.m": 100,
    "pinn.points": 2048,
    "am.points": 2048,
    "nf.times": 32,
    "nf.per_time": 16,
    "nfcmcd.weight": "girsanov",
    "distill.iters": 2000,
    "distill.lr": 1e-3,
    "pt.rungs": 10,
    "pt.beta_min": 0.05,
    "pt.steps_per_swap": 10,
    "pt.sweeps": 1000,
    "pt.chains": 100,
    "pt.step": 0.05,
    "pt.kernel": "ula",
    "pt.burn_in": 100,
    "pt.init_scale": 40.0,
    "posthoc.iters": 3000,
    "posthoc.steps": 256,
    "posthoc.hidden": [128, 128, 128],
}

CHOICES = {
    "sampler": SAMPLERS,
    "precond": PRECONDS,
    "init": INITS,
    "path": ("geometric", "mode"),
    "anneal.kind": ("linear", "cosine"),
    "offpolicy.source": ("detached",),
    "nfcmcd.weight": ("girsanov", "inverse_sigma", "unit"),
    "pt.kernel": ("ula", "mala"),
    "model.lr_schedule": ("constant", "cosine"),
    "model.kind": ("", "plain", "langevin_precond", "energy_conditioned", "potential"),
    "target": ("gmm3", "gmm40", "gauss"),
}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, list):
        if isinstance(raw, (list, tuple)):
            items = list(raw)
        else:
            s = str(raw).strip().strip("[]")
            items = [p for p in (x.strip() for x in s.split(",")) if p]
        try:
            return [int(x) for x in items]
        except ValueError:
            raise ConfigError(f"{key}: expected a comma-separated list of integers, got {raw!r}") from None
    try:
        if isinstance(default, int):
            val = int(raw) if not isinstance(raw, float) or float(raw).is_integer() else None
            if val is None:
                raise ValueError
            return val
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw).strip()


def make_config(values: Mapping[str, object] | None = None) -> dict:
    """Defaults overlaid with ``values``; validated."""
    cfg = dict(DEFAULTS)
    cfg["model.hidden"] = list(DEFAULTS["model.hidden"])
    for k, v in (values or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _parse(k, v, DEFAULTS[k])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for k in cfg:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
    for k, opts in CHOICES.items():
        if cfg[k] not in opts:
            raise ConfigError(f"{k}: {cfg[k]!r} is not one of {list(opts)}")
    allowed = SAMPLER_OBJECTIVES[cfg["sampler"]]
    if cfg["objective"] not in allowed:
        raise ConfigError(f"objective {cfg['objective']!r} not available for sampler {cfg['sampler']!r}; use one of {list(allowed)}")
    for k in ("steps", "batch", "eval_n", "idem.m", "pt.rungs", "pt.chains", "nf.times", "nf.per_time"):
        if cfg[k] < 1:
            raise ConfigError(f"{k} must be >= 1")
    for k in ("iters", "eval_every", "distill.iters", "posthoc.iters", "pt.sweeps", "pt.burn_in"):
        if cfg[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    for k in ("model.input_scale", "model.net_gain", "T", "vp.beta_min", "vp.v", "prior.variance", "target.variance", "pt.step", "pt.beta_min"):
        if cfg[k] <= 0:
            raise ConfigError(f"{k} must be positive")
    if cfg["vp.beta_max"] < cfg["vp.beta_min"]:
        raise ConfigError("vp.beta_max must be >= vp.beta_min")
    if not 0 < cfg["model.lr_final"] <= 1:
        raise ConfigError("model.lr_final must be in (0, 1]")
    if cfg["max_minutes"] < 0:
        raise ConfigError("max_minutes must be >= 0 (0 = no wall-clock limit)")
    if cfg["sigma"] < 0:
        raise ConfigError("sigma must be nonnegative")
    if any(h < 1 for h in cfg["model.hidden"]):
        raise ConfigError("model.hidden entries must be positive")
    if cfg["init"] == "distilled" and not cfg["init.teacher"]:
        raise ConfigError("init = distilled needs init.teacher")


def parse_lines(lines: Iterable[str]) -> dict:
    values: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        values[k] = v
    return values


def load_config(path: str | Path, overrides: Mapping[str, object] | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    values = parse_lines(text.splitlines())
    values.update(overrides or {})
    return make_config(values)


def dump_config(cfg: Mapping[str, object]) -> str:
    out = []
    for k in DEFAULTS:
        v = cfg[k]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


def expand_grid(base: Mapping[str, object], grid: Mapping[str, Sequence[object]]) -> list[dict]:
    """One validated config per point of the cartesian product of ``grid`` values over ``base``.

    ``run_id`` gets a ``key=value`` suffix per swept key so runs stay distinguishable.
    """
    keys = list(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = dict(base)
        values.update(zip(keys, combo))
        tag = ",".join(f"{k}={v}" for k, v in zip(keys, combo))
        stem = str(values.get("run_id", ""))
        values["run_id"] = f"{stem}[{tag}]" if stem else tag
        out.append(make_config(values))
    return out
