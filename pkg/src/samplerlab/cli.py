"""Command line entry point: ``samplerlab <command> ...``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 divergent run.
Output directories default to ``$SAMPLERLAB_OUT/<run_id>`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import harness
from .config import ConfigError, expand_grid, load_config, parse_lines
from .metrics import atomic_write_text, evaluate, read_csv, rows_to_csv, write_json
from .models import save_checkpoint
from .targets import DTYPE

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "SAMPLERLAB_OUT"

log = logging.getLogger("samplerlab")


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _out_dir(cfg: dict, explicit: str | None, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    if cfg.get("out"):
        return Path(cfg["out"])
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / (cfg.get("run_id") or default_name)


def _load(args) -> dict:
    return load_config(args.config, _overrides(args.set))


def _write_samples(samples: torch.Tensor, path: Path) -> None:
    rows = [",".join(f"x{i}" for i in range(samples.shape[1]))]
    rows += [",".join(repr(v) for v in r) for r in samples.tolist()]
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_samples(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if path.suffix == ".pt":
        return torch.load(path, map_location="cpu").to(DTYPE)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return torch.tensor([[float(v) for v in r] for r in rows[1:] if r], dtype=DTYPE)


def _progress(row: dict) -> None:
    log.info("iter %d  calls %d  elbo %.4f  eubo %.4f  mmd %.5f  %s", row["iter"], row["energy_calls"],
             row["elbo"], row["eubo"], row["mmd"], row["status"])


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args.out, "train")
    res = harness.run_experiment(cfg, out, progress=_progress)
    print(json.dumps({"status": res.status, "best_iter": res.best_iter, "out": str(out)}))
    return EXIT_OK if res.status == "ok" else EXIT_DIVERGED


def cmd_eval(args) -> int:
    sampler = harness.load_sampler(args.checkpoint)
    cfg = sampler.cfg
    p, q = sampler.processes()
    rep = evaluate(p, q, sampler.target, args.n or cfg["eval_n"], args.steps or cfg["steps"], seed=args.seed)
    row = rep.row(cfg["run_id"], cfg["objective"], cfg["precond"], args.seed)
    print(rows_to_csv([row]), end="")
    if args.out:
        write_json({"report": row, "metrics": rep.to_dict()}, Path(args.out))
    return EXIT_OK


def cmd_pt_sample(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args.out, "pt")
    res = harness.pt_sample(cfg)
    _write_samples(res.samples, out / "samples.csv")
    write_json({"energy_calls": res.energy_calls, "n_samples": res.samples.shape[0],
                "swap_acceptance": res.acceptance, "config": cfg}, out / "pt.json")
    print(json.dumps({"energy_calls": res.energy_calls, "n_samples": res.samples.shape[0], "out": str(out)}))
    return EXIT_OK


def cmd_posthoc_fit(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, args.out, "posthoc")
    samples = read_samples(args.samples)
    model, _, dist = harness.pt_posthoc(cfg, samples)
    save_checkpoint(out / "posthoc.pt", {"model": model}, {"config": cfg})
    calls = 0
    info = Path(args.samples).with_name("pt.json")
    if info.exists():
        calls = json.loads(info.read_text())["energy_calls"]
    write_json({"mmd": dist, "energy_calls": calls, "fit_energy_calls": 0}, out / "posthoc.json")
    print(json.dumps({"mmd": dist, "energy_calls": calls, "out": str(out)}))
    return EXIT_OK


def cmd_distill(args) -> int:
    values = _overrides(args.set)
    values.update({"init": "distilled", "init.teacher": args.teacher})
    cfg = load_config(args.config, values)
    out = _out_dir(cfg, args.out, "distill")
    res = harness.run_experiment(cfg, out, progress=_progress)
    print(json.dumps({"status": res.status, "best_iter": res.best_iter, "out": str(out)}))
    return EXIT_OK if res.status == "ok" else EXIT_DIVERGED


def cmd_sweep(args) -> int:
    try:
        base = parse_lines(Path(args.config).read_text().splitlines())
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from None
    base.update(_overrides(args.set))
    grid = {k: v.split(":") for k, v in _overrides(args.grid).items()}
    root = Path(args.out or os.environ.get(OUT_ENV, "runs"))
    worst = EXIT_OK
    for cfg in expand_grid(base, grid):
        res = harness.run_experiment(cfg, root / cfg["run_id"], progress=_progress)
        print(json.dumps({"run_id": cfg["run_id"], "status": res.status, "best_iter": res.best_iter}))
        if res.status != "ok":
            worst = EXIT_DIVERGED
    return worst


def cmd_report(args) -> int:
    root = Path(args.directory)
    rows = []
    for f in sorted(root.rglob("report.csv")):
        rows.extend(read_csv(f))
    text = rows_to_csv(rows)
    atomic_write_text(root / "summary.csv", text)
    runs = [(f.parent.name, read_csv(f)) for f in sorted(root.rglob("series.csv"))]
    pt_point = None
    for f in sorted(root.rglob("posthoc.json")):
        d = json.loads(f.read_text())
        if d.get("mmd") is not None:
            pt_point = {"run_id": f.parent.name, "energy_calls": d["energy_calls"], "mmd": d["mmd"]}
    harness.budget_curve(runs, pt_point, root / "budget_curve.csv")
    atomic_write_text(root / "budget_curve.gp", harness.gnuplot_script())
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="samplerlab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")
        return p

    with_config(sub.add_parser("train", help="train a sampler")).set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(fn=cmd_eval)
    with_config(sub.add_parser("pt-sample", help="parallel tempering samples")).set_defaults(fn=cmd_pt_sample)
    p = sub.add_parser("posthoc-fit", help="fit a diffusion model to samples")
    p.add_argument("samples")
    with_config(p).set_defaults(fn=cmd_posthoc_fit)
    p = sub.add_parser("distill", help="distill a teacher checkpoint, then fine-tune")
    p.add_argument("teacher")
    with_config(p).set_defaults(fn=cmd_distill)
    p = sub.add_parser("sweep", help="train every point of a config grid")
    p.add_argument("--grid", action="append", metavar="KEY=V1:V2", help="values to sweep for one key")
    with_config(p).set_defaults(fn=cmd_sweep)
    p = sub.add_parser("report", help="collect run reports under a directory")
    p.add_argument("directory")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
