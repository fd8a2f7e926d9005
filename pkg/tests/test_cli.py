from __future__ import annotations

import json
import subprocess
import sys

import torch

from samplerlab.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main, read_samples
from samplerlab.config import dump_config, make_config
from samplerlab.metrics import read_csv

SMALL = {"target": "gmm3", "steps": 8, "batch": 16, "eval_n": 100, "model.hidden": "8", "model.time_features": 8,
         "iters": 2, "eval_every": 1, "pt.rungs": 2, "pt.sweeps": 10, "pt.chains": 5, "pt.burn_in": 2,
         "posthoc.iters": 5, "posthoc.steps": 8, "posthoc.hidden": "8"}


def _write_cfg(path, **kw):
    path.write_text(dump_config(make_config({**SMALL, **kw})))
    return path


def test_train_eval_report(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "run.cfg", run_id="r1")
    assert main(["train", str(cfg), "--out", str(tmp_path / "runs" / "r1")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "ok"
    assert main(["eval", str(tmp_path / "runs" / "r1" / "best.pt"), "--n", "50", "--out", str(tmp_path / "e.json")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("run_id,objective,precond,elbo,eubo,mmd,energy_calls,seed")
    assert json.loads((tmp_path / "e.json").read_text())["report"]["run_id"] == "r1"
    assert main(["report", str(tmp_path / "runs")]) == EXIT_OK
    assert read_csv(tmp_path / "runs" / "summary.csv")[0]["run_id"] == "r1"
    assert len(read_csv(tmp_path / "runs" / "budget_curve.csv")) == 3


def test_overrides_and_config_errors(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "run.cfg")
    assert main(["train", str(cfg), "--set", "objective=idem", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", str(cfg), "--set", "steps"]) == EXIT_CONFIG
    assert main(["train", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["train", str(cfg), "--set", "iters=0", "--out", str(tmp_path / "y")]) == EXIT_OK


def test_default_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMPLERLAB_OUT", str(tmp_path / "root"))
    cfg = _write_cfg(tmp_path / "run.cfg", run_id="named", iters=0)
    assert main(["train", str(cfg)]) == EXIT_OK
    assert (tmp_path / "root" / "named" / "report.csv").exists()


def test_pt_sample_then_posthoc(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "pt.cfg", target="gauss", **{"vp.v": 2.0})
    assert main(["pt-sample", str(cfg), "--out", str(tmp_path / "pt")]) == EXIT_OK
    samples = read_samples(tmp_path / "pt" / "samples.csv")
    info = json.loads((tmp_path / "pt" / "pt.json").read_text())
    assert samples.shape == ((10 - 2) * 5, 2) and info["energy_calls"] == 10 * 2 * 5 * 11
    assert main(["posthoc-fit", str(tmp_path / "pt" / "samples.csv"), str(cfg), "--out", str(tmp_path / "ph")]) == EXIT_OK
    ph = json.loads((tmp_path / "ph" / "posthoc.json").read_text())
    assert ph["energy_calls"] == info["energy_calls"] and ph["fit_energy_calls"] == 0
    torch.save(samples, tmp_path / "s.pt")
    assert torch.equal(read_samples(tmp_path / "s.pt"), samples)


def test_distill_command(tmp_path):
    cfg = _write_cfg(tmp_path / "run.cfg", **{"distill.iters": 3})
    assert main(["train", str(cfg), "--out", str(tmp_path / "t")]) == EXIT_OK
    assert main(["distill", str(tmp_path / "t" / "final.pt"), str(cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert json.loads((tmp_path / "s" / "report.json").read_text())["config"]["init"] == "distilled"


def test_diverged_exit_code(tmp_path, monkeypatch):
    from samplerlab import harness

    real = harness.run_experiment

    def fake(cfg, out=None, target=None, progress=None):
        res = real(cfg, out, target, progress)
        res.status = "diverged"
        return res

    monkeypatch.setattr(harness, "run_experiment", fake)
    cfg = _write_cfg(tmp_path / "run.cfg", iters=0)
    assert main(["train", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_DIVERGED


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "samplerlab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "eval", "pt-sample", "posthoc-fit", "distill", "report"):
        assert cmd in r.stdout


def test_sweep_runs_every_grid_point(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "run.cfg", run_id="s", iters=0)
    assert main(["sweep", str(cfg), "--grid", "seed=0:1", "--grid", "objective=rkl:lv",
                 "--out", str(tmp_path / "sw")]) == EXIT_OK
    lines = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert len(lines) == 4 and len({x["run_id"] for x in lines}) == 4
    assert main(["report", str(tmp_path / "sw")]) == EXIT_OK
    assert len(read_csv(tmp_path / "sw" / "summary.csv")) == 4
    assert "plot 'budget_curve.csv'" in (tmp_path / "sw" / "budget_curve.gp").read_text()
