import csv
import json
from pathlib import Path

import pytest
import yaml

from dagm.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, load_config, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small_quad(tmp_path, **run):
    cfg = {
        "problem": {"family": "quad", "quad": {"n": 4, "d1": 2, "d2": 2, "reg": 1.0, "seed": 0}},
        "graph": {"r": 0.5, "seed": 1},
        "run": {"alpha": 0.2, "beta": 0.2, "U": 3, "M": 5, "K": 10, **run},
        "output": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_overrides_take_precedence(tmp_path):
    cfg = load_config(small_quad(tmp_path), ["run.beta=0.05", "graph.r=0.9"])
    assert cfg["run"]["beta"] == 0.05 and cfg["graph"]["r"] == 0.9
    assert cfg["run"]["K"] == 10 and cfg["weights"] == "metropolis"


def test_run_writes_outputs(tmp_path):
    path = small_quad(tmp_path)
    assert main(["run", str(path), "--replicates", "2"]) == EXIT_OK
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert [r["seeds"]["graph"] for r in manifest["replicates"]] == [1, 2]
    rows = list(csv.DictReader(open(out / "rep01" / "metrics.csv")))
    assert len(rows) == 11 and rows[-1]["sc_gap"] != ""
    assert int(rows[-1]["comm_units"]) == 10 * (4 * 2 + 5 * 2)
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert [s["replicate"] for s in summary] == ["0", "1"]
    assert len((out / "rep00" / "trajectory.jsonl").read_text().splitlines()) == 11


def test_output_root_env(tmp_path, monkeypatch):
    path = small_quad(tmp_path)
    monkeypatch.setenv("DAGM_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", str(path), "--output", "rel"]) == EXIT_OK
    assert (tmp_path / "root" / "rel" / "manifest.json").exists()


def test_sweep_beta(tmp_path):
    path = small_quad(tmp_path)
    assert main(["sweep", str(path), "--param", "run.beta", "--values", "0.1,0.2"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "out" / "beta=0.1" / "rep00" / "metrics.csv")))
    assert rows[-1]["penalty_gap"] != ""


def test_divergence_exit(tmp_path):
    assert main(["run", str(small_quad(tmp_path, alpha=80.0, K=200))]) == EXIT_DIVERGED


def test_bad_config(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("problem: {family: tensor}\n")
    assert main(["run", str(p), "--output", str(tmp_path / "never")]) == EXIT_CONFIG
    assert not (tmp_path / "never").exists()
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["run", str(small_quad(tmp_path)), "--set", "nonsense"]) == EXIT_CONFIG


def test_validate_ok(capsys):
    assert main(["validate", str(CONFIGS / "quad_path3.yaml"), "--trials", "5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS  A2_doubly_stochastic" in out
    assert "rho = 1.53" in out


def test_validate_beta_warning(capsys):
    code = main(["validate", str(CONFIGS / "quad_path3.yaml"), "--trials", "5", "--set", "run.beta=2.0"])
    assert code == EXIT_OK
    assert "exceeds the inner step cap" in capsys.readouterr().out


def test_validate_disconnected(tmp_path, capsys):
    (tmp_path / "g.txt").write_text("3\n0 1\n")
    cfg = {"problem": {"family": "quad", "quad": {"n": 3}}, "graph": {"edge_list": "g.txt"}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["validate", str(tmp_path / "c.yaml")]) == EXIT_INVALID
    assert "disconnected" in capsys.readouterr().out


def test_edge_list_size_mismatch(tmp_path):
    (tmp_path / "g.txt").write_text("3\n0 1\n1 2\n")
    cfg = {"problem": {"family": "quad", "quad": {"n": 4}}, "graph": {"edge_list": "g.txt"}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["run", str(tmp_path / "c.yaml")]) == EXIT_CONFIG


def test_complexity(capsys):
    assert main(["complexity", "--n", "10", "--d1", "2", "--d2", "3", "--eps", "0.01", "--sigma", "0.5",
                 "--K", "4", "--U", "2", "--M", "5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "DAGM_exact" in out and "84" in out
    assert main(["complexity", "--n", "10", "--d1", "2", "--d2", "3", "--eps", "0.01", "--sigma", "1.0"]) == EXIT_CONFIG


def test_theorem_schedule(tmp_path):
    path = small_quad(tmp_path, schedule="theorem_nonconvex", beta=0.3, U=4)
    cfg = yaml.safe_load(path.read_text())
    cfg["graph"] = {"edge_list": str(tmp_path / "g.txt")}
    cfg["problem"]["quad"]["box"] = 1.0
    (tmp_path / "g.txt").write_text("4\n0 1\n1 2\n2 3\n3 0\n")
    path.write_text(yaml.safe_dump(cfg))
    assert main(["run", str(path)]) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "manifest.json").read_text())["replicates"][0]
    assert rep["beta"] == 0.3 and rep["alpha"] < 0.2
