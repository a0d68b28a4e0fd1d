import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from rsbm.cli import main
from rsbm.harness import (
    SCHEMA,
    Check,
    ConfigError,
    Summary,
    config_reference,
    load_config,
    parse_config,
    run_experiment,
)

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))

SMALL_LLN = {
    "experiment": "lln",
    "lattice": {"d": 1, "n_grid": [4, 8], "M": 4},
    "environment": {"seed": 7},
    "particles": {"rho": 1.5},
    "time": {"t_end": 0.5},
    "mc": {"replicas": 200, "base_seed": 5},
}


def write_toml(path, text):
    path.write_text(text)
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_shipped_configs_validate(capsys):
    assert len(CONFIGS) == 8
    assert main(["validate", *map(str, CONFIGS)]) == 0
    assert capsys.readouterr().out.count(": ok (") == 8


def test_missing_file_is_one_line_config_error(capsys, tmp_path):
    assert main(["run", str(tmp_path / "nope.toml")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "no such file" in err[0]


@pytest.mark.parametrize("raw,message", [
    ({"experiment": "lln", "colour": 1}, "unknown top-level key"),
    ({"experiment": "lln", "lattice": {"size": 3}}, "unknown key 'size'"),
    ({"experiment": "lln", "extras": {}}, "unknown section"),
    ({"lattice": {}}, "missing required key"),
    ({"experiment": "lln", "lattice": {"n": "4"}}, "expected int"),
    ({"experiment": "lln", "lattice": {"n": True}}, "got bool"),
    ({"experiment": "walk"}, "experiment must be one of"),
    ({"experiment": "lln", "lattice": {"M": 3}}, "even"),
    ({"experiment": "lln", "time": {"t_end": 0}}, "t_end"),
    ({"experiment": "lln", "mc": {"replicas": 1}}, "replicas"),
    ({"experiment": "eigen_growth", "study": {"L_grid": [8]}}, "L_grid"),
    ({"experiment": "spde_compare", "lattice": {"d": 2}}, "one-dimensional"),
])
def test_config_rejections(raw, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(raw)


def test_bad_toml_and_defaults(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_toml(tmp_path / "x.toml", "experiment = \n"))
    cfg = parse_config({"experiment": "moments"})
    assert cfg["mc"]["replicas"] == SCHEMA["mc"]["replicas"][1]
    assert cfg.obs_times == [0.5]
    assert cfg.output == Path("runs/moments")
    assert "[lattice]" in config_reference()


def test_digest_tracks_content():
    a = parse_config(SMALL_LLN)
    assert a.digest() == parse_config(json.loads(json.dumps(SMALL_LLN))).digest()
    assert a.replace_mc(seed=6).digest() != a.digest()


def test_summary_pass_logic():
    s = Summary("x", "h", [Check("a", 1.0, 2.0, True), Check("b", 5.0, 1.0, False, advisory=True)])
    assert s.passed
    d = s.as_dict()
    assert "advisory" not in d["checks"][0] and d["checks"][1]["advisory"] is True
    s.checks.append(Check("c", float("inf"), 1.0, False))
    assert not s.passed and s.as_dict()["checks"][2]["statistic"] == "inf"


def test_run_outputs_and_schema(tmp_path):
    summary = run_experiment(parse_config(SMALL_LLN), tmp_path)
    blob = json.loads((tmp_path / "summary.json").read_text())
    assert set(blob) == {"experiment", "config_hash", "checks", "runtime_s"}
    for c in blob["checks"]:
        assert {"name", "statistic", "tolerance", "pass"} <= set(c)
    assert blob["config_hash"] == summary.config_hash
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["base_seed"] == 5 and prov["environment_seed"] == 7 and "numpy" in prov["versions"]
    rows = read_csv(tmp_path / "data.csv")
    assert [int(r["n"]) for r in rows] == [4, 8]


def test_rerun_is_byte_identical_and_thread_invariant(tmp_path):
    cfg = parse_config(SMALL_LLN)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    run_experiment(cfg.replace_mc(threads=3), tmp_path / "c")
    a = (tmp_path / "a" / "data.csv").read_bytes()
    assert a == (tmp_path / "b" / "data.csv").read_bytes() == (tmp_path / "c" / "data.csv").read_bytes()


def test_seed_override_moves_only_monte_carlo(tmp_path):
    cfg = parse_config(SMALL_LLN)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg.replace_mc(seed=99), tmp_path / "b")
    a, b = read_csv(tmp_path / "a" / "data.csv"), read_csv(tmp_path / "b" / "data.csv")
    assert [r["exact"] for r in a] == [r["exact"] for r in b]
    assert [r["variance_exact"] for r in a] == [r["variance_exact"] for r in b]
    assert [r["mean"] for r in a] != [r["mean"] for r in b]


def test_cli_run_and_merge(tmp_path, capsys):
    cfg = tmp_path / "lln.toml"
    write_toml(cfg, "experiment = \"lln\"\n[lattice]\nn_grid = [4, 8]\n[particles]\nrho = 1.5\n"
                    "[mc]\nreplicas = 100\n")
    code = main(["run", str(cfg), "--out", str(tmp_path / "run"), "--seed", "3"])
    out = capsys.readouterr().out
    assert code in (0, 1)
    assert "mean_identity_n4" in out
    assert json.loads((tmp_path / "run" / "provenance.json").read_text())["base_seed"] == 3
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"checks": [{"name": "a", "statistic": 0, "tolerance": 1, "pass": True},
                                           {"name": "b", "statistic": 2, "tolerance": 1, "pass": False,
                                            "advisory": True}]}))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"checks": [{"name": "a", "statistic": 2, "tolerance": 1, "pass": False}]}))
    assert main(["report", "merge", str(good), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["passed"] is True
    assert main(["report", "merge", str(good), str(bad)]) == 1
    assert main(["report", "merge", str(tmp_path / "missing.json")]) == 2


def test_cli_solvers(tmp_path, capsys):
    env = str(tmp_path / "env.bin")
    assert main(["env", "sample", "--n", "4", "--M", "8", "--seed", "1", "--out", env,
                 "--csv", str(tmp_path / "env.csv")]) == 0
    assert (tmp_path / "env.csv").exists()
    assert main(["pam", "solve", "--env", env, "--t", "0.5", "--out", str(tmp_path / "pam.csv")]) == 0
    assert main(["pam", "solve", "--env", env, "--t", "0.5", "--initial", "dirac"]) == 0
    assert main(["dual", "solve", "--env", env, "--t", "0.5"]) == 0
    assert main(["dual", "solve", "--env", env, "--t", "0.5", "--kind", "fkpp", "--out",
                 str(tmp_path / "u.csv")]) == 0
    assert main(["spectral", "eig", "--env", env, "--L", "8", "--out", str(tmp_path / "e1.csv")]) == 0
    out = capsys.readouterr().out
    assert "lambda1 =" in out and "h(t, 0) =" in out
    assert read_csv(tmp_path / "e1.csv")[0].keys() == {"x1", "e1"}
    assert main(["pam", "solve", "--env", str(tmp_path / "none.bin"), "--t", "0.5"]) == 2
    assert main(["spectral", "eig", "--env", env, "--L", "7"]) == 2


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["run"]) == 2
    assert main(["frobnicate"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rsbm.cli", "validate", str(CONFIGS[0])],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and ": ok (" in proc.stdout
