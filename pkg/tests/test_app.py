import json
import os

import pytest

from app import ConfigError, ExperimentConfig, main, resolve, run, suite
from utils import load_jsonl, read_table

CAUCHY = {"d": 1, "alpha": 1.0}


def _write(path, payload):
    with open(path, "w") as f:
        f.write(payload if isinstance(payload, str) else json.dumps(payload))
    return str(path)


def _simulate(**parameters):
    params = {"kind": "V", "rho": 2, "horizon": 1.0, "n_paths": 200, "n_dump": 2, "batch_size": 50}
    params.update(parameters)
    return {"model": CAUCHY, "experiment": "simulate", "parameters": params, "seed": 7}


@pytest.mark.parametrize("payload, needle", [
    ({"model": {"d": 1, "alpha": 2.5}, "experiment": "simulate"}, "(0, 2)"),
    ({"model": CAUCHY, "experiment": "simulate", "colour": "red"}, "colour"),
    ({"model": CAUCHY, "experiment": "check:spectral_gap"}, "unknown experiment"),
    ({"model": CAUCHY, "experiment": "simulate", "parameters": {"rhoo": 4}}, "parameters.rhoo"),
    ({"model": CAUCHY, "experiment": "simulate", "parameters": {"seed": 4}}, "parameters.seed"),
    ({"model": CAUCHY, "experiment": "simulate", "seed": -1}, "seed"),
    ({"experiment": "simulate"}, "model"),
])
def test_config_errors_exit_with_status_2(tmp_path, capsys, payload, needle):
    path = _write(tmp_path / "bad.json", payload)
    assert main(["--quiet", "run", path]) == 2
    err = capsys.readouterr().err
    assert err.startswith("config error:") and needle in err


def test_malformed_json_reports_position(tmp_path, capsys):
    path = _write(tmp_path / "broken.json", '{"model": {"d": 1,}')
    assert main(["--quiet", "run", path]) == 2
    assert "line 1 column" in capsys.readouterr().err


def test_empty_suite_directory(tmp_path):
    assert main(["--quiet", "suite", str(tmp_path)]) == 2


def test_simulate_run_writes_artifacts(tmp_path):
    path = _write(tmp_path / "sim.json", _simulate())
    out = tmp_path / "out"
    assert main(["--quiet", "run", path, "--output", str(out)]) == 0
    for name in ("ledger.jsonl", "resolved_config.json", "run_log.jsonl", "paths.tsv", "simulate.tsv", "checks.tsv"):
        assert (out / name).exists(), name
    records = load_jsonl(str(out / "ledger.jsonl"))
    assert len(records) == 1 and records[0]["check_name"] == "simulate"
    assert "runtime" not in records[0]
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 7 and resolved["name"] == "sim"
    header, rows = read_table(str(out / "paths.tsv"))
    assert header == ["path_id", "t", "coord_1"]
    assert {r[0] for r in rows} == {"0", "1"}
    header, rows = read_table(str(out / "checks.tsv"))
    assert header == ["check", "result", "kind", "headline", "value"]
    assert rows[0][:3] == ["simulate", "pass", "info"]


def test_ledger_does_not_depend_on_workers_or_reruns(tmp_path):
    path = _write(tmp_path / "sim.json", _simulate())
    ledgers = []
    for i, workers in enumerate(("1", "2", "1")):
        out = tmp_path / f"out{i}"
        assert main(["--quiet", "run", path, "--output", str(out), "--workers", workers]) == 0
        ledgers.append((out / "ledger.jsonl").read_bytes())
    assert ledgers[0] == ledgers[1] == ledgers[2]


def test_cli_seed_overrides_config(tmp_path):
    path = _write(tmp_path / "sim.json", _simulate())
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["--quiet", "run", path, "--output", str(out_a)])
    main(["--quiet", "run", path, "--output", str(out_b), "--seed", "8"])
    assert json.loads((out_b / "resolved_config.json").read_text())["seed"] == 8
    assert (out_a / "ledger.jsonl").read_bytes() != (out_b / "ledger.jsonl").read_bytes()


def test_output_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("AXISJUMP_OUTPUT", str(tmp_path / "env"))
    config = ExperimentConfig.from_dict(_simulate(), "sim")
    assert resolve(config, None, None, None).output_dir == os.path.join(str(tmp_path / "env"), "sim")
    config = ExperimentConfig.from_dict(dict(_simulate(), output_dir="cfg"), "sim")
    assert resolve(config, None, None, None).output_dir == "cfg"
    assert resolve(config, None, 3, "cli").output_dir == "cli"
    assert config.workers == 3


def test_domain_error_exits_with_status_1(tmp_path, capsys):
    raw = {"model": CAUCHY, "experiment": "density", "parameters": {"rho": 2, "window": 0.1}}
    config = resolve(ExperimentConfig.from_dict(raw, "density"), None, None, str(tmp_path / "out"))
    assert run(config) == 1
    assert "empty window" in capsys.readouterr().err
    last = load_jsonl(str(tmp_path / "out" / "run_log.jsonl"))[-1]
    assert last["stage"] == "density" and last["status"] == "error" and "empty window" in last["error"]


def test_failed_gated_check_exits_with_status_1(tmp_path, capsys):
    raw = {"model": CAUCHY, "experiment": "check:ondiag_upper",
           "parameters": {"rho": 4, "t_grid": [0.5, 1.0, 2.0, 4.0], "rho_compare": 2, "window": 32.0,
                          "slope_tol": 0.0}}
    config = resolve(ExperimentConfig.from_dict(raw, "ondiag"), None, None, str(tmp_path / "out"))
    assert run(config) == 1
    assert "FAILED: ondiag_upper" in capsys.readouterr().err
    record = load_jsonl(str(tmp_path / "out" / "ledger.jsonl"))[0]
    assert record["pass"] is False and record["tolerance"]["slope_tol"] == 0.0


def test_density_run_exports_grid(tmp_path):
    raw = {"model": CAUCHY, "experiment": "density", "parameters": {"rho": 2, "t": 0.5, "window": 4.0}}
    config = resolve(ExperimentConfig.from_dict(raw, "density"), None, None, str(tmp_path / "out"))
    assert run(config) == 0
    first = (tmp_path / "out" / "density.tsv").read_text().splitlines()[0]
    assert first.startswith("# t=0.5 rho=2 mode=restricted convention=unit_rate")
    record = load_jsonl(str(tmp_path / "out" / "ledger.jsonl"))[0]
    assert record["fitted"]["irreducible"]["value"] is True


def test_suite_summarises_every_config(tmp_path):
    configs = tmp_path / "configs"
    configs.mkdir()
    _write(configs / "a_sim.json", _simulate())
    _write(configs / "b_bad.json", {"model": CAUCHY, "experiment": "nope"})
    root = tmp_path / "runs"
    assert suite(str(configs), output=str(root)) == 2
    header, rows = read_table(str(root / "summary.tsv"))
    assert header == ["config", "experiment", "result", "failed", "seconds"]
    assert [r[0] for r in rows] == ["a_sim", "b_bad"]
    assert rows[0][2] == "pass" and rows[1][2] == "error"
    assert (root / "a_sim" / "ledger.jsonl").exists()


def test_config_error_carries_path():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"model": CAUCHY, "experiment": "simulate", "workers": 0})
    assert info.value.path == "workers"


def test_window_error_keeps_the_partial_report(tmp_path, capsys):
    raw = {"model": CAUCHY, "experiment": "check:ondiag_upper",
           "parameters": {"rho": 4, "t_grid": [0.5, 1.0, 2.0, 4.0], "rho_compare": 2, "window": 1.0}}
    config = resolve(ExperimentConfig.from_dict(raw, "tiny"), None, None, str(tmp_path / "out"))
    assert run(config) == 1
    assert "WindowError" in capsys.readouterr().err
    record = load_jsonl(str(tmp_path / "out" / "ledger.jsonl"))[0]
    assert record["pass"] is False
    assert record["fitted"]["window_error_rho4"]["value"] > record["tolerance"]["max_window_error"]
    assert load_jsonl(str(tmp_path / "out" / "run_log.jsonl"))[-1]["status"] == "error"
