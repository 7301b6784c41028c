import json
import math

import pytest

from carshare.cli import ConfigError, expand_sweep, main, parse_config, run_experiment


def _write(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_minimal_equilibrium_config():
    cfg = parse_config({"lambda": 1, "mu": 1, "U": 1, "kind": "equilibrium"})
    assert cfg["model"] == "model1" and cfg["seed"] == 0
    assert "seed" in cfg["_defaults"] and "lambda" not in cfg["_defaults"]


def test_model2_needs_capacity():
    with pytest.raises(ConfigError, match="^K"):
        parse_config({"lambda": 1, "mu": 1, "U": 1, "model": "model2", "kind": "equilibrium"})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="colour"):
        parse_config({"lambda": 1, "mu": 1, "U": 1, "kind": "equilibrium", "colour": "red"})
    with pytest.raises(ConfigError, match="mu"):
        parse_config({"lambda": 1, "mu": "fast", "U": 1, "kind": "equilibrium"})


def test_sweep_order():
    runs = expand_sweep({"lambda": 1, "mu": [1, 2], "U": [0.5, 1, 2], "kind": "equilibrium"})
    assert [(r["mu"], r["U"]) for r in runs] == [(1, 0.5), (1, 1), (1, 2), (2, 0.5), (2, 1), (2, 2)]
    assert len(expand_sweep({"U": [0.5, 1, 2]})) == 3


def test_empty_config_exits_2(tmp_path, capsys):
    assert main(["equilibrium", "--config", _write(tmp_path, {}), "--out", str(tmp_path)]) == 2
    assert "lambda" in capsys.readouterr().err
    assert main(["equilibrium", "--out", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2


def test_numerical_failure_exits_3(tmp_path):
    # ratefit from a state already at equilibrium has no decay window
    cfg = {"lambda": 1, "mu": 1, "U": 0, "kind": "ratefit", "horizon": 5}
    assert main(["ratefit", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == 3


def test_equilibrium_run(tmp_path, capsys):
    code = main(["equilibrium", "--lambda", "1", "--mu", "1", "--U", "1", "--out", str(tmp_path)])
    assert code == 0
    out = tmp_path / capsys.readouterr().out.strip().split("/")[-1]
    eq = json.loads((out / "equilibrium.json").read_text())
    beta = (3 - math.sqrt(5)) / 2
    assert eq["beta"] == pytest.approx(beta, abs=1e-15)
    assert eq["delta_bar"] == pytest.approx(beta, abs=1e-15)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["lambda"] == 1.0
    assert set(manifest) >= {"schema_version", "seed", "tolerances", "versions", "wall_time_s", "payload_hash"}


def test_xval_report(tmp_path):
    cfg = parse_config({"lambda": 1, "mu": 1, "U": 1, "kind": "xval", "n_stations": 200, "replications": 2, "horizon": 5})
    out = run_experiment(cfg, tmp_path)
    report = json.loads((out / "report.json").read_text())
    assert set(report) >= {"l1_sim_vs_ode", "l1_ode_vs_pi", "delta_gap"}
    assert report["l1_sim_vs_ode"] < 0.3


@pytest.mark.parametrize(
    "raw",
    [
        {"lambda": 1, "mu": 1, "U": 1, "kind": "simulate", "n_stations": 100, "replications": 3, "horizon": 2, "seed": 9},
        {"lambda": 1, "mu": 1, "U": 1, "K": 2, "model": "model3", "kind": "meanfield", "horizon": 5},
        {"lambda": 1, "mu": 1, "U": 1, "kind": "dominance", "n_pairs": 3, "horizon": 5, "seed": 4},
    ],
)
def test_byte_identical_payloads(tmp_path, raw):
    a = run_experiment(parse_config(raw), tmp_path / "a")
    b = run_experiment(parse_config(raw), tmp_path / "b")
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert a.name == b.name
    assert ma["payload_hash"] == mb["payload_hash"]
    for name in ma["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
