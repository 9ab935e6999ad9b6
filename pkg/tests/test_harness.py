import json
from dataclasses import replace

import pytest

from csfa import cli
from csfa.errors import ConfigError
from csfa.harness import (
    ABLATION, METHODS, OUTPUT_ENV, PhaseError, ResultTable, RunConfig, _base_model, ablate, grid, mean_average,
    read_table, run, run_methods, write_table,
)
from csfa.streams import Scenario, ScenarioSpec
from csfa.training import TrainConfig

QUICK = RunConfig(train=TrainConfig(epochs=40), eval_samples=400)


def test_average_is_mean_of_sessions(tmp_path):
    t = run(QUICK)
    assert abs(t.average - sum(t.session_accuracy) / len(t.session_accuracy)) < 1e-9
    path = write_table(tmp_path / "t.csv", [t])
    back = read_table(path)[0]
    assert back.session_accuracy == t.session_accuracy
    assert sum(back.session_accuracy) / len(back.session_accuracy) == back.emitted_average


def test_table_format():
    text = ResultTable("csfa", 3, [50.0, 25.5]).to_csv()
    assert text == "method,seed,session,accuracy\ncsfa,3,0,50.0\ncsfa,3,1,25.5\ncsfa,3,average,37.75\n"


def test_unknown_method():
    with pytest.raises(ConfigError):
        run(replace(QUICK, method="csfa_v9"))


def test_session_zero_is_shared_by_prototype_methods():
    res = run_methods(QUICK, [m for m in METHODS if METHODS[m][0] == "prototype"], [1])
    firsts = {ts[0].session_accuracy[0] for ts in res.values()}
    assert len(firsts) == 1


def test_identity_drift_adaptation_is_nearly_a_no_op():
    # at the library default step size; the larger harness step also sharpens novel classes without drift
    cfg = replace(QUICK, scenario=ScenarioSpec(drift_kind="none"), adapt=replace(QUICK.adapt, lr=1e-4))
    for seed in (0, 1, 2):
        res = run_methods(replace(cfg, seed=seed), ["csfa_v2", "csfa_v3"], [seed])
        assert abs(res["csfa_v2"][0].average - res["csfa_v3"][0].average) < 1.0


def test_full_equals_v3_without_calibration():
    res = run_methods(replace(QUICK, alpha=1.0), ["csfa_v3", "csfa"], [2])
    assert res["csfa_v3"][0].session_accuracy == res["csfa"][0].session_accuracy


def test_v3_equals_v2_when_adapter_idles():
    cfg = replace(QUICK, adapt=replace(QUICK.adapt, epochs=0))
    res = run_methods(cfg, ["csfa_v2", "csfa_v3"], [2])
    assert res["csfa_v2"][0].session_accuracy == res["csfa_v3"][0].session_accuracy


def test_ablation_writes_combined_table(tmp_path):
    tables = ablate(replace(QUICK, output_dir=str(tmp_path)), seeds=[0])
    assert [t.method for t in tables] == list(ABLATION)
    assert [t.method for t in read_table(tmp_path / "ablation.csv")] == list(ABLATION)


def test_grid_values_and_errors(tmp_path):
    res = grid(replace(QUICK, output_dir=str(tmp_path)), "tau", [8, 16, 32, 64])
    assert [v for v, _ in res] == [8, 16, 32, 64]
    assert (tmp_path / "grid_tau.csv").read_text().startswith("parameter,value,method,seed,session,accuracy\n")
    with pytest.raises(ConfigError):
        grid(QUICK, "gamma", [1])


def test_single_value_grid_is_a_run():
    (_, tables), = grid(QUICK, "beta", [QUICK.adapt.beta])
    assert tables[0].session_accuracy == run(QUICK).session_accuracy


def test_determinism_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(replace(QUICK, seed=4, output_dir=str(a)))
    run(replace(QUICK, seed=4, output_dir=str(b)))
    for name in ("csfa_seed4.csv", "csfa_seed4.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    meta = json.loads((a / "csfa_seed4.json").read_text())
    assert meta["config"]["seed"] == 4 and meta["config_hash"] == replace(QUICK, seed=4).config_hash


def test_output_dir_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    run(replace(QUICK, method="csfa_v2", output_dir=str(tmp_path / "ignored")))
    assert (tmp_path / "env" / "csfa_v2_seed0.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_errors_name_session_and_phase():
    cfg = replace(QUICK, train=TrainConfig(epochs=1, lr=1e-6))
    with pytest.raises(PhaseError) as info:
        run(cfg)
    assert info.value.session == 0 and info.value.phase == "base-train" and info.value.category == "run"


def test_pretrained_model_is_reused():
    sc = Scenario(replace(QUICK.scenario, seed=0))
    trained = _base_model(QUICK, sc)
    assert run(QUICK, pretrained=trained).session_accuracy == run(QUICK).session_accuracy


def test_mean_average():
    assert mean_average([ResultTable("m", 0, [10.0]), ResultTable("m", 1, [20.0, 40.0])]) == 20.0


# command line

def test_cli_train_then_run_matches_single_run(tmp_path, capsys):
    model = tmp_path / "m.bin"
    flags = ["--epochs", "40", "--eval-samples", "400", "--seed", "1"]
    assert cli.main(["train-base", *flags, "--model", str(model)]) == 0
    capsys.readouterr()
    assert cli.main(["run", *flags, "--model", str(model), "--method", "csfa_v1"]) == 0
    with_model = capsys.readouterr().out
    assert cli.main(["run", *flags, "--method", "csfa_v1"]) == 0
    assert capsys.readouterr().out == with_model
    assert with_model.startswith("method,seed,session,accuracy\ncsfa_v1,1,0,")


def test_cli_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("sessions = 1\nway = 2\nshot = 3\nseed = 5\n")
    assert cli.main(["ablate", "--config", str(cfg), "--epochs", "40", "--eval-samples", "200",
                     "--adapt-lr", "0.1", "--output-dir", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 + 4 * 3 and out[1].startswith("csfa_v1,5,0,")
    assert (tmp_path / "o" / "ablation.csv").exists()


def test_cli_grid(capsys):
    assert cli.main(["grid", "--parameter", "shot", "--values", "1", "5", "--sessions", "1",
                     "--epochs", "40", "--eval-samples", "200"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "shot,value,mean_average" and out[1].startswith("shot,1,")


def test_cli_scenario_dump(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert cli.main(["scenario", "dump", "--sessions", "1", "--out", "d.csv"]) == 0
    assert (tmp_path / "d.csv").read_text().startswith("# base_classes = 6\n")


@pytest.mark.parametrize("argv, code, category", [
    (["run", "--alpha", "3"], 3, "config"),
    (["grid", "--parameter", "gamma", "--values", "1"], 2, "argument"),
    (["run", "--config", "/nonexistent/x.cfg"], 7, "io"),
    (["bogus"], 2, "argument"),
    (["run", "--epochs", "1", "--lr", "1e-6"], 6, "run"),
])
def test_cli_exit_codes(argv, code, category, capsys):
    assert cli.main(argv) == code
    assert f"[{category}]" in capsys.readouterr().err
