import json

import pytest

from geoq import cli

N18 = ["--servers", "18", "--load", "0.90", "--service-days", "5.3"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_compare_prints_the_three_columns(capsys):
    code, out, _ = run(capsys, "compare", *N18)
    assert code == 0
    line = next(ln for ln in out.splitlines() if ln.startswith("queue_len"))
    fields = line.split()
    assert fields[1:3] == ["4.65", "4.62"] and fields[5] == "4.91"


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", *N18)
    assert code == 0
    assert out.count("PASS") == 10 and "FAIL" not in out


def test_unstable_scenario_exits_1(capsys):
    code, out, err = run(capsys, "solve", "--servers", "2", "--arrival-rate", "0.5", "--service-prob", "0.2")
    assert code == 1 and out == ""
    assert "R < N" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--bogus"],
        ["frobnicate"],
        ["solve", *N18, "--arrival-rate", "3"],  # --load and --arrival-rate together
        ["solve", "--servers", "18", "--load", "0.9"],  # no service parameter
        ["solve", "--servers", "18", "--service-prob", "0.2"],  # no rate
        ["solve", *N18, "--format", "xml"],
        ["approx", "--servers", "18", "--load", "0.9", "--service-days", "0.5"],
    ],
)
def test_validation_errors_exit_1(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 1 and out == "" and err


def test_config_and_inline_are_exclusive(capsys, tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"n_servers": 18, "arrival_rate": 3.0, "service_prob": 0.2}))
    code, _, err = run(capsys, "solve", "--config", str(cfg), "--servers", "18")
    assert code == 1 and "not both" in err
    code, out, _ = run(capsys, "solve", "--config", str(cfg), "--format", "json")
    assert code == 0 and json.loads(out)["params"]["Lambda"] == 3.0


def test_load_and_arrival_rate_round_trip(capsys):
    _, a, _ = run(capsys, "solve", *N18, "--format", "json")
    lam = json.loads(a)["params"]["Lambda"]
    assert lam == 0.9 * 18 * (1 / 5.3)
    _, b, _ = run(capsys, "solve", "--servers", "18", "--arrival-rate", repr(lam), "--service-days", "5.3",
                  "--format", "json")
    assert json.loads(b)["params"]["rho"] == pytest.approx(0.9, abs=1e-15)
    assert json.loads(a)["exact"] == json.loads(b)["exact"]


def test_solve_writes_pmf(capsys, tmp_path):
    path = tmp_path / "pi.csv"
    code, out, _ = run(capsys, "solve", *N18, "--format", "csv", "--pmf-out", str(path))
    assert code == 0 and out.startswith("metric,exact")
    assert path.exists() and (tmp_path / "pi.csv.meta").exists()


def test_out_file(capsys, tmp_path):
    path = tmp_path / "m.json"
    code, out, _ = run(capsys, "approx", *N18, "--variant", "constant_coeff", "--format", "json", "--out", str(path))
    assert code == 0 and out == ""
    assert json.loads(path.read_text())["constant_coeff"]["queue_len"] == pytest.approx(4.91, abs=0.005)


def test_simulate_is_seeded(capsys):
    argv = ["simulate", *N18, "--epochs", "5000", "--replications", "3", "--format", "json"]
    a = json.loads(run(capsys, *argv)[1])
    b = json.loads(run(capsys, *argv)[1])
    c = json.loads(run(capsys, *argv, "--seed", "1")[1])
    assert a == b and a["seed"] == 0 and a["metrics"] != c["metrics"]


def test_sweep(capsys):
    code, out, _ = run(capsys, "sweep", *N18, "--regime", "qed", "--s", "1", "--multipliers", "1", "2", "3",
                       "--format", "csv")
    assert code == 0
    assert out.count("\n") == 1 + 3 * 2  # header + (exact, stein) per row


def test_sweep_needs_a_regime(capsys):
    assert run(capsys, "sweep", *N18)[0] == 1


def test_tables_out_dir_from_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("GEOQ_OUT_DIR", str(tmp_path))
    code, out, err = run(capsys, "tables", "c13")
    assert code == 0 and "26.41%" in out
    assert (tmp_path / "c13" / "report.csv").exists() and (tmp_path / "c13" / "report.meta").exists()


def test_tables_list(capsys):
    code, out, _ = run(capsys, "tables", "--list")
    assert code == 0 and "table2" in out and "c14" in out


def test_tables_unknown_name(capsys):
    assert run(capsys, "tables", "table9")[0] == 1


def test_numerical_failure_exits_2(capsys, monkeypatch):
    from geoq import markov

    def broken(*a, **k):
        raise markov.ConvergenceError("no convergence", 1.0)

    monkeypatch.setattr(markov, "solve", broken)
    code, out, err = run(capsys, "solve", *N18)
    assert code == 2 and "numerical failure" in err and out == ""
