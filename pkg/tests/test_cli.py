import csv
import io
import json

import numpy as np
import pytest

from calibra.cli import main, parse_config, read_config_file, resolve_config
from calibra.data import AuxDataset, write_aux_csv, write_main_csv
from calibra.simgen import Scenario, gen_study

FAST = ["--rf-trees", "20", "--bootstrap-reps", "2", "--seed", "3"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    main, aux = gen_study(Scenario(case=1, n=160, p=5, aux_multiplier=1, levels=3),
                          np.random.default_rng(0))
    write_main_csv(main, d / "main.csv")
    write_aux_csv(AuxDataset(aux.y, aux.x), d / "aux.csv")
    return d


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def _estimate(files, *extra):
    return ["estimate", "--main", str(files / "main.csv"), "--aux", str(files / "aux.csv"),
            "--outcome", "y", "--exposure", "x", *FAST, *extra]


def test_defaults_applied(tmp_path):
    (tmp_path / "c.cfg").write_text("# nothing set\n")
    cmd, cfg = parse_config(["estimate", "--config", str(tmp_path / "c.cfg"),
                             "--main", "m.csv", "--outcome", "y", "--exposure", "x"])
    assert cmd == "estimate"
    assert cfg["ps_clip"] == 1e-3 and cfg["working_function"] == "I"
    assert cfg["bootstrap_reps"] is None  # estimate then uses B = 100
    from calibra.cli import study_config
    assert study_config(cfg, default_reps=100).bootstrap_reps == 100


def test_working_function_two(tmp_path):
    (tmp_path / "c.cfg").write_text("working_function = II\n")
    assert resolve_config(read_config_file(tmp_path / "c.cfg"), {})["working_function"] == "II"


def test_flags_override_file(tmp_path):
    (tmp_path / "c.cfg").write_text("seed = 5\n")
    _, cfg = parse_config(["simulate", "--config", str(tmp_path / "c.cfg"), "--seed", "9"])
    assert cfg["seed"] == 9


def test_negative_bootstrap_reps_rejected(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("bootstrap_reps=-1\n")
    code, _, err = _run(capsys, ["simulate", "--config", str(tmp_path / "c.cfg")])
    assert code == 2 and "bootstrap_reps must be ≥ 0" in err


def test_unknown_key_rejected(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("colour = blue\n")
    code, _, err = _run(capsys, ["simulate", "--config", str(tmp_path / "c.cfg")])
    assert code == 2 and "unknown key" in err


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("CALIBRA_THREADS", "3")
    assert parse_config(["simulate"])[1]["threads"] == 3
    assert parse_config(["simulate", "--threads", "1"])[1]["threads"] == 1


def test_malformed_csv_exit_code(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("y,x,z1\n1.0,0,0.5\n2.0,1,\n")
    code, _, err = _run(capsys, ["estimate", "--main", str(tmp_path / "bad.csv"),
                                 "--outcome", "y", "--exposure", "x"])
    assert code == 4 and "row 2" in err and "z1" in err


def test_validation_exit_code(tmp_path, capsys):
    rows = "\n".join(f"{i},{int(i < 3)},{i * 0.1}" for i in range(30))
    (tmp_path / "small.csv").write_text("y,x,z1\n" + rows + "\n")
    code, _, err = _run(capsys, ["estimate", "--main", str(tmp_path / "small.csv"),
                                 "--outcome", "y", "--exposure", "x"])
    assert code == 2 and "at least 10" in err


def test_el_infeasible_exit_code(files, tmp_path, capsys):
    main, aux = gen_study(Scenario(case=1, n=160, p=5, aux_multiplier=1),
                          np.random.default_rng(1))
    write_main_csv(main, tmp_path / "m.csv")
    write_aux_csv(AuxDataset(aux.y + 1000.0, aux.x), tmp_path / "a.csv")
    code, _, err = _run(capsys, ["estimate", "--main", str(tmp_path / "m.csv"), "--aux",
                                 str(tmp_path / "a.csv"), "--outcome", "y", "--exposure", "x",
                                 *FAST])
    assert code == 3 and "incompatible" in err


def test_estimate_report_layout(files, capsys):
    code, out, _ = _run(capsys, _estimate(files, "--format", "json"))
    assert code == 0
    rep = json.loads(out)
    assert rep["schema_version"]
    methods = {r["method"] for r in rep["records"]}
    assert methods == {"Raw", "AIPTW.Preg", "AIPTW.RF", "AIPTW.GB", "CML", "CMLIB"}
    assert sorted({r["level"] for r in rep["records"]}) == [0, 1, 2]
    for col in ("tau_hat", "bsd", "ci_low", "ci_high", "p_value", "n", "N", "rho_hat"):
        assert col in rep["records"][0]
    prov = rep["provenance"]
    assert prov["seed"] == 3 and len(prov["config_hash"]) == 64
    assert prov["chosen_hyperparameters"]


def test_missing_aux_drops_cmlib(files, capsys):
    argv = [a for a in _estimate(files) if a not in ("--aux", str(files / "aux.csv"))]
    code, out, _ = _run(capsys, argv)
    rep = json.loads(out)
    assert code == 0
    assert "CMLIB" not in {r["method"] for r in rep["records"]}
    assert any("CMLIB" in n for n in rep["notes"])


def test_json_and_csv_carry_identical_numbers(files, capsys):
    _, js, _ = _run(capsys, _estimate(files, "--format", "json"))
    _, cs, _ = _run(capsys, _estimate(files, "--format", "csv"))
    recs = json.loads(js)["records"]
    rows = list(csv.DictReader(io.StringIO(cs)))
    assert len(rows) == len(recs)
    for r, c in zip(recs, rows):
        for k in ("tau_hat", "bsd", "ci_low", "ci_high", "p_value"):
            assert (None if c[k] == "" else float(c[k])) == r[k]


def test_provenance_reproduces_run(files, tmp_path, capsys):
    _, first, _ = _run(capsys, _estimate(files, "--format", "json"))
    cfg = json.loads(first)["provenance"]["config"]
    lines = []
    for k, v in cfg.items():
        if v is None or v == []:
            continue
        lines.append(f"{k} = {','.join(v) if isinstance(v, list) else v}")
    (tmp_path / "echo.cfg").write_text("\n".join(lines) + "\n")
    _, again, _ = _run(capsys, ["estimate", "--config", str(tmp_path / "echo.cfg")])
    assert json.loads(again)["records"] == json.loads(first)["records"]


def test_estimate_deterministic_across_threads(files, tmp_path, capsys):
    for t in ("1", "2"):
        assert main(_estimate(files, "--threads", t, "--out", str(tmp_path / f"r{t}.json"))) == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_simulate_single_run_csv(capsys):
    code, out, _ = _run(capsys, ["simulate", "--case", "1", "--p", "5", "--n", "150",
                                 "--aux-mult", "1", "--runs", "1", "--rf-trees", "20",
                                 "--format", "csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 12
    assert all(r["mcsd"] == "" for r in rows)
    assert rows[0]["bias"] != ""


def test_simulate_json_has_truth(capsys):
    code, out, _ = _run(capsys, ["simulate", "--case", "3", "--p", "5", "--n", "150",
                                 "--aux-mult", "1", "--runs", "1", "--rf-trees", "20"])
    rep = json.loads(out)
    assert code == 0 and rep["provenance"]["truth"][1] == pytest.approx(1.68617, abs=1e-4)
    assert rep["provenance"]["truth_se"] == [0.0, 0.0]


def test_match_subcommand(tmp_path, capsys):
    main_ds, aux = gen_study(Scenario(case=1, n=200, p=5, aux_multiplier=3),
                             np.random.default_rng(2))
    write_main_csv(main_ds, tmp_path / "m.csv")
    with open(tmp_path / "a.csv", "w") as fh:
        fh.write("y,x,z1,z2\n")
        for yy, xx, (a, b) in zip(aux.y, aux.x, aux.shared):
            fh.write(f"{float(yy)!r},{int(xx)},{float(a)!r},{float(b)!r}\n")
    code, out, err = _run(capsys, ["match", "--main", str(tmp_path / "m.csv"), "--aux",
                                 str(tmp_path / "a.csv"), "--outcome", "y", "--exposure", "x",
                                 "--match-cols", "z1,z2", "--ratio", "2"])
    assert code == 0, err
    rep = json.loads(out)
    assert code == 0 and [r["column"] for r in rep["records"]] == ["z1", "z2"]
    assert len(rep["kept_aux_indices"]) == 400
