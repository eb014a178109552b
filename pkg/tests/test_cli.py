import csv
import json
from pathlib import Path

import numpy as np
import pytest

from tselab import cli
from tselab.errors import ConvergenceError
from tselab.experiments import CSV_HEADER

GOLDEN = Path(__file__).parent / "golden"
SMALL = ["--n", "6", "--d", "16", "--heads", "2", "--depth", "3", "--trials", "2", "--seed", "7"]


def _run(tmp_path, *argv):
    return cli.main([*argv, "--out", str(tmp_path)])


def test_escalate_matches_golden(tmp_path):
    assert _run(tmp_path, "escalate", *SMALL) == 0
    assert (tmp_path / "escalation.csv").read_bytes() == (GOLDEN / "escalate_small.csv").read_bytes()


def test_golden_header_order():
    with open(GOLDEN / "escalate_small.csv", newline="") as fh:
        assert tuple(next(csv.reader(fh))) == CSV_HEADER


def test_repeat_runs_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["escalate", "--seed", "7", "--trials", "3", "--n", "8", "--d", "16", "--heads", "4", "--depth", "4"]
    assert cli.main([*args, "--out", str(a)]) == 0
    assert cli.main([*args, "--out", str(b)]) == 0
    assert (a / "escalation.csv").read_bytes() == (b / "escalation.csv").read_bytes()


def test_manifest_written_and_lists_outputs(tmp_path):
    assert _run(tmp_path, "prenorm", *SMALL, "--format", "json") == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"] == [str(tmp_path / "prenorm.json")]
    assert man["seed"] == 7 and man["spec"]["depth"] == 3 and man["finished"]
    rows = json.loads((tmp_path / "prenorm.json").read_text())
    assert {r["quantity"] for r in rows} >= {"norm_x", "norm_x_hat", "t_sim"}


def test_deescalate_full_removal_gives_unit_diversity(tmp_path):
    assert _run(tmp_path, "deescalate", *SMALL, "--tau", "1.0") == 0
    with open(tmp_path / "deescalate.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["quantity"].startswith("t_div")]
    assert rows and all(abs(float(r["mean"]) - 1.0) <= 1e-10 for r in rows)


def test_oracle_exit_status(tmp_path, capsys):
    args = ["oracle", "--n", "8", "--d", "16", "--heads", "2", "--alpha", "1.0", "--trials", "2000"]
    assert _run(tmp_path, *args) == 0
    out = capsys.readouterr().out
    assert out.count("pass ") == 2 and "FAIL" not in out


def test_oracle_failure_exits_one(tmp_path, monkeypatch):
    import tselab.experiments as ex

    monkeypatch.setattr(ex, "expected_xi", lambda a, s, m1, m2: (100.0, 100.0))
    assert _run(tmp_path, "oracle", "--n", "8", "--d", "16", "--heads", "1", "--trials", "200") == 1


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.main(["escalate", "--bogus"]) == 1
    assert cli.main(["nonsense"]) == 1
    assert _run(tmp_path, "escalate", "--d", "10", "--heads", "3") == 1
    assert _run(tmp_path, "escalate", "--tau", "0.1,0.2") == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "manifest.json").exists()


def test_convergence_error_exits_two(tmp_path, monkeypatch):
    def boom(p):
        raise ConvergenceError("no convergence", last=0.0, iterations=1)

    monkeypatch.setattr(cli, "spectral_report", boom)
    assert cli.main(["spectral", "--random", "--n", "8"]) == 2


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# small run\nn = 6\nd = 16\nheads = 2\ndepth = 2\ntrials = 1\nseed = 1\n")
    assert _run(tmp_path, "escalate", "--config", str(conf), "--seed", "5") == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 5 and man["spec"]["cfg"]["n"] == 6 and man["spec"]["depth"] == 2
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = blue\n")
    assert _run(tmp_path, "escalate", "--config", str(bad)) == 1


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["eta", "--n", "10", "--d", "8", "--trials", "1"]) == 0
    assert (tmp_path / "env" / "eta_concentration.csv").exists()


def _spectral(tmp_path, capsys, p):
    f = tmp_path / "p.csv"
    np.savetxt(f, p, delimiter=",")
    code = cli.main(["spectral", str(f)])
    out = capsys.readouterr()
    fields = dict(line.split(" = ") for line in out.out.splitlines() if " = " in line)
    return code, fields, out.err


def test_spectral_identity_and_uniform(tmp_path, capsys):
    code, f, _ = _spectral(tmp_path, capsys, np.eye(5))
    assert code == 0 and float(f["lambda2_modulus"]) == pytest.approx(1.0, abs=1e-12)
    code, f, _ = _spectral(tmp_path, capsys, np.full((7, 7), 1 / 7))
    assert code == 0 and float(f["lambda2_modulus"]) <= 1e-10 and f["row_stochastic"] == "yes"


def test_spectral_random(capsys):
    assert cli.main(["spectral", "--random", "--n", "64", "--seed", "3"]) == 0
    f = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    assert f["n"] == "64" and float(f["lambda2_modulus"]) < 1


def test_spectral_rejects_non_stochastic(tmp_path, capsys):
    p = np.full((4, 4), 0.25)
    p[1] = [0.25, 0.25, 0.25, 0.2]
    p[2] = [0.5, 0.25, 0.25, 0.3]
    code, _, err = _spectral(tmp_path, capsys, p)
    assert code == 1 and "row 2" in err


def test_spectral_needs_exactly_one_source(tmp_path):
    assert cli.main(["spectral"]) == 1
    assert cli.main(["spectral", str(tmp_path / "missing.csv")]) == 1
