import csv
import io
import json
from fractions import Fraction

import pytest

from sparsecombine.cli import (
    BUDGET_ENV_VAR,
    CSV_FIELDS,
    EXIT_BAD_CONFIG,
    EXIT_BUDGET,
    EXIT_OK,
    EXIT_VERIFY_FAILED,
    StudyConfig,
    cmd_plan,
    cmd_solve,
    cmd_study,
    cmd_verify,
    main,
    write_records_csv,
)
from sparsecombine.combine import ConvergenceRecord


def run_main(argv):
    """main() normally returns the exit code; argparse errors raise SystemExit."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def read_csv(path):
    comments = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        filtered = []
        for line in fh:
            if line.startswith("# "):
                key, _, val = line[2:].rstrip("\n").partition("=")
                comments[key] = val
            else:
                filtered.append(line)
        rows = list(csv.DictReader(filtered))
    return comments, rows


# ---------------------------------------------------------------------------
# study subcommand


def test_study_csv_output(tmp_path):
    out = tmp_path / "run.csv"
    code = run_main(
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "6",
         "--out", str(out)]
    )
    assert code == EXIT_OK
    comments, rows = read_csv(out)
    assert comments["method"] == "SG"
    assert comments["dim"] == "2"
    assert comments["problem"] == "sine-2d"
    assert [r["n"] for r in rows] == ["3", "4", "5", "6"]
    assert list(rows[0].keys()) == list(CSV_FIELDS)
    assert rows[-1]["surplus"] == ""
    for r in rows[:-1]:
        assert r["surplus"] != ""
    # 17-digit floats survive a text round-trip bit-exactly
    assert float(rows[0]["value"]) == float(format(float(rows[0]["value"]), ".17g"))


def test_study_json_matches_csv(tmp_path):
    args = ["study", "--method", "HOFG", "--dim", "2", "--n-min", "3", "--n-max", "5"]
    csv_out = tmp_path / "a.csv"
    json_out = tmp_path / "b.json"
    assert run_main(args + ["--out", str(csv_out)]) == EXIT_OK
    assert run_main(args + ["--format", "json", "--out", str(json_out)]) == EXIT_OK
    _, rows = read_csv(csv_out)
    payload = json.loads(json_out.read_text())
    assert payload["config"]["method"] == "HOFG"
    assert len(payload["records"]) == len(rows)
    for jrec, crow in zip(payload["records"], rows):
        assert jrec["n"] == int(crow["n"])
        assert jrec["value"] == float(crow["value"])
        assert jrec["dof_unique"] == int(crow["dof_unique"])
        if crow["surplus"] == "":
            assert jrec["surplus"] is None
        else:
            assert jrec["surplus"] == float(crow["surplus"])


def test_study_rerun_bit_identical(tmp_path):
    args = ["study", "--method", "SG", "--dim", "3", "--n-min", "2", "--n-max", "4",
            "--parallel", "4"]
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert run_main(args + ["--out", str(out1)]) == EXIT_OK
    assert run_main(args + ["--out", str(out2)]) == EXIT_OK
    _, rows1 = read_csv(out1)
    _, rows2 = read_csv(out2)
    for a, b in zip(rows1, rows2):
        assert a["value"] == b["value"]
        assert a["surplus"] == b["surplus"]
        assert a["dof_unique"] == b["dof_unique"]


def test_study_budget_exit_and_partial_records(tmp_path):
    out = tmp_path / "partial.csv"
    code = run_main(
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "9",
         "--budget", "4000", "--out", str(out)]
    )
    assert code == EXIT_BUDGET
    comments, rows = read_csv(out)
    assert "budget_exceeded" in comments
    assert len(rows) >= 1  # completed records are flushed
    assert [r["method"] for r in rows] == ["SG"] * len(rows)


def test_study_budget_env_var(tmp_path, monkeypatch):
    out = tmp_path / "env.csv"
    monkeypatch.setenv(BUDGET_ENV_VAR, "4000")
    code = run_main(
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "9",
         "--out", str(out)]
    )
    assert code == EXIT_BUDGET
    comments, _ = read_csv(out)
    assert comments["node_budget"] == "4000"


def test_study_flag_overrides_env(tmp_path, monkeypatch):
    out = tmp_path / "flag.csv"
    monkeypatch.setenv(BUDGET_ENV_VAR, "10")
    code = run_main(
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--budget", "100000", "--out", str(out)]
    )
    assert code == EXIT_OK


def test_study_bad_env_budget(monkeypatch, capsys):
    monkeypatch.setenv(BUDGET_ENV_VAR, "not-a-number")
    code = run_main(["study", "--method", "SG", "--dim", "2", "--n-min", "3",
                     "--n-max", "4"])
    assert code == EXIT_BAD_CONFIG


def test_study_point_flag(tmp_path):
    out = tmp_path / "pt.csv"
    code = run_main(
        ["study", "--method", "FG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--point", "0.3,0.7", "--out", str(out)]
    )
    assert code == EXIT_OK
    comments, _ = read_csv(out)
    assert comments["point"] == "[0.3, 0.7]"


def test_study_single_record(tmp_path):
    out = tmp_path / "one.csv"
    code = run_main(
        ["study", "--method", "SG", "--dim", "2", "--n-min", "5", "--n-max", "5",
         "--out", str(out)]
    )
    assert code == EXIT_OK
    _, rows = read_csv(out)
    assert len(rows) == 1
    assert rows[0]["surplus"] == ""


@pytest.mark.parametrize(
    "argv",
    [
        ["study", "--method", "NOPE", "--dim", "2", "--n-min", "3", "--n-max", "4"],
        ["study", "--method", "SPLIT2D", "--dim", "3", "--n-min", "3", "--n-max", "4"],
        ["study", "--method", "SG", "--dim", "2", "--n-min", "5", "--n-max", "4"],
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--point", "0.3"],
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--point", "0.3,oops"],
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--budget", "-5"],
        ["study", "--method", "SG", "--dim", "2", "--n-min", "3", "--n-max", "4",
         "--parallel", "0"],
        ["study", "--dim", "2", "--n-min", "3", "--n-max", "4"],  # method missing
        ["study", "--method", "SG", "--n-min", "3", "--n-max", "4"],  # dim missing
        ["nonsense-subcommand"],
    ],
)
def test_bad_config_exits_3(argv, capsys):
    assert run_main(argv) == EXIT_BAD_CONFIG


# ---------------------------------------------------------------------------
# verify subcommand


def test_verify_ok_exit_zero():
    buf = io.StringIO()
    code = cmd_verify(6, trials=25, seed=0, stream=buf)
    assert code == EXIT_OK
    text = buf.getvalue()
    assert "checks passed" in text
    assert "FAIL" not in text


def test_verify_perturbed_weights_exit_one():
    buf = io.StringIO()
    code = cmd_verify(4, trials=10, seed=0, perturb_alpha1=Fraction(101, 100), stream=buf)
    assert code == EXIT_VERIFY_FAILED
    assert "FAILED" in buf.getvalue()


def test_verify_via_main(capsys):
    assert run_main(["verify", "--d-max", "4", "--trials", "10"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert run_main(
        ["verify", "--d-max", "3", "--trials", "10", "--perturb-alpha1", "101/100"]
    ) == EXIT_VERIFY_FAILED


def test_verify_rejects_bad_dmax(capsys):
    assert run_main(["verify", "--d-max", "0"]) == EXIT_BAD_CONFIG


# ---------------------------------------------------------------------------
# plan subcommand


def test_plan_standard_frozen(capsys):
    assert run_main(["plan", "--dim", "2", "--n", "1"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["d"] == 2
    assert payload["n"] == 1
    assert payload["coefficient_sum"] == "1/1"
    assert len(payload["terms"]) == 5
    coeffs = sorted(t["coeff"] for t in payload["terms"])
    assert coeffs == ["-1/1", "-1/1", "1/1", "1/1", "1/1"]


def test_plan_ho(capsys):
    assert run_main(["plan", "--dim", "1", "--n", "4", "--kind", "ho"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert [t["coeff"] for t in payload["terms"]] == ["-1/3", "4/3"]


def test_plan_bad_kind(capsys):
    assert run_main(["plan", "--dim", "2", "--n", "1", "--kind", "weird"]) == EXIT_BAD_CONFIG


def test_cmd_plan_stream():
    buf = io.StringIO()
    assert cmd_plan(2, 3, "standard", stream=buf) == EXIT_OK
    payload = json.loads(buf.getvalue())
    assert payload["coefficient_sum"] == "1/1"


# ---------------------------------------------------------------------------
# solve subcommand


def test_solve_json(capsys):
    assert run_main(["solve", "--dim", "2", "--level", "5,5"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["level"] == [5, 5]
    assert payload["nodes"] == 33 * 33
    assert abs(payload["error_at_point"]) < 1e-3
    assert payload["residual_inf"] < 1e-9


def test_solve_point_flag(capsys):
    assert run_main(
        ["solve", "--dim", "1", "--level", "4", "--point", "0.5"]
    ) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["point"] == [0.5]
    assert payload["value"] == pytest.approx(-1.0, abs=5e-3)


def test_solve_degenerate_level(capsys):
    assert run_main(["solve", "--dim", "2", "--level", "0,3"]) == EXIT_BAD_CONFIG


def test_solve_level_dim_mismatch(capsys):
    assert run_main(["solve", "--dim", "2", "--level", "3"]) == EXIT_BAD_CONFIG


def test_cmd_solve_stream():
    buf = io.StringIO()
    assert cmd_solve(1, (3,), stream=buf) == EXIT_OK
    payload = json.loads(buf.getvalue())
    assert payload["nodes"] == 9


# ---------------------------------------------------------------------------
# writers / config plumbing


def test_write_csv_empty_records_header_only():
    buf = io.StringIO()
    write_records_csv([], buf, metadata={"method": "SG"})
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# method=SG"
    assert lines[1] == ",".join(CSV_FIELDS)
    assert len(lines) == 2


def test_write_csv_float_precision():
    rec = ConvergenceRecord("SG", 2, 3, 10, 20, -0.70710678118654746, None, 0.125)
    buf = io.StringIO()
    write_records_csv([rec], buf)
    row = buf.getvalue().splitlines()[1].split(",")
    assert float(row[5]) == rec.value


def test_study_config_resolution():
    cfg = StudyConfig(method="SG", dim=3, n_min=1, n_max=2)
    assert cfg.resolved_point() == (0.25, 0.5, 0.25)
    assert cfg.resolved_parallelism() is None
    cfg2 = StudyConfig(method="SG", dim=2, n_min=1, n_max=2,
                       eval_point=(0.3, 0.7), parallelism=2)
    assert cfg2.resolved_point() == (0.3, 0.7)
    assert cfg2.resolved_parallelism() == 2


def test_cmd_study_stdout_default(capsys):
    cfg = StudyConfig(method="FG", dim=1, n_min=3, n_max=4)
    assert cmd_study(cfg) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("# method=FG")


def test_console_script_installed():
    import shutil
    import subprocess

    exe = shutil.which("sparsecombine")
    assert exe is not None
    proc = subprocess.run(
        [exe, "plan", "--dim", "1", "--n", "2"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["coefficient_sum"] == "1/1"
