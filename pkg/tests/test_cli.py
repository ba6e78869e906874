import subprocess
import sys

import numpy as np
import pytest

from clustcox import LABELS, read_csv
from clustcox.cli import analyze, format_report, main, read_report_csv, report_csv
from clustcox.simulate import Scenario, generate_trial
from clustcox.inference import t_quantile

GRID = """
[scenario]
n = 6
mbar = 10
cv = 0:0.4:0.2
tau = 0.05
p0 = 0.5
"""


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trial_csv(tmp_path):
    path = tmp_path / "trial.csv"
    code = main(["simulate", "--n", "10", "--mbar", "20", "--cv", "0.4", "--tau", "0.05",
                 "--p0", "0.5", "--seed", "3", "--out", str(path)])
    assert code == 0
    return path


def test_fit_d1_rob(capsys, d1_csv, tmp_path):
    out_csv = tmp_path / "r.csv"
    code, out, err = _run(capsys, "fit", "--data", str(d1_csv), "--estimators", "ROB", "--out", str(out_csv))
    assert code == 0
    assert "-0.34657" in out
    assert "df=1" in err
    row = read_report_csv(out_csv.read_text())[0]
    assert row.result.df == 1
    assert row.result.ci_high - row.result.estimate == pytest.approx(t_quantile(0.975, 1) * row.result.se)


def test_fit_d1_reports_failing_estimators(capsys, d1_csv):
    code, out, err = _run(capsys, "fit", "--data", str(d1_csv))
    assert code == 3
    assert len(out.strip().splitlines()) == 11
    assert "LeverageAtOne" in out
    assert err.strip().splitlines()[-1].startswith("numerical-error:")


def test_fit_ten_rows_share_estimate(capsys, trial_csv, tmp_path):
    out_csv = tmp_path / "report.csv"
    code, out, _ = _run(capsys, "fit", "--data", str(trial_csv), "--out", str(out_csv))
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 11
    assert [ln.split()[0] for ln in lines[1:]] == list(LABELS)
    logs = {ln.split()[1] for ln in lines[1:]}
    assert len(logs) == 1
    rows = read_report_csv(out_csv.read_text())
    assert len({r.result.p_value for r in rows}) > 1
    for r in rows:
        t = r.result
        assert (t.ci_low > 0 or t.ci_high < 0) == (t.p_value < 0.05)


def test_report_round_trip_idempotent(trial_csv):
    rows = analyze(read_csv(str(trial_csv)), LABELS)
    text = report_csv(rows)
    again = read_report_csv(text)
    assert report_csv(again) == text
    assert format_report(again) == format_report(rows)


def test_report_level_and_digits(capsys, trial_csv):
    code, out, _ = _run(capsys, "fit", "--data", str(trial_csv), "--level", "0.9", "--digits", "3",
                        "--estimators", "kc,md")
    assert code == 0
    assert "90% CI" in out
    assert [ln.split()[0] for ln in out.strip().splitlines()[1:]] == ["KC", "MD"]


def test_missing_header(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,1,1,1\nb,2,1,0\n")
    code, _, err = _run(capsys, "fit", "--data", str(bad))
    assert code == 2
    assert err.startswith("input-error:")
    assert "cluster,time,event,z1" in err
    assert len(err.strip().splitlines()) == 1


def test_bad_row_reports_line(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster,time,event,z1\na,1,1,1\nb,-2,1,0\n")
    code, _, err = _run(capsys, "fit", "--data", str(bad))
    assert code == 2
    assert "line 3" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--data", "/nonexistent/file.csv"],
        ["fit", "--data", "x.csv", "--estimators", "ROB,XX"],
        ["fit", "--data", "x.csv", "--level", "1.5"],
        ["simulate", "--n", "10", "--mbar", "20", "--tau", "0.1", "--p0", "0.1", "--pa", "0.2"],
        ["simulate", "--n", "7", "--mbar", "20", "--tau", "0.1"],
        ["mc", "--grid", "/nonexistent/grid.txt"],
        ["fit"],
        ["bogus"],
    ],
)
def test_input_errors_exit_2_single_line(capsys, argv):
    with pytest.raises(SystemExit) if argv in (["fit"], ["bogus"]) else _null():
        code = main(argv)
        assert code == 2
    _, err = capsys.readouterr()
    assert err.startswith("input-error:")
    assert len(err.strip().splitlines()) == 1


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_simulate_theta_comment(capsys):
    code, out, err = _run(capsys, "simulate", "--n", "4", "--mbar", "5", "--tau", "0.25")
    assert code == 0
    assert "# theta = 1.5\n" in out
    assert "control_censored=" in err


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--n", "10", "--mbar", "20", "--cv", "0", "--tau", "0.01", "--p0", "0.2",
            "--seed", "42"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_matches_generator(trial_csv):
    data = read_csv(str(trial_csv))
    ref = generate_trial(Scenario(n=10, mbar=20, cv=0.4, tau=0.05, p0=0.5, seed=3), 0)
    np.testing.assert_array_equal(data.time, ref.time)
    np.testing.assert_array_equal(data.event, ref.event)


def test_mc_estimator_subset_and_raw_dump(capsys, tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text(GRID)
    dump = tmp_path / "raw.csv"
    code, out, err = _run(capsys, "mc", "--grid", str(grid), "--reps", "8", "--seed", "1",
                          "--estimators", "KC,MD", "--raw-dump", str(dump))
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 1 + 3 * 2
    assert {ln.split(",")[6] for ln in lines[1:]} == {"KC", "MD"}
    assert err.count("scenario ") == 3
    assert len(dump.read_text().strip().splitlines()) == 1 + 3 * 8


def test_mc_workers_identical(tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text(GRID)
    outs = []
    for w in ("1", "3"):
        path = tmp_path / f"s{w}.csv"
        assert main(["mc", "--grid", str(grid), "--reps", "10", "--workers", w, "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_mc_grid_error_names_block_and_key(capsys, tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("[scenario]\nn = 6\nmbar = 10\ncv = 0\ntau = 0.1\n")
    code, _, err = _run(capsys, "mc", "--grid", str(grid), "--reps", "5")
    assert code == 2
    assert "block 1" in err and "'p0'" in err


def test_module_entry_point(d1_csv):
    proc = subprocess.run(
        [sys.executable, "-m", "clustcox", "fit", "--data", str(d1_csv), "--estimators", "ROB"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert "-0.34657" in proc.stdout
