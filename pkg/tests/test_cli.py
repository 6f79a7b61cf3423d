import json
import math
from pathlib import Path

import pytest

from artifact import cli
from artifact.errors import ParseError

ROOT = Path(__file__).resolve().parents[1]

BASIC = """\
# minimal circle run
ambient.kind = euclidean
ambient.dim = 2
initial.shape = circle
initial.n = 64
flow.T = 0.05
flow.record_every = 100
"""


def test_defaults_are_echoed():
    sc = cli.parse_scenario(BASIC)
    echo = sc.echo()
    assert echo["flow"]["c_cfl"] == 0.1
    assert echo["flow"]["scheme"] == "explicit-euler"
    assert echo["monitors"]["checks"] == []
    assert echo["run"]["seed"] == 0


def test_unknown_kind_reports_line():
    text = "ambient.dim = 2\nambient.kind = klein-bottle\n"
    with pytest.raises(ParseError) as err:
        cli.parse_scenario(text)
    assert err.value.line == 2
    assert str(err.value).startswith("line 2: unknown ambient.kind")


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("flow.colour = red", "unknown key flow.colour"),
        ("physics.T = 1", "unknown section"),
        ("flow.c_cfl = 0.5", "out of range"),
        ("flow.dt = soon", "bad value"),
        ("just words", "expected"),
        ("monitors.checks = radius, vibes", "unknown monitors check"),
    ],
)
def test_parse_errors_carry_line_numbers(line, fragment):
    text = BASIC + line + "\n"
    with pytest.raises(ParseError) as err:
        cli.parse_scenario(text)
    assert err.value.line == len(BASIC.splitlines()) + 1
    assert fragment in str(err.value)


def test_duplicate_and_missing_keys():
    with pytest.raises(ParseError, match="duplicate"):
        cli.parse_scenario(BASIC + "flow.T = 0.1\n")
    with pytest.raises(ParseError, match="missing required key initial.shape"):
        cli.parse_scenario("ambient.kind = euclidean\n")


def test_sweep_expansion():
    sc = cli.parse_scenario(BASIC + "sweep.axis = flow.dt\nsweep.values = 1e-4, 5e-5, 2.5e-5\n")
    derived = cli.expand_sweep(sc)
    assert [d["flow.dt"] for d in derived] == [1e-4, 5e-5, 2.5e-5]
    assert all(d["initial.n"] == 64 for d in derived)
    ints = cli.expand_sweep(sc, "initial.n", [32, 64])
    assert [d["initial.n"] for d in ints] == [32, 64]


def test_function_expressions_are_sandboxed():
    sc = cli.parse_scenario("ambient.kind = euclidean\ninitial.shape = graph-of-function\n"
                            "initial.function = 0.1*sin(pi*x)\ninitial.n = 33\n")
    fld = cli.build_initial(sc)
    assert fld.X[8, 1] == pytest.approx(0.1 * math.sin(math.pi * -0.5))
    bad = sc.with_value("initial.function", "__import__('os')")
    with pytest.raises(ParseError):
        cli.build_initial(bad)


def test_disabled_monitors_exit_zero(tmp_path):
    path = tmp_path / "basic.scn"
    path.write_text(BASIC)
    out = tmp_path / "out"
    assert cli.main(["run", str(path), "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"] == [] and summary["passes"] is True
    assert (out / "series.csv").read_text().startswith("step,t,sup_A,volume,mean_radius\n")
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["sample_000000.csv", "sample_000001.csv"]
    assert not list(out.rglob("*.tmp"))


def test_outputs_are_byte_identical(tmp_path):
    path = tmp_path / "s.scn"
    path.write_text(BASIC.replace("initial.n = 64", "initial.n = 32") + "monitors.checks = radius\n")
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", str(path), "--out", str(a), "--seed", "7", "--quiet"])
    cli.main(["run", str(path), "--out", str(b), "--seed", "7", "--quiet"])
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seeded_fixture_is_reproducible(tmp_path):
    sc = cli.parse_scenario("ambient.kind = sphere\nambient.dim = 2\ninitial.shape = great-circle\n"
                            "initial.n = 64\nflow.steps = 1\nflow.snapshots = 0\n"
                            "monitors.checks = hessian\nmonitors.samples = 3\n")
    r1 = cli.run_scenario(sc, tmp_path / "x", seed=11)
    r2 = cli.run_scenario(sc, tmp_path / "y", seed=11)
    r3 = cli.run_scenario(sc, tmp_path / "z", seed=12)
    assert r1.checks == r2.checks
    assert r1.checks[0]["value"] != r3.checks[0]["value"]
    assert r1.passes


def test_bad_seed_and_parse_exit_codes(tmp_path, capsys):
    path = tmp_path / "bad.scn"
    path.write_text("ambient.kind = klein-bottle\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "line 1: unknown ambient.kind" in capsys.readouterr().err
    good = tmp_path / "good.scn"
    good.write_text(BASIC)
    assert cli.main(["run", str(good), "--seed", str(2**64)]) == 2


def test_failing_check_gives_nonzero_exit(tmp_path):
    path = tmp_path / "f.scn"
    path.write_text(BASIC + "monitors.checks = radius\nmonitors.tol = 1e-12\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_dt_sweep_converges_at_first_order(tmp_path):
    table = cli.sweep(cli.parse_scenario((ROOT / "scenarios/sweeps/circle_dt.scn").read_text()), tmp_path)
    errs = [r["error"] for r in table["rows"]]
    assert errs[0] > errs[1] > errs[2]
    assert table["monotone"]
    assert table["fitted_order"] >= 0.9
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == "flow.dt,error"


def test_verify_directory(tmp_path):
    src = tmp_path / "suite"
    src.mkdir()
    (src / "a.scn").write_text(BASIC + "monitors.checks = radius\nmonitors.tol = 1e-2\n")
    (src / "b.scn").write_text(BASIC.replace("circle", "ellipse"))
    assert cli.main(["verify", str(src), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    (src / "c.scn").write_text(BASIC + "monitors.checks = radius\nmonitors.tol = 1e-12\n")
    assert cli.main(["verify", str(src), "--out", str(tmp_path / "o2"), "--quiet"]) == 1


def test_audit_command_writes_report(tmp_path):
    path = tmp_path / "p.scn"
    path.write_text(BASIC.replace("flow.T = 0.05", "flow.T = 0.3") + "audit.kind = persistence\n"
                    "audit.c0 = 1\naudit.T1 = 0.3\n")
    assert cli.main(["audit", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "audit.json").read_text())
    assert rep["kind"] == "persistence" and rep["passes"] is True and rep["meets_expectation"] is True


def test_shipped_scenarios_parse():
    files = sorted((ROOT / "scenarios").rglob("*.scn"))
    assert len(files) >= 10
    for f in files:
        cli.parse_scenario(f.read_text())
