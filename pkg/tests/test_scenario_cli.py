import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from pilotwave.cli import EXIT_DIAGNOSTIC, EXIT_INVALID, EXIT_OK, main
from pilotwave.runner import doubleslit_scenario, run
from pilotwave.scenario import (
    ScenarioError,
    load_scenario,
    parse_scenario,
    shipped_scenario,
)

MINIMAL = """
[grid]
dim = 1
n = 201
x_min = -10
x_max = 10

[time]
dt = 0.01
n_steps = 20

[initial]
kind = gaussian
sigma = 1.0
"""

QUICK = MINIMAL.replace("n_steps = 20", "n_steps = 200\nsnapshot_stride = 50") + """
[trajectories]
n_particles = 300
seed = 5
bins = 20

[output]
fields = P, S, v, u
field_stride = 2
dots = true
staged_dots = 8, 100
diagnostics = continuity, hjb, zero_point, orthogonality
"""


def write(tmp_path: Path, text: str, name: str = "s.ini") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def file_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix in (".csv", ".pgm")}


# ---------------------------------------------------------------- parsing

def test_minimal_defaults():
    sc = parse_scenario(MINIMAL)
    assert sc.consts.hbar == 1.0 and sc.consts.mass == 1.0 and sc.consts.c == 1.0
    assert sc.grid.n == (201,) and sc.time.snapshot_stride == 1
    assert sc.potential_spec.kind == "free" and sc.slits is None
    assert sc.output.fields == () and not sc.output.dots


def test_slits_need_2d():
    text = MINIMAL + "\n[potential]\nkind = barrier\n\n[slits]\nbarrier_x = 0\nthickness = 0.5\n" \
        "centers = -1, 1\nwidth = 0.5\nheight = 100\n"
    with pytest.raises(ScenarioError, match="slits require 2D grid"):
        parse_scenario(text)


def test_dt_must_be_positive():
    with pytest.raises(ScenarioError, match="dt must be positive") as info:
        parse_scenario(MINIMAL.replace("dt = 0.01", "dt = 0"))
    assert info.value.key == "dt"
    assert info.value.line == MINIMAL.splitlines().index("dt = 0.01") + 1


def test_unknown_key_reports_line_and_key():
    text = MINIMAL.replace("sigma = 1.0", "sigma = 1.0\nsigmaa = 2")
    with pytest.raises(ScenarioError, match="unknown key") as info:
        parse_scenario(text)
    assert info.value.key == "sigmaa"
    assert info.value.line == text.splitlines().index("sigmaa = 2") + 1
    assert f"line {info.value.line}" in str(info.value)


@pytest.mark.parametrize("edit, message", [
    (("n = 201", "n = abc"), "expected an integer"),
    (("x_max = 10", "x_max = -20"), "x_max must exceed x_min"),
    (("kind = gaussian", "kind = banana"), "expected one of"),
    (("[time]", "[time]\n[time]"), "duplicate section"),
    (("[grid]", "[grids]"), "unknown section"),
    (("dim = 1", "dim = 1\ndim = 1"), "duplicate key"),
    (("dim = 1", "dim 1"), "malformed line"),
])
def test_validation_errors(edit, message):
    with pytest.raises(ScenarioError, match=message):
        parse_scenario(MINIMAL.replace(*edit))


def test_missing_section():
    with pytest.raises(ScenarioError, match=r"missing section \[time\]"):
        parse_scenario(MINIMAL.split("[time]")[0])


def test_comments_and_blank_lines_ignored():
    text = "# header\n" + MINIMAL.replace("dim = 1", "dim = 1   # one dimension")
    assert parse_scenario(text).grid.dim == 1


def test_shipped_scenarios_parse():
    for name in ("free_gaussian", "harmonic", "doubleslit"):
        sc = shipped_scenario(name)
        assert sc.time.dt > 0
    ds = shipped_scenario("doubleslit")
    assert ds.output.staged_dots == (8, 100, 3000, 100000)
    assert ds.slits is not None and ds.grid.dim == 2


def test_screen_outside_grid_rejected(small_slits):
    from conftest import SMALL_SLITS
    with pytest.raises(ScenarioError, match="screen must lie inside the grid"):
        parse_scenario(SMALL_SLITS.replace("screen_x = 30", "screen_x = 45"))


# ---------------------------------------------------------------- running

def test_run_writes_layout_and_manifest(tmp_path):
    sc = parse_scenario(QUICK)
    manifest = run(sc, tmp_path / "out")
    root = tmp_path / "out"
    data = json.loads((root / "manifest.json").read_text())
    listed = {f["path"]: f for f in data["files"]}
    on_disk = {p.relative_to(root).as_posix() for p in root.rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    assert set(listed) == on_disk
    for path, entry in listed.items():
        assert hashlib.sha256((root / path).read_bytes()).hexdigest() == entry["sha256"]
    assert "fields/t0_P.csv" in listed and "dots/N8.pgm" in listed and "dots/N100.csv" in listed
    assert "diagnostics/hjb.json" in listed
    assert data["scenario"]["time"]["dt"] == 0.01 and data["seed"] == 5
    assert data["norm_drift"] < 1e-10 and manifest.diagnostics_passed


def test_pgm_header(tmp_path):
    run(parse_scenario(QUICK), tmp_path)
    raw = (tmp_path / "dots" / "N100.pgm").read_bytes()
    assert raw.startswith(b"P5\n")
    width, height = map(int, raw.split(b"\n")[1].split())
    assert raw.split(b"\n")[2] == b"255"
    assert len(raw) - raw.index(b"255\n") - 4 == width * height


def test_same_seed_byte_identical(tmp_path):
    sc = parse_scenario(QUICK)
    run(sc, tmp_path / "a")
    run(sc, tmp_path / "b")
    a, b = file_bytes(tmp_path / "a"), file_bytes(tmp_path / "b")
    assert a and a == b


def test_seed_override_changes_dots(tmp_path):
    sc = parse_scenario(QUICK)
    run(sc, tmp_path / "a")
    run(sc, tmp_path / "b", seed=6)
    a, b = file_bytes(tmp_path / "a"), file_bytes(tmp_path / "b")
    assert a["fields/t0_P.csv"] == b["fields/t0_P.csv"]
    assert a["dots/N100.csv"] != b["dots/N100.csv"]


def test_csv_precision(tmp_path):
    run(parse_scenario(QUICK), tmp_path)
    lines = (tmp_path / "fields" / "t0_P.csv").read_text().splitlines()
    value = lines[len(lines) // 2].split(",")[-1]
    mantissa = value.lower().split("e")[0].replace("-", "").replace(".", "").lstrip("0")
    assert len(mantissa) == 17


# -------------------------------------------------------------------- CLI

def test_cli_run_exit_ok(tmp_path, capsys):
    cfg = write(tmp_path, QUICK)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "hjb" in out and "PASS" in out


def test_cli_invalid_config_exit_1(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL.replace("dt = 0.01", "dt = -1"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "dt must be positive" in capsys.readouterr().err


def test_cli_missing_file_exit_1(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini"),
                 "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_cli_usage_error_exit_1(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["run", "--out", str(tmp_path)])
    assert info.value.code == EXIT_INVALID
    with pytest.raises(SystemExit) as info:
        main(["doubleslit", "--dots", "0,5", "--out", str(tmp_path)])
    assert info.value.code == EXIT_INVALID


def test_cli_failing_diagnostic_exit_2(tmp_path, capsys):
    text = QUICK.replace("diagnostics = continuity", "residual_tol = 1e-12\ndiagnostics = continuity")
    cfg = write(tmp_path, text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DIAGNOSTIC
    assert "FAIL" in capsys.readouterr().out


def test_cli_diagnose_writes_every_report(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    code = main(["diagnose", "--config", str(cfg), "--out", str(tmp_path / "d")])
    names = {p.stem for p in (tmp_path / "d" / "diagnostics").glob("*.json")}
    assert names == {"continuity", "hjb", "zero_point", "orthogonality", "fluctuations"}
    assert not list((tmp_path / "d").glob("fields/*"))
    assert code == EXIT_OK


def test_shipped_free_gaussian_passes(tmp_path):
    sc = shipped_scenario("free_gaussian")
    manifest = run(sc, tmp_path)
    assert manifest.diagnostics and manifest.diagnostics_passed
    for name in ("continuity", "hjb", "zero_point"):
        rep = json.loads((tmp_path / "diagnostics" / f"{name}.json").read_text())
        assert rep["pass"] and rep["l_inf"] < rep["threshold"]
    assert list((tmp_path / "fields").glob("*_Q.csv"))


def test_shipped_harmonic_passes(tmp_path):
    assert run(shipped_scenario("harmonic"), tmp_path).diagnostics_passed


def test_load_scenario_from_path(tmp_path):
    sc = load_scenario(write(tmp_path, MINIMAL, "mini.ini"))
    assert sc.name == "mini"


# ----------------------------------------------------------- double slit

def test_doubleslit_sugar_default_stages():
    sc = doubleslit_scenario()
    base = shipped_scenario("doubleslit")
    assert sc.output.staged_dots == base.output.staged_dots
    assert sc.trajectories.n_particles == base.trajectories.n_particles


def test_doubleslit_sugar_scales_particles():
    base = shipped_scenario("doubleslit")
    sc = doubleslit_scenario([300000, 8], seed=9)
    assert sc.output.staged_dots == (8, 300000)
    assert sc.trajectories.seed == 9
    assert sc.trajectories.n_particles == int(np.ceil(base.trajectories.n_particles * 3))
    with pytest.raises(ValueError):
        doubleslit_scenario([0])
