import json
import shutil
import subprocess
import sys

import pytest

from crystalwalk.cli import load_config, main, resolve


def _rows(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def test_spectrum_rows(tmp_path):
    assert main(["spectrum", "--lattice", "hexagonal", "--grid", "64", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "spectrum_hexagonal.csv")
    assert rows[0] == "k1,k2,kind,index,re,im"
    assert len(rows) - 1 == 64 * 64 * (2 + 6)
    rep = json.loads((tmp_path / "spectrum_hexagonal_report.json").read_text())
    assert rep["passed"] and rep["generic_multiplicities"] == [[1, 1]]


def test_lattice_aliases(tmp_path):
    assert main(["spectrum", "--lattice", "honeycomb", "--grid", "8", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "spectrum_hexagonal.csv").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["spectrum", "--lattice", "bogus"],
        ["spectrum", "--grid", "4"],
        ["density", "--grid", "32"],
        ["simulate", "--L", "3"],
        ["orbit", "--pitch", "-1"],
        ["verify", "--only", "nonsense"],
        ["frobnicate"],
        ["spectrum", "--xi", "1"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == 2
    assert capsys.readouterr().err


def test_wraparound_exits_2(tmp_path, capsys):
    assert main(["simulate", "--L", "16", "--n", "8", "--out", str(tmp_path)]) == 2
    assert "L" in capsys.readouterr().err


def test_missing_quotient_file_exits_2(tmp_path):
    assert main(["spectrum", "--quotient", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nlattice = kagome\ngrid = 24\nn = 3, 5\nxi = 1,0 2,2\nper-band = yes\n")
    c = resolve(["spectrum", "--config", str(cfg), "--grid", "16"])
    assert c.lattice == "kagome" and c.grid == 16 and c.n == [3, 5]
    assert c.xi == [(1.0, 0.0), (2.0, 2.0)] and c.per_band is True
    assert resolve(["orbit"]).grid == 128 and resolve(["density"]).grid == 256


@pytest.mark.parametrize("text", ["colour = red\n", "grid = many\n", "just words\n", "per_band = maybe\n"])
def test_bad_config_exits_2(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["spectrum", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_load_config_lists(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("only = ellipse 4\npitch = 0, 2.5\n")
    assert load_config(str(cfg)) == {"only": ["ellipse", "4"], "pitch": [0.0, 2.5]}


def test_orbit_outputs(tmp_path):
    assert main(["orbit", "--lattice", "hexagonal", "--grid", "32", "--samples", "50", "--pitch", "0", "--pitch", "10", "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {
        "orbit_hexagonal.csv",
        "winding_hexagonal_r0.csv",
        "winding_hexagonal_r10.csv",
        "boundary_hexagonal.csv",
        "inner_hexagonal.csv",
        "inclusion_hexagonal.json",
        "orbit_hexagonal.gp",
    } <= names
    assert len(_rows(tmp_path / "boundary_hexagonal.csv")) == 1 + 100
    assert json.loads((tmp_path / "inclusion_hexagonal.json").read_text())["passed"] is True


def test_orbit_square_has_no_curves(tmp_path):
    assert main(["orbit", "--lattice", "square", "--grid", "16", "--out", str(tmp_path)]) == 0
    assert not list(tmp_path.glob("winding_*"))


def test_orbit_custom_quotient(tmp_path):
    q = tmp_path / "rect.txt"
    q.write_text("1\n0 0 1 0\n0 0 0 1\n0 0 1 1\n")
    assert main(["orbit", "--quotient", str(q), "--grid", "16", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "inclusion_rect.json").read_text())
    assert rep["passed"] is None


def test_density_outputs(tmp_path):
    assert main(["density", "--lattice", "kagome", "--grid", "64", "--mesh", "16", "--per-band", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "density_kagome.csv")
    assert rows[0] == "cx,cy,mass" and len(rows) == 1 + 16 * 16
    assert sum(float(r.split(",")[2]) for r in rows[1:]) == pytest.approx(1.0)
    assert all((tmp_path / f"density_kagome_band{j}.csv").exists() for j in range(3))


def test_simulate_outputs_and_determinism(tmp_path):
    argv = ["simulate", "--lattice", "triangular", "--L", "32", "--n", "5", "--n", "10", "--xi", "1,0"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--workers", "2", "--out", str(b)]) == 0
    for name in ("distribution_triangular.csv", "probe_triangular.csv", "characteristic_triangular.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(_rows(a / "probe_triangular.csv")) == 1 + 11
    assert len(_rows(a / "characteristic_triangular.csv")) == 1 + 2


def test_verify_subset(tmp_path, capsys):
    assert main(["verify", "--only", "ellipse_inclusion", "--only", "3", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 2 and all("PASS" in line for line in out)
    rep = json.loads((tmp_path / "verify_report.json").read_text())
    assert [c["name"] for c in rep["checks"]] == ["ellipse_inclusion", "square_bound"]


def test_verify_failure_exit_code(tmp_path):
    # the tabulated kagome half-axis is not attained by the orbit
    assert main(["verify", "--only", "boundary_tightness", "--out", str(tmp_path)]) == 1


@pytest.mark.skipif(shutil.which("crystalwalk") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["crystalwalk", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("crystalwalk")
    res = subprocess.run([sys.executable, "-m", "crystalwalk.cli", "spectrum", "--lattice", "nope"], capture_output=True, text=True)
    assert res.returncode == 2
