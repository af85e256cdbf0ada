import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sieve_homog.cli import main
from sieve_homog.config import ConfigError, parse_config, validate_config
from sieve_homog.fixtures import FIXTURES
from sieve_homog.io import read_csv, read_field, svg_line_plot, LineSeries, write_csv, write_field

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, st.integers(-10 ** 12, 10 ** 12), st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc")), max_size=8).filter(
        lambda s: s.strip() == s and s != "" and not _numeric(s))), min_size=1, max_size=20))
def test_csv_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv(path, ["x", "n", "label"], rows, {"note": 1.5})
    t = read_csv(path)
    assert t.header == ["x", "n", "label"]
    assert t.meta == {"note": 1.5}
    for got, want in zip(t.rows, rows):
        assert got[0] == want[0] or (got[0] == 0 and want[0] == 0)
        assert got[1] == want[1] and got[2] == want[2]


def _numeric(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def test_field_round_trip(tmp_path):
    v = np.random.default_rng(0).standard_normal((3, 4, 5))
    write_field(tmp_path / "f.bin", v, 0.125, [-1.0, -2.0, 0.5])
    w, h, o = read_field(tmp_path / "f.bin")
    assert np.array_equal(v, w) and h == 0.125 and o.tolist() == [-1.0, -2.0, 0.5]
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"SHF1" and len(raw) == 4 + 4 + 3 * 8 + 8 + 3 * 8 + 60 * 8
    (tmp_path / "g.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_field(tmp_path / "g.bin")


def test_svg_is_well_formed(tmp_path):
    import xml.etree.ElementTree as ET
    p = svg_line_plot(tmp_path / "a.svg", [LineSeries([1e-3, 1e-2, 1e-1], [1.0, 0.5, 0.0], "a & b")],
                      title="t<1>", logx=True, logy=True)
    root = ET.parse(p).getroot()
    assert root.tag.endswith("svg")


HOMOG = FIXTURES["homogenize-parabola"][1]


def test_missing_p_is_reported_by_name():
    text = HOMOG.replace("p = 1.3\n", "")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == "model.p" and "'p'" in str(exc.value)


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="grid.gridfactor"):
        parse_config(HOMOG.replace("grid_factor", "gridfactor"))


def test_validate_diagnostics():
    assert validate_config(parse_config(HOMOG)) == []
    d3 = HOMOG.replace("d = 2", "d = 3").replace("p = 1.3", "p = 2")
    diags = validate_config(parse_config(d3))
    assert any(x.level == "warning" and "(d+4)/4" in x.message for x in diags)
    touch = HOMOG.replace("[sieve]\n", "[sieve]\na_eps_ratio = 0.5\n").replace(
        "radius = 0.5\n\n[sieve]", "radius = 1\n\n[sieve]")
    diags = validate_config(parse_config(touch))
    assert any(x.level == "error" and "touch" in x.message for x in diags)
    coarse = HOMOG.replace("grid_factor = 8", "grid_factor = 2")
    assert any("a_eps/4" in x.message for x in validate_config(parse_config(coarse)))


def test_power_notation():
    cfg = parse_config(HOMOG)
    assert cfg.eps_list == [0.125, 0.0625, 0.03125]


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_every_fixture_parses_and_validates(name):
    cfg = parse_config(FIXTURES[name][1])
    assert not [d for d in validate_config(cfg) if d.level == "error"]


def test_list_fixtures(capsys):
    assert main(["list-fixtures"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in FIXTURES)


def test_validate_command_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(HOMOG)
    assert main(["validate", "--config", str(good)]) == 0
    bad = tmp_path / "bad.ini"
    bad.write_text(HOMOG.replace("p = 1.3\n", ""))
    assert main(["validate", "--config", str(bad)]) == 2
    assert "p" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.ini")]) == 2


def test_run_discrepancy_is_deterministic(tmp_path):
    assert main(["run", "--fixture", "discrepancy-parabola", "--out", str(tmp_path), "--quiet"]) == 0
    assert main(["run", "--fixture", "discrepancy-parabola", "--out", str(tmp_path), "--quiet",
                 "--seed", "0", "--threads", "2"]) == 0
    runs = sorted(tmp_path.iterdir())
    assert len(runs) == 2
    m1, m2 = [(r / "manifest.txt").read_text() for r in runs]
    assert m1 == m2
    t = read_csv(runs[0] / "sequence.csv")
    assert len(t.rows) == 6
    assert "fit_exponent" in t.meta and t.meta["fit_exponent"] > 0
    for line in m1.splitlines():
        digest, name = line.split()
        assert len(digest) == 64 and (runs[0] / name).exists()


def test_run_rejects_invalid_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text(HOMOG.replace("grid_factor = 8", "grid_factor = 2"))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert not (tmp_path / "o").exists()


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    from sieve_homog import experiments
    from sieve_homog.discrete import SolverError

    def boom(cfg, threads):
        raise SolverError("forced", 1.0, 5)
    monkeypatch.setitem(experiments.RUNNERS, "capacity", boom)
    assert main(["run", "--fixture", "capacity-ball", "--out", str(tmp_path), "--quiet"]) == 3


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SIEVE_HOMOG_THREADS", "2")
    assert main(["run", "--fixture", "discrepancy-parabola", "--out", str(tmp_path), "--quiet"]) == 0
    monkeypatch.setenv("SIEVE_HOMOG_THREADS", "two")
    assert main(["run", "--fixture", "discrepancy-parabola", "--out", str(tmp_path), "--quiet"]) == 2


def test_run_capacity_writes_field(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(FIXTURES["capacity-disk-p13"][1].replace("levels = 3", "levels = 1").replace(
        "h = 0.0625", "h = 0.125"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    run = next((tmp_path / "o").iterdir())
    v, h, origin = read_field(run / "potential.bin")
    assert h == 0.125 and v.ndim == 2 and v.max() == 1.0
    t = read_csv(run / "capacity.csv")
    assert t.header == ["h", "mu_reg", "value", "residual", "extrapolated"]
    assert math.isfinite(t.meta["best"])
