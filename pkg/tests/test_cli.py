from __future__ import annotations

import csv
import json

import pytest

from quality_alloc.cli import (
    MC_COLUMNS,
    RATIO_COLUMNS,
    SWEEP_COLUMNS,
    ScenarioConfig,
    load_config,
    main,
)
from quality_alloc.model import ArgumentError

SMALL = {
    "sweep": {"r_min": 0.1, "r_max": 2.0, "n": 3},
    "montecarlo": {"n_list": [2, 3], "draws": 3, "grid_n": 60},
    "oracle_n": 400,
    "grid_n": 300,
}


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_solve_fb_default(tmp_path, capsys):
    assert main(["solve-fb", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("IPI x1=0.967")
    rep = json.loads((tmp_path / "firstbest.json").read_text())
    assert rep["structure"] == "IPI"
    assert rep["x1"] == pytest.approx(0.966, abs=2e-3)
    assert rep["x2"] == pytest.approx(2.633, abs=2e-3)


def test_solve_sb_with_rates(tmp_path, capsys):
    assert main(["solve-sb", "--rates", "0.5", "1.0", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "secondbest.json").read_text())
    assert rep["region"] == "ICPIBindsNoDisposal"


def test_solve_ce_outputs(tmp_path):
    assert main(["solve-ce", "--rates", "0.5", "1.0", "--out", str(tmp_path)]) == 0
    eq = json.loads((tmp_path / "equilibrium.json").read_text())
    assert eq["method"] == "threshold-newton"
    assert read_csv(tmp_path / "prices.csv")[0].keys() == {"x", "price", "owner"}


def test_solve_ce_three_types(tmp_path):
    args = ["solve-ce", "--rates", "0.2", "0.7", "1.5", "--grid-n", "300", "--out", str(tmp_path)]
    # Three rates need a three-type scenario.
    three = tmp_path / "three.json"
    three.write_text(json.dumps({"economy": {
        "types": [{"utility": {"family": "exponential", "rate": r}, "mass": 1 / 3, "weight": 1.0}
                  for r in (0.2, 0.7, 1.5)],
        "supply": {"kind": "uniform", "height": 0.3, "upper": 5.0},
    }}))
    assert main(args + ["--econ", str(three)]) == 0
    eq = json.loads((tmp_path / "equilibrium.json").read_text())
    assert eq["method"] == "tatonnement"
    assert len(eq["lower"]) == 3


def test_resolved_config_round_trip(tmp_path, small_cfg):
    assert main(["solve-fb", "--econ", small_cfg, "--out", str(tmp_path)]) == 0
    resolved = tmp_path / "resolved_config.json"
    cfg = load_config(str(resolved))
    assert cfg == load_config(small_cfg)
    assert cfg.to_dict() == json.loads(resolved.read_text())


def test_sweep_small(tmp_path, small_cfg):
    assert main(["sweep", "--econ", small_cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0].keys()) == SWEEP_COLUMNS
    assert len(rows) == 9
    for r in rows:
        w_fb, w_sb, w_pool = float(r["W_fb"]), float(r["W_sb"]), float(r["W_pool"])
        assert w_fb >= w_sb - 1e-12 and w_sb >= w_pool - 1e-12
    assert sum(r["sb_region"] == "Degenerate" for r in rows) == 3


def test_montecarlo_byte_identical(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["montecarlo", "--econ", small_cfg, "--seed", "7", "--out", str(out)]) == 0
    for name in ("montecarlo.csv", "montecarlo_summary.csv", "resolved_config.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_csv(a / "montecarlo.csv")
    assert list(rows[0].keys()) == MC_COLUMNS
    assert len(rows) == 6


def test_montecarlo_seed_changes_rows(tmp_path, small_cfg):
    main(["montecarlo", "--econ", small_cfg, "--seed", "7", "--out", str(tmp_path / "a")])
    main(["montecarlo", "--econ", small_cfg, "--seed", "8", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/montecarlo.csv").read_bytes() != (tmp_path / "b/montecarlo.csv").read_bytes()


def test_ratio_grid_small(tmp_path, small_cfg):
    assert main(["ratio-grid", "--econ", small_cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "ratio_grid.csv")
    assert list(rows[0].keys()) == RATIO_COLUMNS
    for r in rows:
        if r["r_P"] != r["r_I"]:
            assert 0.0 <= float(r["ratio"]) <= 1.0


def test_verify_passes(tmp_path, small_cfg, capsys):
    assert main(["verify", "--econ", small_cfg, "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.endswith("PASS") for line in lines)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("QUALITY_ALLOC_OUT", str(tmp_path / "env"))
    assert main(["solve-fb"]) == 0
    assert (tmp_path / "env" / "firstbest.json").exists()


def test_unknown_subcommand_exit_1(capsys):
    assert main(["bogus"]) == 1


def test_missing_subcommand_exit_1():
    assert main([]) == 1


def test_schema_error_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"oracle_n": -5}))
    assert main(["solve-fb", "--econ", str(bad), "--out", str(tmp_path)]) == 1
    assert "oracle_n" in capsys.readouterr().err


def test_json_error_has_line_and_column(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 1,\n  oops\n}')
    assert main(["solve-fb", "--econ", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "column 3" in err


def test_rate_count_mismatch_exit_1(tmp_path):
    assert main(["solve-fb", "--rates", "0.1", "--out", str(tmp_path)]) == 1


def test_identical_types_are_a_config_error(tmp_path):
    assert main(["verify", "--rates", "0.5", "0.5", "--out", str(tmp_path)]) == 1


def test_numerical_failure_exit_2(tmp_path, monkeypatch, capsys):
    import quality_alloc.cli as cli
    from quality_alloc.model import NumericalError

    def broken(e):
        raise NumericalError("no bracket")

    monkeypatch.setattr(cli, "solve_second_best", broken)
    assert main(["solve-sb", "--out", str(tmp_path)]) == 2
    assert "no bracket" in capsys.readouterr().err


def test_default_config_matches_canonical():
    cfg = ScenarioConfig()
    e = cfg.build_economy()
    assert e.masses.tolist() == [0.5, 0.5]
    assert e.supply.total == pytest.approx(1.5)
    assert e.alpha == 0.5


def test_load_config_rejects_array(tmp_path):
    p = tmp_path / "arr.json"
    p.write_text("[1, 2]")
    with pytest.raises(ArgumentError):
        load_config(str(p))
