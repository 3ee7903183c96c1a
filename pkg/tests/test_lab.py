from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from gluelab import lab
from gluelab.cli import main

GLUE = {"alpha": 2 / 3, "gamma": 5 / 6, "p": 2.5, "eps_target": 0.05}


def _config(**over) -> dict:
    cfg = {
        "experiment": "residual_scaling",
        "seed": 3,
        "glue": dict(GLUE),
        "structure": {"kind": "standard", "n": 2},
        "geometry": {"per_octave": 6, "m": 16, "margin": 3.0, "pad": 1.0},
        "sweep": {"r": [0.0625, 0.03125, 0.015625]},
    }
    cfg.update(over)
    return cfg


def _raw(**over) -> bytes:
    return json.dumps(_config(**over)).encode()


@pytest.mark.parametrize(
    "over",
    [
        {"experiment": "nonsense"},
        {"glue": {**GLUE, "beta": 1.0}},
        {"glue": {**GLUE, "alpha": 0.95}},
        {"sweep": {}},
        {"sweep": {"r": []}},
        {"sweep": {"r": [0.5]}},
        {"structure": {"kind": "mystery"}},
        {"seed": -1},
        {"seed": 1.5},
    ],
)
def test_invalid_configs_are_rejected(over):
    with pytest.raises(lab.ConfigError):
        lab.parse_config(_raw(**over))


def test_malformed_json_is_rejected():
    with pytest.raises(lab.ConfigError):
        lab.parse_config(b"{not json")


def test_config_hash_is_sha256_of_raw_bytes():
    raw = _raw()
    cfg = lab.parse_config(raw)
    assert cfg.config_hash == hashlib.sha256(raw).hexdigest()
    assert lab.parse_config(raw + b" ").config_hash != cfg.config_hash


def test_seed_override():
    assert lab.parse_config(_raw(), seed=99).seed == 99
    assert lab.parse_config(_raw()).seed == 3


def test_point_seeds_are_deterministic_and_distinct():
    seeds = [lab.point_seed(5, i) for i in range(50)]
    assert seeds == [lab.point_seed(5, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert lab.point_seed(6, 0) != lab.point_seed(5, 0)


def test_slope_fit_needs_two_points():
    assert lab._fit_slope([0.1], [0.01])["insufficient_sweep"]
    fit = lab._fit_slope([0.1, 0.05, 0.025], [1e-2, 2.5e-3, 6.25e-4])
    assert fit["slope"] == pytest.approx(2.0)
    assert fit["ci95"][0] == pytest.approx(2.0) and not fit["insufficient_sweep"]


def test_single_point_sweep_does_not_pass():
    report = lab.run_experiment(lab.parse_config(_raw(sweep={"r": [0.0625]})))
    assert report.summary["fit"]["insufficient_sweep"]
    assert report.verdicts["C4"] is False


@pytest.fixture(scope="module")
def small_report():
    return lab.run_experiment(lab.parse_config(_raw()))


def test_rows_carry_provenance(small_report):
    for i, row in enumerate(small_report.rows):
        assert row["index"] == i and row["error"] is None
        assert row["config_hash"] == small_report.config_hash
        assert row["seed"] == lab.point_seed(3, i)
        assert set(row["versions"]) >= {"numpy", "scipy"}


def test_rows_csv_is_deterministic_across_workers(small_report):
    parallel = lab.run_experiment(lab.parse_config(_raw()), jobs=2)
    assert lab.rows_csv(parallel.rows) == lab.rows_csv(small_report.rows)
    assert "elapsed" not in lab.rows_csv(small_report.rows)


def test_verify_accepts_and_detects_tampering(small_report, tmp_path):
    rp, cp = lab.write_report(small_report, tmp_path)
    assert cp.read_text().startswith("config_hash,")
    ok, msgs = lab.verify_report(rp)
    assert ok, msgs
    data = json.loads(rp.read_text())
    data["summary"]["verdicts"]["C4"] = not data["summary"]["verdicts"]["C4"]
    rp.write_text(json.dumps(data))
    ok, msgs = lab.verify_report(rp)
    assert not ok and any("verdicts" in m for m in msgs)


def test_entry_gate_is_reported_as_a_stage_error():
    cfg = lab.parse_config(
        _raw(
            experiment="interpolation",
            geometry={"curves": 3, "periods": 2, "free_index": 0},
            targets={"offset": 0.1, "admissible_radius": 0.05, "seed": 1},
            sweep={"r": [0.0625]},
        )
    )
    row = lab._run_one((cfg, 0, {"r": 0.0625}))
    assert row["stage"] == "entry_gate" and "admissible" in row["error"]
    assert row["metrics"] == {}


def test_cli_run_and_verify(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_bytes(_raw())
    runner = CliRunner()
    res = runner.invoke(main, ["run", str(path), "--out", str(tmp_path / "out")])
    assert res.exit_code == 0, res.output
    assert "C4:" in res.output
    res = runner.invoke(main, ["verify", str(tmp_path / "out" / "report.json")])
    assert res.exit_code == 0 and "report consistent" in res.output
    data = json.loads((tmp_path / "out" / "report.json").read_text())
    data["rows"][0]["config_hash"] = "0" * 64
    (tmp_path / "out" / "report.json").write_text(json.dumps(data))
    res = runner.invoke(main, ["verify", str(tmp_path / "out" / "report.json")])
    assert res.exit_code == 1


def test_cli_reports_bad_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_bytes(_raw(experiment="nonsense"))
    res = CliRunner().invoke(main, ["run", str(path)])
    assert res.exit_code == 2 and "unknown experiment" in res.output


def test_separation_lattice_mode_single_radius():
    data = json.loads((Path(__file__).resolve().parents[1] / "configs" / "separation_lattice.json").read_text())
    data["sweep"] = {"r": [0.0625]}
    report = lab.run_experiment(lab.parse_config(json.dumps(data)))
    (row,) = report.rows
    assert row["error"] is None, row["error"]
    m = row["metrics"]
    assert max(m["constraint_residuals"]) < 1e-10
    # the moved marked node sits in window 3 and moved by the full shift
    assert m["k_star"] == 3
    assert m["marked_lower_bound"] == pytest.approx(0.02 / 8, rel=1e-6)
    assert m["cylinder_distance"] >= m["marked_lower_bound"]
    assert report.verdicts == {"C8_lattice": True, "C7": True}
