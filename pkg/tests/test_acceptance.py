"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one pass/fail line per criterion.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from gluelab import lab
from gluelab import linop as lo
from gluelab.acs import bump_perturbation, standard_structure
from gluelab.curves import laurent_curve
from gluelab.domain import build_lattice_domain

from conftest import make_pair, record

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
JOBS = 2

_reports: dict[str, tuple[lab.ExperimentReport, float]] = {}


def run(name: str) -> tuple[lab.ExperimentReport, float]:
    """Run ``configs/<name>.json`` once per session; returns the report and wall time."""
    if name not in _reports:
        t0 = time.perf_counter()
        report = lab.run_experiment(lab.load_config(CONFIGS / f"{name}.json"), jobs=JOBS)
        _reports[name] = (report, time.perf_counter() - t0)
    return _reports[name]


def _errors(report: lab.ExperimentReport) -> list[str]:
    return [f"{row['stage']}: {row['error']}" for row in report.rows if row["error"] is not None]


def test_c1_closed_form_oracles():
    report, secs = run("norm_oracles")
    oracle = [row for row in report.rows if row["params"]["kind"] == "oracle"]
    ann = max(row["metrics"]["annulus_rel_error"] for row in oracle)
    dir_ = max(row["metrics"]["dirichlet_rel_error"] for row in oracle)
    ok = len(oracle) >= 20 and ann <= 1e-6 and dir_ <= 1e-5 and not _errors(report)
    record("C1", ok and secs < 10, f"{len(oracle)} tuples, annulus {ann:.1e}, energy {dir_:.1e}, {secs:.1f}s")
    assert report.verdicts["C1"] and ok, _errors(report)
    assert secs < 10


def _geometries():
    J = bump_perturbation(standard_structure(2), [0.8, 0, 0.3, 0], 0.5, 0.05, 7, "generic")
    line = laurent_curve(build_lattice_domain(-3.0, 3.0, 6, 16, "fubini_study"), {1: [1.0, 0.0]})
    *_, pair = make_pair(2.0**-4)
    return {"line": (line, standard_structure(2)), "perturbed line": (line, J), "glued pair": (pair, J)}


def test_c2_gradient_check():
    t0 = time.perf_counter()
    steps = (1e-3, 5e-4, 2.5e-4)
    details, ok = [], True
    for name, (u, J) in _geometries().items():
        D = lo.assemble_Du(u.with_values(u.values), J)
        err = lo.finite_difference_check(D, u, steps=steps, probes=20, seed=1)
        slopes = np.log(err[:, 0] / err[:, -1]) / np.log(steps[0] / steps[-1])
        # each probe is first order in h, or already at roundoff
        probe_ok = ((slopes > 0.9) & (slopes < 1.1)) | (err.max(axis=1) < 1e-8)
        ok &= bool(probe_ok.all()) and err.shape[0] == 20
        details.append(f"{name} median slope {np.median(slopes):.3f} max err {err.max():.1e}")
    secs = time.perf_counter() - t0
    record("C2", ok and secs < 30, ", ".join(details) + f", {secs:.1f}s")
    assert ok
    assert secs < 30


def test_c3_integrable_gluing_exactness():
    report, secs = run("pair_glue_exact")
    (row,) = report.rows
    assert row["error"] is None, row["error"]
    m = row["metrics"]
    ok = m["final_residual"] < 1e-10 and m["middle_error"] <= 10 * m["richardson_error"]
    record(
        "C3",
        ok and secs < 60,
        f"r = {row['params']['r']}, residual {m['final_residual']:.1e}, "
        f"middle error {m['middle_error']:.2e} vs quadrature {m['richardson_error']:.2e}, {secs:.1f}s",
    )
    assert ok and report.verdicts["C3"]
    assert secs < 60


def test_c4_residual_scaling():
    report, secs = run("residual_scaling")
    fit = report.summary["fit"]
    rs = sorted(row["params"]["r"] for row in report.rows)
    ok = rs == [2.0**-k for k in range(8, 2, -1)] and fit["slope"] >= 1.05 and not _errors(report)
    record("C4", ok and secs < 300, f"slope {fit['slope']:.3f} (95% CI {fit['ci95'][0]:.2f}..{fit['ci95'][1]:.2f}), {secs:.1f}s")
    assert ok and report.verdicts["C4"]
    assert secs < 300


def test_c5_spliced_inverse_contraction():
    report, secs = run("pair_glue_spliced")
    assert not _errors(report), _errors(report)
    defects = [row["metrics"]["defect"] for row in report.rows]
    resid = [row["metrics"]["neumann_residual"] for row in report.rows]
    ok = max(defects) <= 0.5 and max(resid) < 1e-8
    record("C5", ok and secs < 300, f"defect max {max(defects):.3f}, Neumann residual max {max(resid):.1e}, {secs:.1f}s")
    assert ok and report.verdicts["C5"]
    assert secs < 300


def test_c6_interpolation():
    report, secs = run("interpolation")
    assert not _errors(report), _errors(report)
    s = report.summary
    detail = (
        f"R1 {'ok' if s['R1'] else 'bad'}, R2 slope {s['R2_fit']['slope']:.2f}, "
        f"R3 c = {s['R3_constant']:.3f}, {secs:.1f}s"
    )
    ok = report.verdicts["C6"]
    record("C6", ok and secs < 600, detail)
    assert ok
    for row in report.rows:
        assert row["metrics"]["constraint_residual"] < 1e-10
    assert secs < 600


def test_c7_solver_bound_across_suite():
    names = ["pair_glue_exact", "pair_glue_spliced", "interpolation", "separation", "expansion"]
    checks = []
    for name in names:
        report, _ = run(name)
        for row in report.rows:
            if row["error"] is None and "bound_check" in row["metrics"]:
                checks.append((name, row["index"], row["metrics"]["bound_check"]))
    bad = [c for c in checks if not c[2]]
    record("C7", bool(checks) and not bad, f"{len(checks)} accepted runs, {len(bad)} violations")
    assert checks and not bad, bad


def test_c8_separation():
    report, secs = run("separation")
    assert not _errors(report), _errors(report)
    k = report.summary["K_prime"]
    ok = len(report.rows) >= 4 and k > 0
    record("C8", ok and secs < 300, f"K' = {k:.3f} over {len(report.rows)} radii, {secs:.1f}s")
    assert ok and report.verdicts["C8"]
    assert secs < 300


def test_c9_sobolev_constant():
    t0 = time.perf_counter()
    cfg = lab.load_config(CONFIGS / "norm_oracles.json")
    sob = [p for p in lab.REGISTRY["norm_oracles"].points(cfg) if p["kind"] == "sobolev"]
    assert sorted(p["r"] for p in sob) == [2.0**-k for k in range(8, 2, -1)]
    vals = [lab._norm_point(cfg, p, lab.point_seed(cfg.seed, i))["s_p"] for i, p in enumerate(sob)]
    secs = time.perf_counter() - t0
    spread = max(vals) / min(vals)
    record("C9", spread < 2 and secs < 120, f"s_p in [{min(vals):.3f}, {max(vals):.3f}], spread {spread:.3f}, {secs:.1f}s")
    assert spread < 2
    assert secs < 120
    report, _ = run("norm_oracles")
    assert report.verdicts["C9"]
