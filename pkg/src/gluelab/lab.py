"""Named experiments over parameter sweeps, with seeded rows and report files.

An experiment is a pure function of its JSON config and seed.  It expands
the config into sweep points, runs every point (optionally in a process
pool), and reduces the rows to summary verdicts.  Every pass flag is keyed
by the acceptance criterion it evidences (``C1`` ... ``C9``), and
:func:`verify_report` recomputes all flags from the stored metrics.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
from scipy import stats

from . import __version__
from . import linop as lo
from . import solver as so
from .acs import AlmostComplexStructure, flatten_near_point, standard_structure, structure_from_json
from .cutoff import LogCutoff, dirichlet_energy, dirichlet_energy_quadrature
from .curves import (
    CurveSamples,
    cylinder_distance,
    dbar_residual,
    expansion_check,
    fit_expansion,
    hausdorff_distance,
    laurent_curve,
    upsample_angular,
)
from .domain import (
    NormSpec,
    annulus_power_norm_closed_form,
    build_annulus,
    build_lattice_domain,
    build_neck_sphere,
    lattice_resolution,
    norm_array,
    sobolev_constant_estimate,
)
from .glue import (
    GlueConfig,
    PolynomialField,
    build_chain_glue,
    build_pair_glue,
    projective_line,
    reference_chain,
    region_labels,
)
from .targets import to_real

EXPERIMENTS = (
    "residual_scaling",
    "expansion",
    "pair_glue_end_to_end",
    "chain_glue",
    "interpolation",
    "separation",
    "norm_oracles",
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Failure of one pipeline stage of a sweep point."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    glue: dict
    structure: dict
    geometry: dict
    sweep: dict
    targets: dict = field(default_factory=dict)
    output: str | None = None
    raw: bytes = b""

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    def glue_config(self, r: float | None = None) -> GlueConfig:
        cfg = GlueConfig(**self.glue)
        return cfg if r is None else cfg.with_r(r)

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "glue": self.glue,
            "structure": self.structure,
            "geometry": self.geometry,
            "sweep": self.sweep,
            "targets": self.targets,
            "output": self.output,
        }


def parse_config(raw: bytes | str, seed: int | None = None) -> ExperimentConfig:
    """Validate a JSON config; ``seed`` overrides the stored seed."""
    raw_bytes = raw.encode() if isinstance(raw, str) else bytes(raw)
    try:
        data = json.loads(raw_bytes)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose one of {', '.join(EXPERIMENTS)}")
    glue = dict(data.get("glue", {}))
    unknown = set(glue) - {"alpha", "gamma", "p", "eps_target", "r_max"}
    if unknown:
        raise ConfigError(f"unknown glue fields {sorted(unknown)}")
    try:
        base = GlueConfig(**glue, r=min(glue.get("r_max", 0.125), 0.125))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid glue parameters: {exc}") from None
    sweep = dict(data.get("sweep", {}))
    if not sweep:
        raise ConfigError("sweep must contain at least one list")
    for key, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep list {key!r} must be a nonempty list")
    for r in sweep.get("r", []):
        if not 0 < float(r) <= base.r_max:
            raise ConfigError(f"sweep value r = {r} outside (0, r_max = {base.r_max}]")
    structure = dict(data.get("structure", {"kind": "standard", "n": 2}))
    try:
        structure_from_json(structure)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid structure: {exc}") from None
    s = data.get("seed", 0) if seed is None else seed
    if not isinstance(s, int) or s < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return ExperimentConfig(
        experiment=exp,
        seed=s,
        glue=glue,
        structure=structure,
        geometry=dict(data.get("geometry", {})),
        sweep=sweep,
        targets=dict(data.get("targets", {})),
        output=data.get("output"),
        raw=raw_bytes,
    )


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_bytes(), seed)


def point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def versions() -> dict:
    return {"gluelab": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


# ---------------------------------------------------------------------------
# shared builders


def _structure(cfg: ExperimentConfig, r: float | None = None) -> AlmostComplexStructure:
    J = structure_from_json(cfg.structure)
    flat = cfg.geometry.get("flatten")
    if flat and r is not None and not J.is_constant:
        R = min(float(flat.get("cap", 0.9)), float(flat.get("scale", 1.4)) * r ** float(flat.get("power", 0.5)))
        J = flatten_near_point(J, R, float(flat.get("kappa", 3.0)))
    return J


@dataclass(eq=False)
class PairSetup:
    r: float
    glue: GlueConfig
    J: AlmostComplexStructure
    u0: CurveSamples
    u1: CurveSamples
    ur: CurveSamples
    per_octave: float


def _pair_setup(cfg: ExperimentConfig, r: float, refine: int = 1) -> PairSetup:
    g = cfg.geometry
    # refining halves h, so the coarse nodes (ln r among them) stay nodes
    per_octave = lattice_resolution(r, float(g.get("per_octave", 6))) * refine
    m = int(g.get("m", 16))
    margin = float(g.get("margin", 3.0))
    pad = float(g.get("pad", 1.5))
    glue = cfg.glue_config(r)
    L = math.log(r)
    G = build_lattice_domain(2 * L - margin, margin, per_octave, m, "theta_r", r)
    d0 = build_lattice_domain(1.5 * L - pad, margin, per_octave, m, "fubini_study")
    d1 = build_lattice_domain(1.5 * L - pad, margin, per_octave, m, "fubini_study", mirrored=True)
    a0 = g.get("a0", [1.0, 0.0])
    a1 = g.get("a1", [0.0, 1.0])
    u0 = laurent_curve(d0, {1: a0})
    u1 = laurent_curve(d1, {1: a1})
    ur = build_pair_glue(u0, u1, glue, G)
    return PairSetup(r, glue, _structure(cfg, r), u0, u1, ur, per_octave)


def _exact_pair(ps: PairSetup, cfg: ExperimentConfig) -> np.ndarray:
    """``a0 z + a1 r^2 / z`` on the glued grid."""
    z = ps.ur.domain.z()
    a0 = np.asarray(cfg.geometry.get("a0", [1.0, 0.0]), dtype=complex)
    a1 = np.asarray(cfg.geometry.get("a1", [0.0, 1.0]), dtype=complex)
    w = z[..., None] * a0 + (ps.r**2 / z)[..., None] * a1
    return np.concatenate([w.real, w.imag], axis=-1)


def _pair_inverse(ps: PairSetup, method: str, seed: int, probes: int) -> tuple[lo.LinearOperatorHandle, Any, dict]:
    """``(D, Q, diagnostics)`` for the glued pair, with a direct or spliced inverse."""
    u = ps.ur.with_values(ps.ur.values)
    D = lo.assemble_Du(u, ps.J)
    if method == "direct":
        Q = lo.right_inverse_direct(D)
        return D, Q, {"probe_residual": Q.meta["probe_residual"]}
    if method != "spliced":
        raise ConfigError(f"unknown inverse method {method!r}")
    D0 = lo.assemble_Du(ps.u0.with_values(ps.u0.values), ps.J)
    D1 = lo.assemble_Du(ps.u1.with_values(ps.u1.values), ps.J)
    T = lo.splice_inverse(lo.pair_right_inverse(D0, D1), u, ps.glue, D=D)
    L = math.log(ps.r)
    defect, _ = lo.defect_norm_estimate(T, D, p=ps.glue.p, probes=probes, seed=seed, centers=[L, 1.5 * L, 0.5 * L])
    Q = lo.neumann_invert(T, D, contraction=defect)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(4):
        eta = D.project(lo.random_form_probe(D, rng, "smooth" if t % 2 == 0 else "local", center=L if t >= 2 else None))
        worst = max(worst, float(np.linalg.norm(D(Q(eta)) - eta) / np.linalg.norm(eta)))
    history = Q.meta["history"][-1] if Q.meta["history"] else []
    return D, Q, {"defect": defect, "neumann_residual": worst, "neumann_terms": len(history)}


def _newton(ps: PairSetup, D, Q, seed: int, probes: int, tol: float = 1e-10):
    vec = lo.nonlinear_residual(D, ps.ur.with_values(ps.ur.values))
    c0 = so.inverse_norm_estimate(Q, D, p=ps.glue.p, probes=probes, seed=seed, extra=[vec])
    u, rep = so.newton_correct(ps.ur, ps.J, Q, tol=tol, D=D, p=ps.glue.p, c0=c0)
    return u, rep


def _fit_slope(rs: list[float], values: list[float]) -> dict:
    """Log-log slope of ``values`` against ``rs`` with a 95% interval."""
    pts = [(r, v) for r, v in zip(rs, values) if v is not None and v > 0 and r > 0]
    if len(pts) < 2:
        return {"slope": None, "ci95": None, "insufficient_sweep": True}
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    if len(pts) == 2:
        s = float((y[1] - y[0]) / (x[1] - x[0]))
        return {"slope": s, "ci95": None, "insufficient_sweep": False}
    fit = stats.linregress(x, y)
    half = float(stats.t.ppf(0.975, len(pts) - 2) * fit.stderr)
    return {"slope": float(fit.slope), "ci95": [float(fit.slope - half), float(fit.slope + half)], "insufficient_sweep": False}


def _ok_rows(rows: list[dict]) -> list[dict]:
    return [row for row in rows if row.get("error") is None]


def _bound_flags(rows: list[dict]) -> bool:
    """C7: every accepted Newton run satisfies its recorded bound."""
    checks = [row["metrics"].get("bound_check") for row in _ok_rows(rows) if "bound_check" in row["metrics"]]
    return bool(checks) and all(bool(c) for c in checks)


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class Experiment:
    points: Callable[[ExperimentConfig], list[dict]]
    run_point: Callable[[ExperimentConfig, dict, int], dict]
    row_flags: Callable[[ExperimentConfig, dict, dict], dict]
    summarize: Callable[[ExperimentConfig, list[dict]], dict]


def _r_points(cfg: ExperimentConfig) -> list[dict]:
    return [{"r": float(r)} for r in cfg.sweep["r"]]


# residual scaling -----------------------------------------------------------


def _residual_scaling_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    try:
        ps = _pair_setup(cfg, point["r"])
    except ValueError as exc:
        raise StageError("glue", str(exc)) from None
    dom = ps.ur.domain
    _, spec = so.norm_specs(dom, ps.glue.p)
    res = dbar_residual(ps.ur, ps.J).values
    labels = region_labels(dom.sigma, ps.glue)
    return {
        "residual": norm_array(dom, res, spec, form=True),
        "residual_Lp": norm_array(dom, res, NormSpec(p=ps.glue.p, flavor="Lp"), form=True),
        "residual_outside_transitions": float(np.abs(res[(labels != 1) & (labels != 3)]).max()),
        "levels": dom.L,
        "per_octave": ps.per_octave,
    }


def _residual_scaling_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    ok = _ok_rows(rows)
    fit = _fit_slope([r["params"]["r"] for r in ok], [r["metrics"]["residual"] for r in ok])
    target = 1 + cfg.glue_config().eps_target
    verdict = (not fit["insufficient_sweep"]) and fit["slope"] >= target
    return {"fit": fit, "slope_target": target, "verdicts": {"C4": bool(verdict)}}


# expansion ------------------------------------------------------------------


def _expansion_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    """Neck expansion of the corrected pair, net of the lattice's own error.

    With ``J0`` the glued curve is exactly ``a0 z + a1 r^2 / z``, so the ``J0``
    solve on the same lattice measures the discretization floor; the
    difference of the two corrected curves carries the ``J``-driven part.
    """
    probes = int(cfg.geometry.get("probes", 40))
    method = cfg.geometry.get("inverse", "direct")
    ps = _pair_setup(cfg, point["r"])
    D, Q, diag = _pair_inverse(ps, method, seed, probes)
    u, rep = _newton(ps, D, Q, seed, probes)
    ref = _pair_setup(cfg, point["r"])
    ref.J = standard_structure(ps.J.dim // 2)
    D0, Q0, _ = _pair_inverse(ref, "direct", seed, probes)
    u0, rep0 = _newton(ref, D0, Q0, seed, probes)
    a0 = to_real(np.asarray(cfg.geometry.get("a0", [1.0, 0.0]), dtype=complex))
    a1 = to_real(np.asarray(cfg.geometry.get("a1", [0.0, 1.0]), dtype=complex))
    zero = np.zeros_like(a0)
    diff = u.with_values(u.values - u0.values)
    return {
        "expansion_residual": expansion_check(diff, zero, zero, ps.r).residual_sup,
        "expansion_residual_raw": expansion_check(u, a0, a1, ps.r).residual_sup,
        "discretization_floor": expansion_check(u0, a0, a1, ps.r).residual_sup,
        "expansion_residual_uncorrected": expansion_check(ps.ur, a0, a1, ps.r).residual_sup,
        "newton_iterations": rep.iterations,
        "final_residual": rep.residual_history[-1],
        "xi_norm": rep.xi_norm,
        "c0": rep.c0,
        "initial_residual": rep.initial_residual,
        "bound_check": bool(rep.bound_check and rep0.bound_check),
        **diag,
    }


def _expansion_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    ok = _ok_rows(rows)
    fit = _fit_slope([r["params"]["r"] for r in ok], [r["metrics"]["expansion_residual"] for r in ok])
    target = 1 + cfg.glue_config().eps_target
    verdict = (not fit["insufficient_sweep"]) and fit["slope"] >= target
    return {"fit": fit, "slope_target": target, "verdicts": {"C6_R2_pair": bool(verdict), "C7": _bound_flags(rows)}}


# pair glue end to end -------------------------------------------------------


def _pair_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    g = cfg.geometry
    probes = int(g.get("probes", 40))
    try:
        ps = _pair_setup(cfg, point["r"])
    except ValueError as exc:
        raise StageError("glue", str(exc)) from None
    try:
        D, Q, diag = _pair_inverse(ps, g.get("inverse", "direct"), seed, probes)
    except (ValueError, lo.RankDeficiencyError, lo.ContractionError) as exc:
        raise StageError("inverse", str(exc)) from None
    try:
        u, rep = _newton(ps, D, Q, seed, probes)
    except so.SolverError as exc:
        raise StageError("newton", str(exc)) from None
    out = {
        "newton_iterations": rep.iterations,
        "initial_residual": rep.initial_residual,
        "final_residual": rep.residual_history[-1],
        "residual_history": rep.residual_history,
        "xi_norm": rep.xi_norm,
        "c0": rep.c0,
        "bound_check": bool(rep.bound_check),
        "levels": ps.ur.domain.L,
        "per_octave": ps.per_octave,
        **diag,
    }
    if ps.J.is_constant:
        mid = region_labels(ps.ur.domain.sigma, ps.glue) == 2
        err = float(np.abs(u.values[mid] - _exact_pair(ps, cfg)[mid]).max())
        # the same solve on the refined lattice; its nodes contain ours
        fine = _pair_setup(cfg, point["r"], refine=2)
        Df = lo.assemble_Du(fine.ur.with_values(fine.ur.values), fine.J)
        uf, _ = so.newton_correct(fine.ur, fine.J, lo.right_inverse_direct(Df), tol=1e-10, D=Df, p=fine.glue.p)
        idx = np.rint((ps.ur.domain.sigma - fine.ur.domain.sigma[0]) / fine.ur.domain.h).astype(int)
        if not np.allclose(fine.ur.domain.sigma[idx], ps.ur.domain.sigma, atol=1e-9):
            raise StageError("richardson", "refined lattice does not contain the coarse nodes")
        out["middle_error"] = err
        out["richardson_error"] = float(np.abs(u.values[mid] - uf.values[idx[mid]]).max())
    return out


def _pair_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    flags = {"C7": bool(m["bound_check"])}
    if "middle_error" in m:
        flags["C3"] = bool(m["final_residual"] < 1e-10 and m["middle_error"] <= 10 * m["richardson_error"])
    if "defect" in m:
        flags["C5"] = bool(m["defect"] <= 0.5 and m["neumann_residual"] < 1e-8)
    return flags


def _all_flag(rows: list[dict], key: str) -> bool | None:
    vals = [row["flags"][key] for row in rows if key in row.get("flags", {})]
    if not vals:
        return None
    return all(vals) and all(row.get("error") is None for row in rows)


def _pair_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    verdicts = {}
    for key in ("C3", "C5", "C7"):
        v = _all_flag(rows, key)
        if v is not None:
            verdicts[key] = v
    ok = _ok_rows(rows)
    out: dict = {"verdicts": verdicts}
    if ok and "xi_norm" in ok[0]["metrics"] and not structure_from_json(cfg.structure).is_constant:
        out["xi_fit"] = _fit_slope([r["params"]["r"] for r in ok], [r["metrics"]["xi_norm"] for r in ok])
    if ok and "c0" in ok[0]["metrics"]:
        c0s = [r["metrics"]["c0"] for r in ok]
        out["c0_drift"] = float(max(c0s) / min(c0s))
        out["c0_drift_flag"] = bool(out["c0_drift"] > 2)
    return out


# chain glue -----------------------------------------------------------------


def _chain(cfg: ExperimentConfig):
    n = int(cfg.geometry.get("curves", 3))
    return [projective_line(i) for i in range(n)]


def _chain_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    g = cfg.geometry
    r = point["r"]
    chain = _chain(cfg)
    glue = cfg.glue_config(r)
    try:
        u = build_chain_glue(
            chain, [r] * len(chain), glue, periods=int(g.get("periods", 2)),
            per_octave=int(g.get("per_octave", 6)), m=int(g.get("m", 16)),
        )
    except ValueError as exc:
        raise StageError("glue", str(exc)) from None
    J = _structure(cfg)
    dom = u.domain
    res = dbar_residual(u, J).values
    _, spec = so.norm_specs(dom, glue.p)
    dist = np.sqrt(np.sum((u.values - reference_chain(chain, dom, u.charts)) ** 2, axis=-1)).max()
    D = lo.assemble_Du(u.with_values(u.values), J)
    try:
        Q = lo.right_inverse_direct(D)
    except lo.RankDeficiencyError as exc:
        raise StageError("inverse", str(exc)) from None
    return {
        "residual": norm_array(dom, res, spec, form=True),
        "c0_distance": float(dist),
        "distance_over_r": float(dist / r),
        "inverse_probe_residual": float(Q.meta["probe_residual"]),
        "rows_dropped": int(D.domain_dim - D.codomain_dim),
        "levels": dom.L,
    }


def _chain_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    # the interpolation runs need a genuine right inverse on the chain
    return {"C6_surjective": bool(m["inverse_probe_residual"] < 1e-8)}


def _chain_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    ok = _ok_rows(rows)
    fit = _fit_slope([r["params"]["r"] for r in ok], [r["metrics"]["residual"] for r in ok])
    return {
        "residual_fit": fit,
        "distance_constant": max((r["metrics"]["distance_over_r"] for r in ok), default=None),
        "verdicts": {"C6_surjective": bool(_all_flag(rows, "C6_surjective"))},
    }


# interpolation --------------------------------------------------------------


def _kernel_map(cfg: ExperimentConfig):
    """Kernel-evaluation inverse of the free line at the marked node."""
    g = cfg.geometry
    per_octave = int(g.get("per_octave", 6))
    m = int(g.get("m", 16))
    dfree = build_lattice_domain(-3.0, 3.0, per_octave, m, "fubini_study")
    ufree = laurent_curve(dfree, {1: [1.0, 0.0]})
    J = _structure(cfg)
    Df = lo.assemble_Du(ufree.with_values(ufree.values), J, bc=lo.TransparentBC((0, 0), (2, 1)))
    sig_star = float(g.get("sigma_star", -math.log(2) / 2))
    j_star = int(g.get("theta_index", 0))
    q = so.kernel_evaluation_inverse(Df, (dfree.level_index(sig_star), j_star))
    return Df, q, sig_star, j_star


def _target_offsets(cfg: ExperimentConfig) -> list[np.ndarray]:
    """Seeded offsets ``w_k`` (one per period) of norm ``targets.offset``, gated by the admissible ball."""
    offset = float(cfg.targets.get("offset", 1e-3))
    admissible = float(cfg.targets.get("admissible_radius", 0.05))
    if offset > admissible:
        raise StageError("entry_gate", f"target offset {offset} outside the admissible ball of radius {admissible}")
    periods = int(cfg.geometry.get("periods", 2))
    rng = np.random.default_rng(int(cfg.targets.get("seed", cfg.seed)))
    return [offset * v / np.linalg.norm(v) for v in rng.standard_normal((periods, 4))]


@dataclass
class Interpolant:
    chain: list
    glue: GlueConfig
    u: CurveSamples
    uc: CurveSamples
    report: so.SolveReport
    c0: float
    margin: float


def _solve_interpolant(cfg: ExperimentConfig, r: float, ws: list[np.ndarray], seed: int) -> Interpolant:
    """Glue the chain with kernel deformations aimed at ``ws`` and correct it through the targets."""
    g = cfg.geometry
    periods = int(g.get("periods", 2))
    free = int(g.get("free_index", 0))
    chain = _chain(cfg)
    J = _structure(cfg)
    glue = cfg.glue_config(r)
    try:
        Df, q, sig_star, j_star = _kernel_map(cfg)
    except (ValueError, lo.RankDeficiencyError) as exc:
        raise StageError("kernel", str(exc)) from None
    fields = {k: PolynomialField(so.polynomial_coefficients(Df, q(w), degree=2)) for k, w in enumerate(ws)}
    try:
        u = build_chain_glue(
            chain, [r] * len(chain), glue, deformations=fields, free_index=free, periods=periods,
            per_octave=int(g.get("per_octave", 6)), m=int(g.get("m", 16)), mark=(sig_star, j_star),
        )
    except ValueError as exc:
        raise StageError("glue", str(exc)) from None
    base = chain[free].value(np.exp(sig_star + 1j * u.domain.theta[j_star]), free)
    targets = [base + w for w in ws]
    marks = u.meta["marks"]
    try:
        D = lo.assemble_Du(u.with_values(u.values), J)
        A = lo.augment_with_evaluation(D, marks)
        T = lo.right_inverse_direct(A)
    except lo.RankDeficiencyError as exc:
        raise StageError("inverse", str(exc)) from None
    probes = int(g.get("probes", 20))
    vec = lo.nonlinear_residual(A, u.with_values(u.values))
    c0 = so.inverse_norm_estimate(T, A, p=glue.p, probes=probes, seed=seed, extra=[vec])
    try:
        uc, rep = so.constrained_newton(u, J, T, targets, marks, D=A, p=glue.p, c0=c0)
    except so.SolverError as exc:
        raise StageError("newton", str(exc)) from None
    return Interpolant(chain, glue, u, uc, rep, c0, q.margin)


def _interpolation_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    r = point["r"]
    periods = int(cfg.geometry.get("periods", 2))
    free = int(cfg.geometry.get("free_index", 0))
    ws = _target_offsets(cfg)
    it = _solve_interpolant(cfg, r, ws, seed)
    chain, glue, uc, rep, c0 = it.chain, it.glue, it.uc, it.report, it.c0
    dom = uc.domain
    N = len(chain)
    # R2: expansion a z + a' r^2 / z at every neck, in the chart of its intersection point
    necks, fitted, drift = [], [], []
    a0, a1 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])
    for neck in range(N * periods):
        necks.append(expansion_check(uc, a0, a1, r, neck=neck).residual_sup)
        f = fit_expansion(uc, r, neck=neck)
        fitted.append(f.residual_sup)
        drift.append(float(max(np.linalg.norm(f.a0 - a0), np.linalg.norm(f.a1 - a1), np.linalg.norm(f.offset))))
    # R3: distance to the input curves where the approximate solution is the (deformed) curve
    thick = np.abs(dom.local_sigma) <= -glue.gamma_out * math.log(r) + 1e-9
    dist = np.sqrt(np.sum((uc.values - reference_chain(chain, dom, uc.charts)) ** 2, axis=-1)).max(axis=1)
    seg_dist = [float(dist[(dom.segment == s) & thick].max()) for s in range(N * periods)]
    deltas = [float(np.linalg.norm(ws[s // N])) if s % N == free % N else 0.0 for s in range(N * periods)]
    free_necks = [s % (N * periods) for s in range(N * periods) if s % N == free % N] + [
        (s + 1) % (N * periods) for s in range(N * periods) if s % N == free % N
    ]
    return {
        "constraint_residual": rep.constraint_residual,
        "final_residual": rep.residual_history[-1],
        "newton_iterations": rep.iterations,
        "initial_residual": rep.initial_residual,
        "xi_norm": rep.xi_norm,
        "c0": c0,
        "bound_check": bool(rep.bound_check),
        "neck_residuals": necks,
        "neck_fit_residuals": fitted,
        "neck_coefficient_drift": drift,
        "free_necks": sorted(set(free_necks)),
        "segment_distances": seg_dist,
        "segment_deltas": deltas,
        "kernel_margin": it.margin,
        "levels": dom.L,
    }


def _interpolation_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    return {
        "C6_R1": bool(m["constraint_residual"] < 1e-10 and m["final_residual"] < 1e-9),
        "C7": bool(m["bound_check"]),
    }


def _interpolation_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    ok = sorted(_ok_rows(rows), key=lambda row: -row["params"]["r"])
    eps = cfg.glue_config().eps_target
    if len(ok) < 2:
        return {"insufficient_sweep": True, "verdicts": {"C6": False, "C7": _bound_flags(rows)}}
    rs = [row["params"]["r"] for row in ok]
    r1_ok = len(ok) == len(rows) and all(row["flags"].get("C6_R1", False) for row in ok)
    # R2: the three-term neck expansion leaves O(r^{1+eps}) at every neck
    r2_fit = _fit_slope(rs, [max(row["metrics"]["neck_fit_residuals"]) for row in ok])
    r2_ok = (not r2_fit["insufficient_sweep"]) and r2_fit["slope"] >= 1 + eps
    free = set(ok[0]["metrics"]["free_necks"])
    clean = [k for k in range(len(ok[0]["metrics"]["neck_residuals"])) if k not in free]
    nominal_fit = _fit_slope(rs, [max(row["metrics"]["neck_residuals"][k] for k in clean) for row in ok])

    # R3: one c over all segments, fitted at the largest r and checked at the others
    def worst_ratio(row):
        r = row["params"]["r"]
        m = row["metrics"]
        return max(v / (r ** (1 + eps) + d) for v, d in zip(m["segment_distances"], m["segment_deltas"]))

    ratios = [worst_ratio(row) for row in ok]
    c_r3 = ratios[0]
    r3_ok = all(x <= c_r3 * (1 + 1e-12) for x in ratios)
    return {
        "R1": r1_ok,
        "R2_fit": r2_fit,
        "R2_nominal_clean_necks": clean,
        "R2_nominal_fit": nominal_fit,
        "R3_constant": c_r3,
        "R3_ratios": ratios,
        "verdicts": {"C6": bool(r1_ok and r2_ok and r3_ok), "C7": _bound_flags(rows)},
    }


# separation -----------------------------------------------------------------


def _ball_points(u: CurveSamples, radius: float, refine: int) -> np.ndarray:
    pts = upsample_angular(u.embedded(), refine).reshape(-1, u.dim)
    return pts[np.linalg.norm(pts, axis=1) <= radius]


def _corrected_pair(cfg: ExperimentConfig, r: float, seed: int, probes: int):
    ps = _pair_setup(cfg, r)
    D, Q, _ = _pair_inverse(ps, cfg.geometry.get("inverse", "direct"), seed, probes)
    u, rep = _newton(ps, D, Q, seed, probes)
    return u, rep


def _separation_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    g = cfg.geometry
    r = point["r"]
    factor = float(g.get("factor", 2.0))
    probes = int(g.get("probes", 20))
    ball = float(g.get("ball", 1.0))
    refine = int(g.get("refine", 4))
    try:
        ua, ra = _corrected_pair(cfg, r, seed, probes)
        ub, rb = _corrected_pair(cfg, factor * r, seed, probes)
    except (so.SolverError, lo.RankDeficiencyError, ValueError) as exc:
        raise StageError("newton", str(exc)) from None
    h = hausdorff_distance(_ball_points(ua, ball, refine), _ball_points(ub, ball, refine))
    return {
        "hausdorff": h,
        "ratio": h / ((factor - 1) * r),
        "final_residuals": [ra.residual_history[-1], rb.residual_history[-1]],
        "bound_check": bool(ra.bound_check and rb.bound_check),
        "xi_norms": [ra.xi_norm, rb.xi_norm],
    }


def _separation_lattice_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    """Two interpolants at the same ``r`` whose targets differ in one period.

    The cylinder distance must stay above ``2^{-k*} (|dw| - 2 |correction|)``,
    with ``k*`` the window index of the marked node that moved and the
    correction measured in C0 on both runs.
    """
    g = cfg.geometry
    r = point["r"]
    periods = int(g.get("periods", 2))
    slot = int(g.get("slot", periods - 1))
    if not 0 <= slot < periods:
        raise StageError("targets", f"slot {slot} outside 0..{periods - 1}")
    ws = _target_offsets(cfg)
    shift = float(cfg.targets.get("shift", cfg.targets.get("offset", 1e-3)))
    direction = np.random.default_rng([int(cfg.targets.get("seed", cfg.seed)), 1]).standard_normal(4)
    moved = list(ws)
    moved[slot] = ws[slot] + shift * direction / np.linalg.norm(direction)
    admissible = float(cfg.targets.get("admissible_radius", 0.05))
    if np.linalg.norm(moved[slot]) > admissible:
        raise StageError("entry_gate", f"shifted target outside the admissible ball of radius {admissible}")
    a = _solve_interpolant(cfg, r, ws, seed)
    b = _solve_interpolant(cfg, r, moved, seed)
    dist = cylinder_distance(a.uc, b.uc)
    corr = max(float(np.sqrt(np.sum((x.uc.values - x.u.values) ** 2, axis=-1)).max()) for x in (a, b))
    dom = a.uc.domain
    l_star, _ = a.u.meta["marks"][slot]
    span = dom.glue.segments
    s_star = (dom.window_coord[l_star] + span / 2) % span - span / 2
    k_star = int(max(math.ceil(abs(s_star) - 1e-12), 0))
    dw = float(np.linalg.norm(moved[slot] - ws[slot]))
    l_m, j_m = a.u.meta["marks"][slot]
    at_mark = float(np.linalg.norm(a.uc.values[l_m, j_m] - b.uc.values[l_m, j_m]))
    lower = 2.0**-k_star * (dw - 2 * corr)
    return {
        "cylinder_distance": dist,
        "lower_bound": lower,
        "bound_informative": bool(lower > 0),
        # with the constraints met exactly the marked nodes are |dw| apart
        "marked_lower_bound": 2.0**-k_star * at_mark,
        "k_star": k_star,
        "target_shift": dw,
        "correction_c0": corr,
        "constraint_residuals": [a.report.constraint_residual, b.report.constraint_residual],
        "bound_check": bool(a.report.bound_check and b.report.bound_check),
    }


def _separation_run(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    if cfg.geometry.get("mode", "radii") == "lattice":
        return _separation_lattice_point(cfg, point, seed)
    return _separation_point(cfg, point, seed)


def _separation_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    flags = {"C7": bool(m["bound_check"])}
    if "lower_bound" in m:
        d = m["cylinder_distance"]
        flags["C8_lattice"] = bool(d > 0 and d >= m["lower_bound"] and d >= m["marked_lower_bound"] * (1 - 1e-12))
    return flags


def _separation_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    if cfg.geometry.get("mode", "radii") == "lattice":
        v = _all_flag(rows, "C8_lattice")
        return {"verdicts": {"C8_lattice": bool(v), "C7": _bound_flags(rows)}}
    ok = _ok_rows(rows)
    factor = float(cfg.geometry.get("factor", 2.0))
    if not ok:
        return {"verdicts": {"C8": False, "C7": False}}
    gaps = np.array([(factor - 1) * row["params"]["r"] for row in ok])
    hs = np.array([row["metrics"]["hausdorff"] for row in ok])
    k_min = float(np.min(hs / gaps))
    k_fit = float(gaps @ hs / (gaps @ gaps))
    need = int(cfg.geometry.get("min_points", 4))
    verdict = len(ok) == len(rows) and len(ok) >= need and k_min > 0
    return {"K_prime": k_min, "K_prime_lsq": k_fit, "verdicts": {"C8": bool(verdict), "C7": _bound_flags(rows)}}


# norm oracles ---------------------------------------------------------------


def _norm_points(cfg: ExperimentConfig) -> list[dict]:
    pts: list[dict] = []
    n = int(cfg.sweep.get("tuples", [20])[0])
    rng = np.random.default_rng(cfg.seed)
    for _ in range(n):
        eps_exp = float(rng.uniform(0.6, 2.0))
        pts.append(
            {
                "kind": "oracle",
                "r": float(rng.uniform(0.01, 0.3)),
                "eps_exp": eps_exp,
                "delta_exp": float(rng.uniform(0.0, 0.9 * eps_exp)),
                "p": float(rng.uniform(2.05, 3.9)),
                "l": int(rng.integers(1, 4)),
                "inverse": bool(rng.integers(0, 2)),
                "cut_delta": float(rng.uniform(1e-3, 0.3)),
                "cut_ratio": float(np.exp(rng.uniform(0.5, 4.0))),
            }
        )
    for r in cfg.sweep.get("r", []):
        pts.append({"kind": "sobolev", "r": float(r)})
    return pts


def _norm_point(cfg: ExperimentConfig, point: dict, seed: int) -> dict:
    g = cfg.geometry
    if point["kind"] == "sobolev":
        dom = build_neck_sphere(point["r"], margin=float(g.get("margin", 3.0)), per_octave=int(g.get("per_octave", 6)), m=int(g.get("m", 16)))
        return {"s_p": sobolev_constant_estimate(dom, cfg.glue_config().p, trials=int(g.get("trials", 200)), seed=seed)}
    r, e, dl, p, l = point["r"], point["eps_exp"], point["delta_exp"], point["p"], point["l"]
    nr = int(g.get("radial_knots", 257))
    dom = build_annulus(r**e, r**dl, nr, 16, "flat")
    z = dom.z()
    lprime = 2 * l if point["inverse"] else None
    if lprime is None:
        w = z**l
    else:
        w = r**lprime / z**l
    vals = np.stack([w.real, w.imag], axis=-1)
    quad = norm_array(dom, vals, NormSpec(p=p, flavor="Lp"))
    exact = annulus_power_norm_closed_form(r, e, dl, p, l, lprime)
    cut = LogCutoff(point["cut_delta"], point["cut_delta"] * point["cut_ratio"])
    dq = dirichlet_energy_quadrature(cut, nr=nr)
    de = dirichlet_energy(cut)
    return {
        "annulus_quadrature": quad,
        "annulus_closed_form": exact,
        "annulus_rel_error": abs(quad - exact) / exact,
        "dirichlet_quadrature": dq,
        "dirichlet_closed_form": de,
        "dirichlet_rel_error": abs(dq - de) / de,
    }


def _norm_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    if params["kind"] == "sobolev":
        return {}
    return {"C1": bool(m["annulus_rel_error"] <= 1e-6 and m["dirichlet_rel_error"] <= 1e-5)}


def _norm_summary(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    oracle = [row for row in rows if row["params"]["kind"] == "oracle"]
    sob = [row for row in _ok_rows(rows) if row["params"]["kind"] == "sobolev"]
    verdicts = {"C1": bool(len(oracle) >= 20 and _all_flag(oracle, "C1"))}
    out: dict = {"verdicts": verdicts}
    if sob:
        vals = [row["metrics"]["s_p"] for row in sob]
        out["s_p_spread"] = float(max(vals) / min(vals))
        n_sob = len([row for row in rows if row["params"]["kind"] == "sobolev"])
        verdicts["C9"] = bool(len(sob) == n_sob and len(sob) >= 2 and out["s_p_spread"] < 2)
    return out


def _no_flags(cfg: ExperimentConfig, params: dict, m: dict) -> dict:
    return {}


REGISTRY: dict[str, Experiment] = {
    "residual_scaling": Experiment(_r_points, _residual_scaling_point, _no_flags, _residual_scaling_summary),
    "expansion": Experiment(_r_points, _expansion_point, lambda c, p, m: {"C7": bool(m["bound_check"])}, _expansion_summary),
    "pair_glue_end_to_end": Experiment(_r_points, _pair_point, _pair_flags, _pair_summary),
    "chain_glue": Experiment(_r_points, _chain_point, _chain_flags, _chain_summary),
    "interpolation": Experiment(_r_points, _interpolation_point, _interpolation_flags, _interpolation_summary),
    "separation": Experiment(_r_points, _separation_run, _separation_flags, _separation_summary),
    "norm_oracles": Experiment(_norm_points, _norm_point, _norm_flags, _norm_summary),
}


# ---------------------------------------------------------------------------
# running


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _run_one(args: tuple[ExperimentConfig, int, dict]) -> dict:
    cfg, index, point = args
    exp = REGISTRY[cfg.experiment]
    seed = point_seed(cfg.seed, index)
    row = {
        "experiment": cfg.experiment,
        "index": index,
        "seed": seed,
        "config_seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "versions": versions(),
        "grid": {k: cfg.geometry[k] for k in ("per_octave", "m", "margin") if k in cfg.geometry},
        "params": point,
        "metrics": {},
        "flags": {},
        "error": None,
        "stage": None,
    }
    try:
        metrics = _jsonable(exp.run_point(cfg, point, seed))
        row["metrics"] = metrics
        row["flags"] = _jsonable(exp.row_flags(cfg, point, metrics))
    except StageError as exc:
        row["error"], row["stage"] = str(exc), exc.stage
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        row["error"], row["stage"] = f"{type(exc).__name__}: {exc}", "run"
    return row


@dataclass
class ExperimentReport:
    experiment: str
    config_hash: str
    config: dict
    seed: int
    rows: list[dict]
    summary: dict
    versions: dict
    elapsed_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "config": self.config,
            "seed": self.seed,
            "versions": self.versions,
            "rows": self.rows,
            "summary": self.summary,
            "elapsed_s": self.elapsed_s,
        }

    @property
    def verdicts(self) -> dict:
        return dict(self.summary.get("verdicts", {}))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Run every sweep point (in ``jobs`` worker processes) and reduce to a report."""
    exp = REGISTRY[cfg.experiment]
    points = exp.points(cfg)
    tasks = [(cfg, i, p) for i, p in enumerate(points)]
    t0 = time.perf_counter()
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(t) for t in tasks]
    rows.sort(key=lambda row: row["index"])
    summary = _jsonable(exp.summarize(cfg, rows))
    return ExperimentReport(
        cfg.experiment, cfg.config_hash, cfg.to_json(), cfg.seed, rows, summary, versions(), time.perf_counter() - t0
    )


def _flatten(prefix: str, obj: Any, out: dict) -> None:
    for key, val in obj.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            _flatten(name + ".", val, out)
        elif isinstance(val, list):
            out[name] = json.dumps(val, sort_keys=True)
        else:
            out[name] = val


def rows_csv(rows: list[dict]) -> str:
    """Flat CSV of the rows (nested fields as dotted columns, lists as JSON)."""
    flat = []
    for row in rows:
        rec: dict = {}
        _flatten("", row, rec)
        flat.append(rec)
    cols = sorted({k for rec in flat for k in rec})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for rec in flat:
        writer.writerow({k: ("" if rec.get(k) is None else (repr(rec[k]) if isinstance(rec[k], float) else rec[k])) for k in cols})
    return buf.getvalue()


def write_report(report: ExperimentReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rp = out / "report.json"
    cp = out / "rows.csv"
    rp.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    cp.write_text(rows_csv(report.rows))
    return rp, cp


def verify_report(path: str | Path) -> tuple[bool, list[str]]:
    """Recompute every row flag and summary verdict from the stored rows.

    Returns ``(consistent, messages)``; ``consistent`` is False when a stored
    flag or verdict differs from its recomputation.
    """
    data = json.loads(Path(path).read_text())
    raw = json.dumps({k: v for k, v in data["config"].items() if v is not None}).encode()
    cfg = parse_config(raw, seed=data["seed"])
    exp = REGISTRY[data["experiment"]]
    msgs: list[str] = []
    ok = True
    for row in data["rows"]:
        if row.get("config_hash") != data["config_hash"]:
            ok = False
            msgs.append(f"row {row['index']}: config hash differs from the report")
        if row.get("error") is not None:
            continue
        flags = _jsonable(exp.row_flags(cfg, row["params"], row["metrics"]))
        if flags != row["flags"]:
            ok = False
            msgs.append(f"row {row['index']}: stored flags {row['flags']} != recomputed {flags}")
    summary = _jsonable(exp.summarize(cfg, data["rows"]))
    stored = data["summary"].get("verdicts", {})
    if summary.get("verdicts", {}) != stored:
        ok = False
        msgs.append(f"verdicts: stored {stored} != recomputed {summary.get('verdicts')}")
    for key, val in sorted(stored.items()):
        msgs.append(f"{key}: {'pass' if val else 'FAIL'}")
    return ok, msgs
