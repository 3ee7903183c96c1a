"""Newton correction of approximate solutions, with optional point constraints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .acs import AlmostComplexStructure
from .curves import CurveSamples, dbar_residual
from .domain import NormSpec
from .linop import (
    LinearOperatorHandle,
    RankDeficiencyError,
    assemble_Du,
    field_norm,
    form_norm,
    numerical_kernel,
    operator_distance,
    random_form_probe,
    right_inverse_direct,
)


class SolverError(RuntimeError):
    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


class DivergenceError(SolverError):
    pass


class SmallnessGateError(SolverError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residual_history: list[float]
    xi_norm: float
    constraint_residual: float = 0.0
    bound_check: bool | None = None
    c0: float | None = None
    initial_residual: float = 0.0
    full_residual: float = 0.0
    converged: bool = False
    constraint_history: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual_history": list(self.residual_history),
            "xi_norm": self.xi_norm,
            "constraint_residual": self.constraint_residual,
            "bound_check": self.bound_check,
            "c0": self.c0,
            "initial_residual": self.initial_residual,
            "full_residual": self.full_residual,
            "converged": self.converged,
            "constraint_history": list(self.constraint_history),
        }


def norm_specs(domain, p: float = 2.5) -> tuple[NormSpec, NormSpec]:
    """``(field, form)`` norm specs: windowed sup norms when the domain has windows."""
    if domain.window_coord is not None:
        return NormSpec(p=p, flavor="linf_W1p"), NormSpec(p=p, flavor="linf_Lp")
    return NormSpec(p=p, flavor="W1p"), NormSpec(p=p, flavor="Lp")


def _residual(D: LinearOperatorHandle, u: CurveSamples, J: AlmostComplexStructure, spec: NormSpec):
    raw = dbar_residual(u, J).values
    vec = D.project(raw)
    base = D.meta.get("base", D)
    n = base.codomain_dim
    return vec[:n], form_norm(base, vec[:n], spec), float(np.abs(raw).max())


def newton_correct(
    u0: CurveSamples,
    J: AlmostComplexStructure,
    Q: LinearOperatorHandle,
    tol: float = 1e-10,
    max_iter: int = 30,
    D: LinearOperatorHandle | None = None,
    p: float = 2.5,
    c0: float | None = None,
    gate: float | None = None,
    relinearize_every: int = 0,
) -> tuple[CurveSamples, SolveReport]:
    """Iterate ``u <- u + Q(-dbar_J u)`` with the inverse frozen at ``u0``.

    The residual is measured in the row layout of ``D`` (the rows the inverse
    solves for) with the form norm of the domain.  ``gate`` is the entry
    smallness threshold; ``relinearize_every=k`` rebuilds ``D`` and ``Q``
    every ``k`` steps.
    """
    u = u0.with_values(u0.values)
    D = D if D is not None else assemble_Du(u, J)
    spec_xi, spec_eta = norm_specs(u.domain, p)
    vec, res, full = _residual(D, u, J, spec_eta)
    report = SolveReport(0, [res], 0.0, c0=c0, initial_residual=res, full_residual=full)
    if gate is not None and res > gate:
        raise SmallnessGateError(f"initial residual {res:.3e} exceeds the entry gate {gate:.3e}", report)
    xi_total = np.zeros(D.domain_dim)
    increases = 0
    it = 0
    while res >= tol:
        if it >= max_iter:
            raise SolverError(f"no convergence within {max_iter} iterations", report)
        if relinearize_every and it and it % relinearize_every == 0:
            D = assemble_Du(u, J, bc=D.meta.get("bc"), dealias=D.meta.get("dealias"))
            Q = right_inverse_direct(D)
        xi = Q(-vec)
        xi_total += xi
        u = u.add(xi)
        it += 1
        prev = res
        vec, res, full = _residual(D, u, J, spec_eta)
        report.residual_history.append(res)
        report.iterations = it
        report.full_residual = full
        increases = increases + 1 if res > prev else 0
        if increases >= 2 or not math.isfinite(res):
            raise DivergenceError("residual increased twice in a row", report)
    report.converged = True
    report.xi_norm = field_norm(D, xi_total, spec_xi)
    if c0 is not None:
        report.bound_check = bool(report.xi_norm <= 2 * c0 * report.initial_residual + 1e-14)
    return u, report


def constrained_newton(
    u0: CurveSamples,
    J: AlmostComplexStructure,
    T: LinearOperatorHandle,
    targets: Sequence[Any],
    marked: Sequence[tuple[int, int]],
    tol: float = 1e-9,
    max_iter: int = 30,
    D: LinearOperatorHandle | None = None,
    p: float = 2.5,
    c0: float | None = None,
    constraint_tol: float = 1e-10,
) -> tuple[CurveSamples, SolveReport]:
    """Newton iteration for ``dbar_J u = 0`` and ``u(z_k) = m_k``.

    ``T`` is a right inverse of the augmented operator ``(D_u, ev)`` whose row
    layout is ``D.project(eta, w)`` (see ``augment_with_evaluation``).
    """
    if len(targets) != len(marked):
        raise ValueError("one target per marked point")
    u = u0.with_values(u0.values)
    if D is None or "eval_rows" not in D.meta:
        raise ValueError("constrained_newton needs the augmented operator D (with evaluation rows)")
    spec_xi, spec_eta = norm_specs(u.domain, p)
    tg = np.asarray(targets, dtype=float).reshape(len(marked), -1)

    def offsets(cur: CurveSamples) -> np.ndarray:
        return np.stack([tg[k] - cur.values[l, j] for k, (l, j) in enumerate(marked)]) if marked else np.zeros((0, u.dim))

    vec, res, full = _residual(D, u, J, spec_eta)
    off = offsets(u)
    cres = float(np.abs(off).max()) if off.size else 0.0
    report = SolveReport(0, [res], 0.0, cres, c0=c0, initial_residual=res, full_residual=full, constraint_history=[cres])
    xi_total = np.zeros(D.domain_dim)
    increases = 0
    it = 0
    while res >= tol or cres >= constraint_tol:
        if it >= max_iter:
            raise SolverError(f"no convergence within {max_iter} iterations", report)
        rhs = np.concatenate([-vec, off.ravel()])
        xi = T(rhs)
        xi_total += xi
        u = u.add(xi)
        it += 1
        prev = res
        vec, res, full = _residual(D, u, J, spec_eta)
        off = offsets(u)
        cres = float(np.abs(off).max()) if off.size else 0.0
        report.residual_history.append(res)
        report.constraint_history.append(cres)
        report.iterations = it
        report.constraint_residual = cres
        report.full_residual = full
        increases = increases + 1 if res > prev and res > tol else 0
        if increases >= 2 or not math.isfinite(res):
            raise DivergenceError("residual increased twice in a row", report)
    report.converged = True
    report.xi_norm = field_norm(D.meta.get("base", D), xi_total, spec_xi)
    if c0 is not None:
        report.bound_check = bool(report.xi_norm <= 2 * c0 * report.initial_residual + 1e-14)
    return u, report


# ---------------------------------------------------------------------------
# kernel evaluation


@dataclass(eq=False)
class KernelEvaluationInverse:
    """``q: w -> X_w`` in the kernel with ``X_w(z_*) = w`` and minimal coefficient norm."""

    basis: np.ndarray
    evaluation: np.ndarray
    node: tuple[int, int]
    margin: float
    rows: np.ndarray

    def coefficients(self, w: Any) -> np.ndarray:
        return np.linalg.lstsq(self.evaluation, np.asarray(w, dtype=float), rcond=None)[0]

    def __call__(self, w: Any) -> np.ndarray:
        return self.basis @ self.coefficients(w)

    def evaluate(self, xi: np.ndarray) -> np.ndarray:
        return self.rows @ xi


def kernel_evaluation_inverse(
    D_free: LinearOperatorHandle,
    z_star: tuple[int, int],
    Q: LinearOperatorHandle | None = None,
    rank_tol: float = 1e-8,
) -> KernelEvaluationInverse:
    """Minimum-norm right inverse of evaluation at the node ``z_star`` restricted to ``ker D_free``."""
    L, m, d = D_free.meta["shape"]
    l, j = z_star
    if not (0 <= l < L and 0 <= j < m):
        raise ValueError("z_star is not a node of the domain")
    Q = Q if Q is not None else right_inverse_direct(D_free)
    K = numerical_kernel(D_free, Q)
    start = (l * m + j) * d
    E = np.zeros((d, D_free.domain_dim))
    E[:, start : start + d] = np.eye(d)
    M = E @ K
    s = np.linalg.svd(M, compute_uv=False) if K.size else np.zeros(0)
    if len(s) < d or s[d - 1] <= rank_tol * max(1.0, s[0]):
        margin = float(s[d - 1]) if len(s) >= d else 0.0
        raise RankDeficiencyError(f"evaluation on the kernel has rank < {d} (margin {margin:.2e})")
    return KernelEvaluationInverse(K, M, (l, j), float(s[d - 1]), E)


def polynomial_coefficients(D_free: LinearOperatorHandle, xi: np.ndarray, degree: int = 2) -> np.ndarray:
    """Complex coefficients ``c_k`` (``k = 0..degree``) of a holomorphic field read off its rings.

    Fits ``xi_hat_k(sigma) = c_k e^{k sigma}`` by least squares over all levels.
    """
    L, m, d = D_free.meta["shape"]
    n = d // 2
    dom = D_free.meta["curve"].domain
    v = np.asarray(xi).reshape(L, m, d)
    c = v[..., :n] + 1j * v[..., n:]
    F = np.fft.fft(c, axis=1) / m
    out = np.zeros((degree + 1, n), dtype=complex)
    for k in range(degree + 1):
        g = np.exp(k * dom.sigma)
        out[k] = (g[:, None] * F[:, k]).sum(axis=0) / (g @ g)
    return out


# ---------------------------------------------------------------------------
# constants


def inverse_norm_estimate(
    Q: LinearOperatorHandle,
    D: LinearOperatorHandle,
    p: float = 2.5,
    probes: int = 200,
    seed: int = 0,
    extra: Sequence[np.ndarray] = (),
) -> float:
    """Probe estimate of ``c0 = |Q|`` from forms (``L^p``) to fields (``W^{1,p}``).

    ``extra`` codomain vectors (e.g. the current residual) are always probed.
    """
    rng = np.random.default_rng(seed)
    spec_xi, spec_eta = norm_specs(D.meta["curve"].domain, p)
    best = 0.0
    vecs = list(extra)
    for t in range(probes):
        vecs.append(D.project(random_form_probe(D, rng, "smooth" if t % 2 == 0 else "local")))
    for v in vecs:
        n_in = form_norm(D, v, spec_eta)
        if n_in == 0:
            continue
        best = max(best, field_norm(D, Q(v), spec_xi) / n_in)
    return best


def linearization_lipschitz(
    u: CurveSamples,
    J: AlmostComplexStructure,
    D: LinearOperatorHandle,
    scales: Sequence[float] = (1e-3, 3e-3, 1e-2),
    probes: int = 10,
    seed: int = 0,
    p: float = 2.5,
) -> float:
    """Fit ``c1`` in ``|D_{u + xi} - D_u| <= c1 |xi|_{W^{1,p}}`` from random smooth ``xi``."""
    rng = np.random.default_rng(seed)
    spec_xi = NormSpec(p=p, flavor="W1p")
    u = u.with_values(u.values)
    best = 0.0
    for s in scales:
        xi = random_form_probe(D, rng, "smooth").ravel()
        xi *= s / max(field_norm(D, xi, spec_xi), 1e-300)
        D2 = assemble_Du(u.add(xi), J, bc=D.meta.get("bc"), dealias=D.meta.get("dealias"))
        best = max(best, operator_distance(D, D2, p=p, probes=probes, seed=seed) / s)
    return best


def entry_gate(c0: float, c1: float, budget: float = 1.0) -> float:
    """Entry threshold ``delta / (4 c0)`` with ``delta = min(0.1 budget, 1 / (2 c0 c1))``."""
    delta = min(0.1 * budget, 1.0 / (2 * c0 * max(c1, 1e-300)))
    return delta / (4 * c0)
