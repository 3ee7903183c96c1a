"""Linearized Cauchy-Riemann operators and their right inverses.

Tangent fields along a curve are vectors of length ``L * m * d`` (node-major,
component-minor).  The linearization of ``F(u) = u_sigma + J(u) u_theta`` is

    D xi = xi_sigma + J(u) xi_theta + (dJ(u)[xi]) u_theta.

On non-periodic sphere-chart domains the ends carry transparent conditions:
each angular mode gives up one ODE row at one end, and the modes that a
holomorphic continuation past the end would not carry are set to zero
(``k < kmin`` on the left ring, ``k > kmax`` on the right ring, per complex
component).  For the constant structure this reproduces the kernel of the
operator on the full sphere exactly: polynomials of degree ``kmax``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .acs import AlmostComplexStructure, standard_matrix
from .curves import CurveSamples, dbar_residual
from .domain import (
    DiscreteDomain,
    NormSpec,
    angular_derivative_matrix,
    angular_wavenumbers,
    backward_modes,
    mode_split_projectors,
    norm_array,
)


class RankDeficiencyError(RuntimeError):
    """The discretized operator is not surjective at the regularization scale."""


class ContractionError(RuntimeError):
    """A Neumann series was requested for a non-contracting defect."""


@dataclass(frozen=True)
class TransparentBC:
    """Mode bounds per complex component: ``kmin`` on the left ring, ``kmax`` on the right."""

    kmin: tuple[int, ...]
    kmax: tuple[int, ...]

    @classmethod
    def trivial(cls, n: int) -> "TransparentBC":
        return cls((0,) * n, (0,) * n)


@dataclass(eq=False)
class LinearOperatorHandle:
    """A linear map between coefficient vectors, with the norms it is measured in.

    ``matrix`` is present for assembled operators.  ``project`` maps a sampled
    form field ``(L, m, d)`` to the codomain vector and ``to_field`` maps a
    codomain vector back to a form field; both are ``None`` for inverses.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    domain_dim: int
    codomain_dim: int
    norm_context: tuple[NormSpec, NormSpec] = (NormSpec(flavor="W1p"), NormSpec(flavor="Lp"))
    matrix: sp.spmatrix | None = None
    project: Callable[..., np.ndarray] | None = None
    to_field: Callable[[np.ndarray], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# assembly helpers


def block_diagonal(blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse block-diagonal matrix from ``(N, d, d)`` blocks."""
    nb, d, _ = blocks.shape
    base = np.arange(nb)[:, None, None] * d
    rows = np.broadcast_to(base + np.arange(d)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(d)[None, None, :], blocks.shape)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(nb * d, nb * d))


def ring_fourier_rows(m: int, n: int, modes_per_component: Sequence[Sequence[int]]) -> np.ndarray:
    """Real rows extracting unitary-normalized complex Fourier coefficients of one ring.

    For component ``a`` and mode ``k`` the coefficient is
    ``m^{-1/2} sum_j (x_a + i x_{a+n})(theta_j) e^{-i k theta_j}``; its real and
    imaginary parts give two rows acting on ``(m * 2n)`` ring values.
    """
    d = 2 * n
    theta = 2 * np.pi * np.arange(m) / m
    rows = []
    for a, modes in enumerate(modes_per_component):
        for k in modes:
            e = np.exp(-1j * k * theta) / math.sqrt(m)
            re = np.zeros((m, d))
            im = np.zeros((m, d))
            # (x + i y) e = (x Re e - y Im e) + i (x Im e + y Re e)
            re[:, a] = e.real
            re[:, a + n] = -e.imag
            im[:, a] = e.imag
            im[:, a + n] = e.real
            rows.append(re.ravel())
            rows.append(im.ravel())
    return np.array(rows).reshape(-1, m * d)


def mode_mean_rows(m: int, d: int) -> np.ndarray:
    """``(d, m d)`` rows returning the angular mean of a ring."""
    out = np.zeros((d, m, d))
    for c in range(d):
        out[c, :, c] = 1.0 / m
    return out.reshape(d, m * d)


def _stencil_part(u: CurveSamples, dsig: sp.spmatrix) -> sp.csr_matrix:
    """Axial stencil ``dsig`` on tangent fields, converting neighbours through chart Jacobians."""
    dom = u.domain
    m, d = dom.m, u.dim
    md = m * d
    dsig = dsig.tocoo()
    charts = u.charts
    if charts is None or u.target is None or np.all(charts == charts[0]):
        return sp.kron(dsig, sp.identity(md), format="csr")
    rows, cols, vals = [], [], []
    eye_idx = np.arange(md)
    base = np.arange(m)[:, None, None] * d
    for l, k, c in zip(dsig.row, dsig.col, dsig.data):
        if charts[k] == charts[l]:
            rows.append(l * md + eye_idx)
            cols.append(k * md + eye_idx)
            vals.append(np.full(md, c))
        else:
            jac = u.target.jacobian(u.values[k], int(charts[k]), int(charts[l]))  # (m, d, d)
            rr = l * md + base + np.arange(d)[None, :, None]
            cc = k * md + base + np.arange(d)[None, None, :]
            rows.append(np.broadcast_to(rr, jac.shape).ravel())
            cols.append(np.broadcast_to(cc, jac.shape).ravel())
            vals.append((c * jac).ravel())
    n = dom.L * md
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _axial_part(u: CurveSamples) -> sp.csr_matrix:
    """``d/d sigma`` on tangent fields, mode by mode as in ``DiscreteDomain.d_sigma``."""
    dom = u.domain
    back, fwd = dom.one_sided_matrices()
    p_neg, p_pos = mode_split_projectors(dom.m, u.dim, dom.mirrored)
    eye = sp.identity(dom.L, format="csr")
    return (
        sp.kron(eye, sp.csr_matrix(p_neg)) @ _stencil_part(u, back)
        + sp.kron(eye, sp.csr_matrix(p_pos)) @ _stencil_part(u, fwd)
    ).tocsr()


def _angular_part(u: CurveSamples, jm: np.ndarray) -> sp.csr_matrix:
    dom = u.domain
    m, d = dom.m, u.dim
    dth = angular_derivative_matrix(m, d, dom.mirrored)
    blocks = []
    for l in range(dom.L):
        jring = block_diagonal(jm[l]).toarray()
        blocks.append(sp.csr_matrix(jring @ dth))
    return sp.block_diag(blocks, format="csr")


def tangent_derivatives(D: LinearOperatorHandle, xi: np.ndarray) -> np.ndarray:
    """``(xi_sigma, xi_theta)`` of a tangent field, consistent with the assembly of ``D``."""
    L, m, d = D.meta["shape"]
    xs = D.meta["dsigma"] @ xi
    xt = D.meta["dtheta"] @ xi
    return np.stack([xs.reshape(L, m, d), xt.reshape(L, m, d)], axis=2)


# ---------------------------------------------------------------------------
# assembly


def _chart_interface_drops(u: CurveSamples) -> dict[int, list[set[int]]]:
    """Per chart change, the angular modes (per complex component) whose first row is redundant.

    For the ring ``l`` right after a chart change, component ``a`` in the new
    chart is dominated by ``z^w`` times some component of the old chart; mode
    ``k`` on the right then continues mode ``k - w`` on the left.  A backward
    mode on the right that continues a forward mode on the left is dropped.
    """
    dom = u.domain
    charts = u.charts
    if charts is None or u.target is None:
        return {}
    L, m, d = dom.L, dom.m, u.dim
    n = d // 2
    wn = angular_wavenumbers(m, dom.mirrored).astype(int)
    back = backward_modes(m, dom.mirrored)
    out: dict[int, list[set[int]]] = {}
    for l in range(L):
        if l == 0 and not dom.periodic:
            continue
        prev = (l - 1) % L
        if charts[prev] == charts[l]:
            continue
        jac = u.target.jacobian(u.values[prev], int(charts[prev]), int(charts[l]))  # (m, d, d)
        cj = jac[:, :n, :n] + 1j * jac[:, n:, :n]
        drops = []
        for a in range(n):
            b = int(np.argmax(np.abs(cj[:, a, :]).mean(axis=0)))
            w = int(wn[int(np.argmax(np.abs(np.fft.fft(cj[:, a, b]))))])
            drops.append({int(k) for k in wn if back[k % m] and not back[(k - w) % m] and -m // 2 < k - w <= m // 2})
        out[l] = drops
    return out


def _check_flat_ends(u: CurveSamples, J: AlmostComplexStructure, tol: float = 1e-10) -> None:
    j0 = standard_matrix(J.dim_half)
    for l in (0, u.domain.L - 1):
        if np.abs(J.eval(u.values[l]) - j0).max() > tol or np.abs(J.jac(u.values[l])).max() > tol:
            raise ValueError("transparent ends need J = J0 with vanishing derivative on the end rings")


def assemble_Du(
    u: CurveSamples,
    J: AlmostComplexStructure,
    bc: TransparentBC | None = None,
    dealias: int | None = None,
) -> LinearOperatorHandle:
    """Discretized linearization of the Cauchy-Riemann operator at ``u``.

    ``bc`` adds transparent end conditions (non-periodic domains; defaults to
    the trivial bundle).  ``dealias=K`` replaces the node rows of each ring by
    the projections onto angular modes ``|k| <= K`` of that ring's chart.
    """
    if u.derivs is None:
        raise ValueError("curve carries no derivative data")
    if u.dim != J.dim:
        raise ValueError(f"curve in R^{u.dim} but structure on R^{J.dim}")
    dom = u.domain
    L, m, d = dom.L, dom.m, u.dim
    n = d // 2
    md = m * d
    N = L * md
    jm = J.eval(u.values)
    kmat = np.einsum("lmabk,lmb->lmak", J.jac(u.values), u.u_theta)
    a_sig = _axial_part(u)
    a_th = _angular_part(u, jm)
    a0 = (a_sig + a_th + block_diagonal(kmat.reshape(-1, d, d))).tocsr()

    use_bc = not dom.periodic
    if use_bc and bc is None:
        bc = TransparentBC.trivial(n)
    if use_bc:
        _check_flat_ends(u, J)

    # row transform R: node-residual vector -> ODE rows.  With transparent ends
    # every angular mode loses one ODE row at the end its one-sided stencil
    # starts from: backward-stencil modes on the left ring, forward ones on
    # the right ring.
    wn = angular_wavenumbers(m, dom.mirrored).astype(int)
    back = backward_modes(m, dom.mirrored)
    keep = [k for k in wn if dealias is None or abs(k) <= dealias]
    modes: list[list[list[int]] | None] = [None if dealias is None else [keep] * n for _ in range(L)]
    if use_bc:
        modes[0] = [[k for k in keep if not back[k % m]]] * n
        modes[-1] = [[k for k in keep if back[k % m]]] * n
    # at a chart change the transition multiplies components by powers of z,
    # so a mode read forward on the left may be read backward on the right;
    # such converging pairs overdetermine the interface and lose one row
    for l, drops in _chart_interface_drops(u).items():
        base_modes = modes[l] if modes[l] is not None else [keep] * n
        modes[l] = [[k for k in base_modes[a] if k not in drops[a]] for a in range(n)]
    level_maps = [
        sp.identity(md, format="csr") if mm is None else sp.csr_matrix(ring_fourier_rows(m, n, mm)) for mm in modes
    ]
    R = sp.block_diag(level_maps, format="csr")
    A_ode = (R @ a0).tocsr()
    blocks = [A_ode]
    n_bc = 0
    if use_bc:
        left = ring_fourier_rows(m, n, [[k for k in wn if k < bc.kmin[a]] for a in range(n)])
        right = ring_fourier_rows(m, n, [[k for k in wn if k > bc.kmax[a]] for a in range(n)])
        B = sp.vstack(
            [
                sp.hstack([sp.csr_matrix(left), sp.csr_matrix((left.shape[0], N - md))]),
                sp.hstack([sp.csr_matrix((right.shape[0], N - md)), sp.csr_matrix(right)]),
            ]
        ).tocsr()
        blocks.append(B)
        n_bc = B.shape[0]
    A = sp.vstack(blocks).tocsr()
    n_ode = A_ode.shape[0]

    def project(field_values: np.ndarray) -> np.ndarray:
        return np.concatenate([R @ np.asarray(field_values, dtype=float).ravel(), np.zeros(n_bc)])

    def to_field(vec: np.ndarray) -> np.ndarray:
        return (R.T @ np.asarray(vec)[:n_ode]).reshape(L, m, d)

    meta = {
        "shape": (L, m, d),
        "n_ode": n_ode,
        "n_bc": n_bc,
        "row_map": R,
        "square": a0,
        "dsigma": a_sig,
        "dtheta": sp.kron(sp.identity(L), sp.csr_matrix(angular_derivative_matrix(m, d, dom.mirrored)), format="csr"),
        "bc": bc,
        "dealias": dealias,
        "curve": u,
        "J": J,
    }
    return LinearOperatorHandle(
        apply=lambda x: A @ x,
        domain_dim=N,
        codomain_dim=A.shape[0],
        matrix=A,
        project=project,
        to_field=to_field,
        meta=meta,
    )


def nonlinear_residual(D: LinearOperatorHandle, u: CurveSamples) -> np.ndarray:
    """Codomain vector of ``dbar_J(u)`` in the row layout of ``D``."""
    return D.project(dbar_residual(u, D.meta["J"]).values)


def augment_with_evaluation(D: LinearOperatorHandle, nodes: Sequence[tuple[int, int]]) -> LinearOperatorHandle:
    """Append point-evaluation rows ``xi(node)`` for each ``(level, angle)`` node."""
    L, m, d = D.meta["shape"]
    rows, cols = [], []
    for i, (l, j) in enumerate(nodes):
        for c in range(d):
            rows.append(i * d + c)
            cols.append((l * m + j) * d + c)
    E = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes) * d, D.domain_dim))
    A = sp.vstack([D.matrix, E]).tocsr()
    n_e = E.shape[0]

    def project(field_values: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
        tail = np.zeros(n_e) if w is None else np.asarray(w, dtype=float).ravel()
        return np.concatenate([D.project(field_values), tail])

    meta = dict(D.meta)
    meta.update({"eval_rows": E, "eval_nodes": list(nodes), "base": D})
    return LinearOperatorHandle(
        apply=lambda x: A @ x,
        domain_dim=D.domain_dim,
        codomain_dim=A.shape[0],
        norm_context=D.norm_context,
        matrix=A,
        project=project,
        to_field=lambda v: D.to_field(np.asarray(v)[: D.codomain_dim]),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# right inverses


def spectral_norm_estimate(A: sp.spmatrix, iters: int = 40, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        x = y / nrm
        est = math.sqrt(nrm)
    return est


def right_inverse_direct(
    D: LinearOperatorHandle, reg: float = 1e-10, tol: float = 1e-6, probes: int = 4, seed: int = 0
) -> LinearOperatorHandle:
    """Minimum-norm right inverse ``A^T (A A^T + lambda^2)^{-1}``, ``lambda = reg * |A|``."""
    A = D.matrix.tocsr()
    smax = spectral_norm_estimate(A)
    lam = reg * smax
    M = (A @ A.T).tocsc() + (lam * lam) * sp.identity(A.shape[0], format="csc")
    try:
        lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise RankDeficiencyError(f"normal equations are singular: {exc}") from exc

    def apply(eta: np.ndarray) -> np.ndarray:
        return A.T @ lu.solve(np.asarray(eta, dtype=float))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        eta = rng.normal(size=A.shape[0])
        res = np.linalg.norm(A @ apply(eta) - eta) / np.linalg.norm(eta)
        if not np.isfinite(res):
            raise RankDeficiencyError("non-finite probe residual")
        worst = max(worst, res)
    if worst > tol:
        raise RankDeficiencyError(f"probe residual |DQ eta - eta| / |eta| = {worst:.3e} exceeds {tol:.1e}")
    meta = {"probe_residual": worst, "sigma_max": smax, "lambda": lam, "lu": lu, "forward": D}
    return LinearOperatorHandle(
        apply=apply,
        domain_dim=D.codomain_dim,
        codomain_dim=D.domain_dim,
        norm_context=(D.norm_context[1], D.norm_context[0]),
        meta=meta,
    )


def smallest_singular_value(D: LinearOperatorHandle, Q: LinearOperatorHandle | None = None) -> float:
    """``sigma_min`` of a full-row-rank matrix via the smallest eigenvalue of ``A A^T``."""
    A = D.matrix.tocsr()
    if A.shape[0] <= 400:
        s = np.linalg.svd(A.toarray(), compute_uv=False)
        return float(s[min(A.shape) - 1])
    if Q is None:
        Q = right_inverse_direct(D)
    lu = Q.meta["lu"]
    op = spla.LinearOperator((A.shape[0], A.shape[0]), matvec=lu.solve, dtype=float)
    rng = np.random.default_rng(0)
    x = rng.normal(size=A.shape[0])
    x /= np.linalg.norm(x)
    mu = 0.0
    for _ in range(60):
        y = op @ x
        mu_new = float(np.linalg.norm(y))
        x = y / mu_new
        if abs(mu_new - mu) <= 1e-10 * mu_new:
            mu = mu_new
            break
        mu = mu_new
    return float(1.0 / math.sqrt(mu))


def numerical_kernel(D: LinearOperatorHandle, Q: LinearOperatorHandle, max_dim: int = 64, seed: int = 0, tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of ``ker A`` from projections ``x - Q A x`` of random vectors."""
    A = D.matrix
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(A.shape[1], max_dim))
    K = np.column_stack([X[:, i] - Q(A @ X[:, i]) for i in range(max_dim)])
    U, s, _ = np.linalg.svd(K, full_matrices=False)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    if rank == max_dim:
        raise ValueError("kernel dimension reaches the probe budget; raise max_dim")
    basis = U[:, :rank]
    if basis.size and np.linalg.norm(A @ basis) > 1e-6 * max(1.0, Q.meta.get("sigma_max", 1.0)):
        raise RankDeficiencyError("kernel probe vectors are not annihilated")
    return basis


# ---------------------------------------------------------------------------
# norms of coefficient vectors


def form_norm(D: LinearOperatorHandle, vec: np.ndarray, spec: NormSpec) -> float:
    dom = D.meta["curve"].domain
    return norm_array(dom, D.to_field(vec), spec, form=True)


def field_norm(D: LinearOperatorHandle, xi: np.ndarray, spec: NormSpec) -> float:
    dom = D.meta["curve"].domain
    L, m, d = D.meta["shape"]
    derivs = tangent_derivatives(D, xi) if spec.needs_derivative else None
    return norm_array(dom, np.asarray(xi).reshape(L, m, d), spec, derivs=derivs)


def form_weights(D: LinearOperatorHandle, p: float) -> np.ndarray:
    """Per-entry weights ``omega`` with ``|omega * eta|_p`` equal to the form ``L^p`` norm."""
    dom = D.meta["curve"].domain
    L, m, d = D.meta["shape"]
    w = (dom.sigma_weights * dom.lam ** (2 - p)) * (2 * np.pi / m)
    return np.broadcast_to((w ** (1 / p))[:, None, None], (L, m, d)).copy()


def random_form_probe(D: LinearOperatorHandle, rng: np.random.Generator, kind: str = "smooth", center: float | None = None) -> np.ndarray:
    """A random form field: smooth low modes, or localized near ``center`` in sigma."""
    dom = D.meta["curve"].domain
    L, m, d = D.meta["shape"]
    sig = dom.sigma
    if kind == "smooth":
        c = rng.uniform(sig[0], sig[-1]) if center is None else center
        width = (sig[-1] - sig[0]) * rng.uniform(0.05, 0.4)
    else:
        c = (rng.uniform(sig[0], sig[-1]) if center is None else center) + rng.normal() * 2 * dom.h
        width = dom.h * rng.uniform(1.0, 6.0)
    env = np.exp(-0.5 * ((sig - c) / width) ** 2)
    kmax = 3 if kind == "smooth" else m // 2 - 1
    th = dom.theta
    f = np.zeros((L, m, d))
    for k in range(-kmax, kmax + 1):
        amp = rng.normal(size=d) + 1j * rng.normal(size=d)
        f += np.real(env[:, None, None] * amp[None, None, :] * np.exp(1j * k * th)[None, :, None])
    return f


def probe_operator_norm(
    apply: Callable[[np.ndarray], np.ndarray],
    inputs: Sequence[np.ndarray],
    in_norm: Callable[[np.ndarray], float],
    out_norm: Callable[[np.ndarray], float],
    power: tuple[Callable[[np.ndarray], np.ndarray], int] | None = None,
) -> tuple[float, np.ndarray]:
    """Largest ratio ``out_norm(apply(x)) / in_norm(x)`` over the inputs.

    ``power=(adjoint_apply, iters)`` adds power iterations started from the
    best probe, in the Euclidean inner product of the (pre-weighted) vectors.
    """
    best, arg = 0.0, None
    for x in inputs:
        nx = in_norm(x)
        if nx == 0:
            continue
        val = out_norm(apply(x)) / nx
        if val > best:
            best, arg = val, x
    if power is not None and arg is not None:
        adj, iters = power
        x = arg / np.linalg.norm(arg)
        for _ in range(iters):
            y = adj(apply(x))
            ny = np.linalg.norm(y)
            if ny == 0:
                break
            x = y / ny
            nx = in_norm(x)
            if nx > 0:
                val = out_norm(apply(x)) / nx
                if val > best:
                    best, arg = val, x
    return best, arg


# ---------------------------------------------------------------------------
# spliced approximate inverse for a glued pair


@dataclass(eq=False)
class PairInverse:
    """Right inverse on the matched space ``{(xi0, xi1): xi0(0) = xi1(0)}``.

    ``D0`` and ``D1`` are the operators on the two sphere domains (the second
    in the coordinate ``r^2 / z``).  The matching is imposed by substituting
    the first left-ring node of ``xi1`` so that both left-ring means agree.
    """

    D0: LinearOperatorHandle
    D1: LinearOperatorHandle
    S: sp.csr_matrix
    Q: LinearOperatorHandle
    handle: LinearOperatorHandle

    def solve(self, eta0: np.ndarray, eta1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        full = self.S @ self.Q(np.concatenate([eta0, eta1]))
        n0 = self.D0.domain_dim
        return full[:n0], full[n0:]


def matching_substitution(n0: int, n1: int, md: int, m: int, d: int, mean0: sp.spmatrix) -> sp.csr_matrix:
    """Map reduced unknowns to ``(xi0, xi1)`` with ``mean(xi1 left ring) = mean0 @ xi0``.

    Reduced unknowns are ``xi0`` followed by ``xi1`` without its ``d`` entries at
    left-ring angle 0.
    """
    n1r = n1 - d
    rows, cols, vals = [], [], []
    rows += list(range(n0))
    cols += list(range(n0))
    vals += [1.0] * n0
    # xi1 entries other than (level 0, angle 0)
    for t in range(n1r):
        rows.append(n0 + d + t)
        cols.append(n0 + t)
        vals.append(1.0)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n0 + n1, n0 + n1r)).tolil()
    # xi1[0, 0, c] = m * mean0[c] @ xi0 - sum_{j >= 1} xi1[0, j, c]
    mean0 = sp.csr_matrix(mean0)
    for c in range(d):
        row = n0 + c
        r0 = mean0.getrow(c)
        for k, v in zip(r0.indices, r0.data):
            S[row, k] = m * v
        for j in range(1, m):
            S[row, n0 + (j * d + c) - d] = -1.0
    return S.tocsr()


def pair_right_inverse(
    D0: LinearOperatorHandle, D1: LinearOperatorHandle, reg: float = 1e-10, tol: float = 1e-6
) -> PairInverse:
    """Right inverse of ``D0 (+) D1`` on the matched pair space."""
    L0, m, d = D0.meta["shape"]
    md = m * d
    mean0 = sp.hstack([sp.csr_matrix(mode_mean_rows(m, d)), sp.csr_matrix((d, D0.domain_dim - md))])
    S = matching_substitution(D0.domain_dim, D1.domain_dim, md, m, d, mean0)
    A = (sp.block_diag([D0.matrix, D1.matrix]) @ S).tocsr()
    h = LinearOperatorHandle(
        apply=lambda x: A @ x, domain_dim=A.shape[1], codomain_dim=A.shape[0], matrix=A, meta={"S": S}
    )
    Q = right_inverse_direct(h, reg=reg, tol=tol)
    return PairInverse(D0, D1, S, Q, h)


def _level_map(dom_from: DiscreteDomain, sigmas: np.ndarray) -> np.ndarray:
    """Indices of ``sigmas`` among ``dom_from`` levels (-1 where absent)."""
    idx = np.rint((sigmas - dom_from.sigma[0]) / dom_from.h).astype(int)
    ok = (idx >= 0) & (idx < dom_from.L)
    ok &= np.abs(dom_from.sigma[np.clip(idx, 0, dom_from.L - 1)] - sigmas) < 1e-8
    return np.where(ok, idx, -1)


def splice_inverse(
    Q_pair: PairInverse,
    u_r: CurveSamples,
    cfg: Any,
    D: LinearOperatorHandle | None = None,
    splice_delta: float = 0.5,
    J: AlmostComplexStructure | None = None,
) -> LinearOperatorHandle:
    """Spliced approximate right inverse ``T`` of ``D_{u^r}``.

    ``eta`` is cut along ``|z| = r`` (the ring on the cut is shared half and
    half), the outer piece is solved on the first sphere and the inner piece,
    pulled back by ``z -> r^2 / z``, on the second; the two solutions are
    blended with the splice cutoff around their common value at the node.
    """
    from .cutoff import splice_cutoff

    r = cfg.r
    L = math.log(r)
    dom = u_r.domain
    D = D if D is not None else assemble_Du(u_r, J if J is not None else Q_pair.D0.meta["J"])
    J = D.meta["J"]
    Lg, m, d = D.meta["shape"]
    # the structure must be constant on the splice annulus r^{1+delta} <= |z| <= r
    band = dom.levels_between((1 + splice_delta) * L, L)
    j0 = standard_matrix(J.dim_half)
    pts = u_r.values[band]
    if np.abs(J.eval(pts) - j0).max() > 1e-12 or np.abs(J.jac(pts)).max() > 1e-12:
        raise ValueError("J is not flat on the splice annulus; flatten it near the gluing point first")

    D0, D1 = Q_pair.D0, Q_pair.D1
    dom0, dom1 = D0.meta["curve"].domain, D1.meta["curve"].domain
    # where each sphere-domain level sits on the glued domain
    g_of_0 = _level_map(dom, dom0.sigma)
    g_of_1 = _level_map(dom, 2 * L - dom1.sigma)
    w0 = np.where(dom0.sigma > L + 1e-9, 1.0, np.where(np.abs(dom0.sigma - L) <= 1e-9, 0.5, 0.0))
    w1 = np.where(dom1.sigma > L + 1e-9, 1.0, np.where(np.abs(dom1.sigma - L) <= 1e-9, 0.5, 0.0))
    if np.any((w0 > 0) & (g_of_0 < 0)) or np.any((w1 > 0) & (g_of_1 < 0)):
        raise ValueError("sphere domains are not aligned with the glued grid")
    flip = (-np.arange(m)) % m
    cut = splice_cutoff(r, splice_delta)
    beta0 = cut.of_sigma(dom.sigma)
    beta1 = cut.of_sigma(2 * L - dom.sigma)
    # glued levels seen from each sphere domain
    i0 = _level_map(dom0, dom.sigma)
    i1 = _level_map(dom1, 2 * L - dom.sigma)
    if np.any((beta0 > 0) & (i0 < 0)) or np.any((beta1 > 0) & (i1 < 0)):
        raise ValueError("sphere domains do not cover the splice supports")

    def pieces(eta_vec: np.ndarray):
        eta = D.to_field(eta_vec)
        e0 = np.zeros((dom0.L, m, d))
        sel = w0 > 0
        e0[sel] = w0[sel, None, None] * eta[g_of_0[sel]]
        e1 = np.zeros((dom1.L, m, d))
        sel = w1 > 0
        e1[sel] = -w1[sel, None, None] * eta[g_of_1[sel]][:, flip]
        x0, x1 = Q_pair.solve(D0.project(e0), D1.project(e1))
        return x0.reshape(dom0.L, m, d), x1.reshape(dom1.L, m, d)

    def apply(eta_vec: np.ndarray) -> np.ndarray:
        x0, x1 = pieces(eta_vec)
        xm = x0[0].mean(axis=0)
        out = np.broadcast_to(xm, (Lg, m, d)).copy()
        sel = beta0 > 0
        out[sel] += beta0[sel, None, None] * (x0[i0[sel]] - xm)
        sel = beta1 > 0
        out[sel] += beta1[sel, None, None] * (x1[i1[sel]][:, flip] - xm)
        return out.ravel()

    meta = {"pieces": pieces, "beta0": beta0, "beta1": beta1, "cut": cut, "forward": D, "pair": Q_pair}
    return LinearOperatorHandle(
        apply=apply,
        domain_dim=D.codomain_dim,
        codomain_dim=D.domain_dim,
        norm_context=(D.norm_context[1], D.norm_context[0]),
        meta=meta,
    )


def splice_error_field(T: LinearOperatorHandle, eta_vec: np.ndarray) -> np.ndarray:
    """``(xi0 - xi_m) beta0_sigma + (xi1 - xi_m) beta1_sigma`` on the glued grid (cylinder form values)."""
    D = T.meta["forward"]
    dom = D.meta["curve"].domain
    Lg, m, d = D.meta["shape"]
    x0, x1 = T.meta["pieces"](eta_vec)
    D0 = T.meta["pair"].D0
    D1 = T.meta["pair"].D1
    L = math.log(T.meta["cut"].eps)
    i0 = _level_map(D0.meta["curve"].domain, dom.sigma)
    i1 = _level_map(D1.meta["curve"].domain, 2 * L - dom.sigma)
    flip = (-np.arange(m)) % m
    xm = x0[0].mean(axis=0)
    cut = T.meta["cut"]
    db0 = cut.dsigma(dom.sigma)
    db1 = -cut.dsigma(2 * L - dom.sigma)
    out = np.zeros((Lg, m, d))
    sel = db0 != 0
    out[sel] += db0[sel, None, None] * (x0[i0[sel]] - xm)
    sel = db1 != 0
    out[sel] += db1[sel, None, None] * (x1[i1[sel]][:, flip] - xm)
    return out


# ---------------------------------------------------------------------------
# Neumann series


def defect_norm_estimate(
    T: LinearOperatorHandle,
    D: LinearOperatorHandle,
    p: float = 2.5,
    probes: int = 200,
    seed: int = 0,
    centers: Sequence[float] = (),
    power_iters: int = 8,
) -> tuple[float, np.ndarray]:
    """Probe estimate of ``|D T - I|`` on forms in ``L^p`` (with the domain's metric).

    Half the probes are smooth, half are localized (around ``centers`` when
    given); the best probe is then refined by power iteration of ``D T - I``.
    """
    rng = np.random.default_rng(seed)
    spec = NormSpec(p=p, flavor="Lp")

    def defect(v):
        return D(T(v)) - v

    inputs = []
    for t in range(probes):
        kind = "smooth" if t % 2 == 0 else "local"
        c = centers[(t // 2) % len(centers)] if (centers and kind == "local") else None
        inputs.append(D.project(random_form_probe(D, rng, kind, c)))

    def nrm(v):
        return form_norm(D, v, spec)

    best, arg = probe_operator_norm(defect, inputs, nrm, nrm)
    x = arg
    for _ in range(power_iters if arg is not None else 0):
        y = defect(x)
        ny = nrm(y)
        if ny == 0:
            break
        x = y / ny
        val = nrm(defect(x))
        if val > best:
            best, arg = val, x
    return best, arg


def neumann_invert(
    T: LinearOperatorHandle,
    D: LinearOperatorHandle,
    kmax: int = 60,
    tol: float = 1e-10,
    contraction: float | None = None,
    p: float = 2.5,
    probes: int = 40,
) -> LinearOperatorHandle:
    """``Q = T sum_k (I - D T)^k``, truncated once the remainder falls below ``tol``."""
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    if contraction is None:
        contraction, _ = defect_norm_estimate(T, D, p=p, probes=probes)
    if contraction >= 1:
        raise ContractionError(f"|DT - I| ~ {contraction:.3f} >= 1: Neumann series does not contract")
    history: list[list[float]] = []

    def apply(eta: np.ndarray) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        acc = np.zeros_like(eta)
        x = eta.copy()
        n0 = np.linalg.norm(eta)
        hist = []
        for _ in range(kmax):
            acc += x
            x = x - D(T(x))
            rel = np.linalg.norm(x) / n0 if n0 > 0 else 0.0
            hist.append(rel)
            if rel <= tol:
                break
        history.append(hist)
        return T(acc)

    return LinearOperatorHandle(
        apply=apply,
        domain_dim=T.domain_dim,
        codomain_dim=T.codomain_dim,
        norm_context=T.norm_context,
        meta={"contraction": contraction, "history": history, "T": T, "forward": D},
    )


# ---------------------------------------------------------------------------
# chains of sphere problems


def ring_mode_rows(m: int, n: int, k: int, sigma: float) -> np.ndarray:
    """Rows giving ``c_k = xi_hat_k e^{-k sigma}`` per complex component, as ``(2n, m 2n)`` real rows.

    Row layout: the real parts of all components, then the imaginary parts.
    """
    P = ring_fourier_rows(m, n, [[k]] * n) * (math.sqrt(m) / m) * math.exp(-k * sigma)
    re = P[0::2]
    im = P[1::2]
    return np.vstack([re, im])


def line_infinity_rows(m: int, sigma_right: float) -> np.ndarray:
    """Value at ``z = infinity`` in the next chart of a tangent field along a projective line.

    With ``xi = (p, q)`` in chart ``i`` (``p`` tangent, ``q`` normal), the field in
    chart ``i+1`` at infinity is ``(q_1, -p_2)`` where ``p_2, q_1`` are the top
    polynomial coefficients, read off the right ring.
    """
    n = 2
    d = 4
    p2 = ring_mode_rows(m, n, 2, sigma_right)  # rows: Re p, Re q, Im p, Im q
    q1 = ring_mode_rows(m, n, 1, sigma_right)
    out = np.zeros((d, m * d))
    out[0] = q1[1]  # Re of first component in next chart
    out[1] = -p2[0]
    out[2] = q1[3]
    out[3] = -p2[2]
    return out


@dataclass(eq=False)
class ChainOperator:
    handle: LinearOperatorHandle
    blocks: list[LinearOperatorHandle]
    S: sp.csr_matrix
    unconstrained_dim: int
    matched_dim: int


def chain_operator(
    blocks: Sequence[LinearOperatorHandle],
    infinity_rows: Sequence[np.ndarray],
    cyclic: bool = True,
) -> ChainOperator:
    """Block operator on the matched space ``xi^i(infinity) = xi^{i+1}(0)``.

    ``infinity_rows[i]`` is a ``(d, m d)`` matrix reading ``xi^i(infinity)`` (in
    the chart of curve ``i+1``) off the right ring of block ``i``; ``xi(0)`` is
    the mean of the left ring.  Each matching removes the ``d`` unknowns at
    angle 0 of the left ring of block ``i+1``.
    """
    nb = len(blocks)
    dims = [b.domain_dim for b in blocks]
    offs = np.concatenate([[0], np.cumsum(dims)])
    _, m, d = blocks[0].meta["shape"]
    md = m * d
    n_match = nb if cyclic else nb - 1
    matched = set((i + 1) % nb for i in range(n_match))
    # reduced index for each full unknown (-1 if eliminated)
    red = -np.ones(offs[-1], dtype=int)
    cnt = 0
    for b in range(nb):
        for t in range(dims[b]):
            if b in matched and t < d:
                continue
            red[offs[b] + t] = cnt
            cnt += 1
    S = sp.lil_matrix((offs[-1], cnt))
    for g in range(offs[-1]):
        if red[g] >= 0:
            S[g, red[g]] = 1.0
    for i in range(n_match):
        j = (i + 1) % nb
        rows_inf = infinity_rows[i]
        right0 = offs[i] + dims[i] - md
        for c in range(d):
            g = offs[j] + c
            for t in np.nonzero(rows_inf[c])[0]:
                src = red[right0 + t]
                if src < 0:
                    raise ValueError("matching constraints are inconsistent (cyclic dependence)")
                S[g, src] += m * rows_inf[c, t]
            for a in range(1, m):
                S[g, red[offs[j] + a * d + c]] += -1.0
    S = S.tocsr()
    A = (sp.block_diag([b.matrix for b in blocks]) @ S).tocsr()
    handle = LinearOperatorHandle(
        apply=lambda x: A @ x,
        domain_dim=A.shape[1],
        codomain_dim=A.shape[0],
        matrix=A,
        meta={"S": S, "blocks": list(blocks)},
    )
    return ChainOperator(handle, list(blocks), S, int(offs[-1]), int(cnt))


def operator_distance(
    D1: LinearOperatorHandle, D2: LinearOperatorHandle, p: float = 2.5, probes: int = 50, seed: int = 0
) -> float:
    """Probe estimate of ``|D1 - D2|`` from ``W^{1,p}`` to ``L^p`` (same grid and row layout)."""
    rng = np.random.default_rng(seed)
    L, m, d = D1.meta["shape"]
    spec_in = NormSpec(p=p, flavor="W1p")
    spec_out = NormSpec(p=p, flavor="Lp")
    best = 0.0
    for t in range(probes):
        kind = "smooth" if t % 2 == 0 else "local"
        xi = random_form_probe(D1, rng, kind).ravel()
        nx = field_norm(D1, xi, spec_in)
        diff = D1(xi) - D2(xi)
        best = max(best, form_norm(D1, diff, spec_out) / nx)
    return best


def finite_difference_check(
    D: LinearOperatorHandle,
    u: CurveSamples,
    steps: Sequence[float] = (1e-3, 5e-4, 2.5e-4),
    probes: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Relative errors ``|D xi - (F(u + h xi) - F(u)) / h| / |D xi|`` on the ODE rows.

    ``F`` is the Cauchy-Riemann residual in the row layout of ``D``; the
    result has shape ``(probes, len(steps))``.  Probes are smooth random
    fields supported away from the domain ends.
    """
    rng = np.random.default_rng(seed)
    n_ode = D.meta["n_ode"]
    J = D.meta["J"]
    base = u.with_values(u.values)
    f0 = D.project(dbar_residual(base, J).values)[:n_ode]
    sig = u.domain.sigma
    out = np.zeros((probes, len(steps)))
    for t in range(probes):
        xi = random_form_probe(D, rng, "smooth", center=rng.uniform(sig[0] + 0.3 * (sig[-1] - sig[0]), sig[-1] - 0.3 * (sig[-1] - sig[0])))
        xi /= np.abs(xi).max()
        xi = xi.ravel()
        lin = (D.matrix @ xi)[:n_ode]
        scale = np.linalg.norm(lin)
        for s, h in enumerate(steps):
            f1 = D.project(dbar_residual(base.add(h * xi), J).values)[:n_ode]
            out[t, s] = np.linalg.norm(lin - (f1 - f0) / h) / scale
    return out
