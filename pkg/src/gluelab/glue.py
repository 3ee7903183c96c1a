"""Approximate solutions: glued pairs, intermediate curves and glued chains.

With ``t = log|z|`` and ``L = log r`` the pair glue is

    u^r = beta(2L - t) u0(z) + beta(t) u1(r^2 / z),

where ``beta`` is the log-linear cutoff equal to 1 for ``t <= alpha L`` and 0
for ``t >= gamma' L``.  The five regions (inner, inner transition, middle,
outer transition, outer) are cut at ``(2 - gamma') L, (2 - alpha) L, alpha L,
gamma' L``.  Here ``gamma' = 2 alpha - gamma`` is the outer exponent; the
configured ``gamma`` is kept as the exponent ``2 - gamma'`` of the inner
transition ring mirrored through ``|z| = r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .curves import CurveSamples
from .domain import DiscreteDomain, build_glued_cylinder
from .targets import ProjectivePlane, to_real


@dataclass(frozen=True)
class GlueConfig:
    alpha: float = 2.0 / 3.0
    gamma: float = 5.0 / 6.0
    r: float = 2.0**-5
    p: float = 2.5
    eps_target: float = 0.05
    r_max: float = 0.125

    def __post_init__(self) -> None:
        if not 0 < self.alpha < self.gamma < 1:
            raise ValueError("need 0 < alpha < gamma < 1")
        if not 2 < self.p < 4:
            raise ValueError("p must lie in (2, 4)")
        lo, hi = self.p / (self.p + 2), self.p / (2 * self.p - 2)
        if not lo < self.alpha < hi:
            raise ValueError(f"alpha must lie in ({lo:.4f}, {hi:.4f}) for p = {self.p}")
        if not 0 < self.eps_target < self.eps_bound:
            raise ValueError(f"eps_target must lie in (0, {self.eps_bound:.4f})")
        if self.gamma_out <= 0:
            raise ValueError("2 alpha - gamma must be positive")
        if not 0 < self.r:
            raise ValueError("r must be positive")
        if self.r > self.r_max:
            raise ValueError(f"r = {self.r} exceeds r_max = {self.r_max}")

    @property
    def eps_bound(self) -> float:
        a, p = self.alpha, self.p
        return min(a * (1 + 2 / p) - 1, 1 - a * (2 - 2 / p), 1.0 / 3.0)

    @property
    def gamma_out(self) -> float:
        """Exponent of the outer edge of the transition ring."""
        return 2 * self.alpha - self.gamma

    @property
    def L(self) -> float:
        return math.log(self.r)

    def smallness_radius(self) -> float:
        """Largest ``r`` with ``|ln r^(gamma - alpha)| >= 1``."""
        return math.exp(-1.0 / (self.gamma - self.alpha))

    def with_r(self, r: float) -> "GlueConfig":
        return GlueConfig(self.alpha, self.gamma, r, self.p, self.eps_target, self.r_max)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "r": self.r,
            "p": self.p,
            "eps_target": self.eps_target,
            "r_max": self.r_max,
        }


def neck_cutoff(cfg: GlueConfig, t: Any, L: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``beta(t)`` and ``d beta / dt`` (half slope on the kinks) for ``t = log|z|``."""
    L = cfg.L if L is None else L
    t = np.asarray(t, dtype=float)
    a, g = cfg.alpha * L, cfg.gamma_out * L
    width = g - a
    b = np.clip((g - t) / width, 0.0, 1.0)
    tol = 1e-9
    db = np.where((t > a + tol) & (t < g - tol), -1.0 / width, 0.0)
    db = np.where((np.abs(t - a) <= tol) | (np.abs(t - g) <= tol), -0.5 / width, db)
    return b, db


REGIONS = ("inner", "inner_transition", "middle", "outer_transition", "outer")


def region_labels(sigma: Any, cfg: GlueConfig) -> np.ndarray:
    """Region index (into ``REGIONS``) of each ``sigma``; every node gets exactly one."""
    L = cfg.L
    s = np.asarray(sigma, dtype=float)
    cuts = np.array([(2 - cfg.gamma_out) * L, (2 - cfg.alpha) * L, cfg.alpha * L, cfg.gamma_out * L])
    tol = 1e-9
    return np.searchsorted(cuts + tol, s, side="left").astype(int)


# ---------------------------------------------------------------------------
# sampled inputs on lattice domains


def _lookup(u: CurveSamples, sigmas: np.ndarray, needed: np.ndarray) -> np.ndarray:
    dom = u.domain
    idx = np.rint((sigmas - dom.sigma[0]) / dom.h).astype(int)
    ok = (idx >= 0) & (idx < dom.L)
    ok &= np.abs(dom.sigma[np.clip(idx, 0, dom.L - 1)] - sigmas) < 1e-8
    if np.any(needed & ~ok):
        raise ValueError("input curve is not sampled on all levels the glue formula needs")
    return np.where(ok, idx, 0)


def _check_origin(u: CurveSamples, tol: float = 1e-6) -> None:
    scale = max(1.0, float(np.abs(u.values).max()))
    if np.abs(u.values[0].mean(axis=0)).max() > tol * scale:
        raise ValueError("input curves must pass through the chart origin at z = 0")


def _blend(
    u0: CurveSamples, u1: CurveSamples, cfg: GlueConfig, domain: DiscreteDomain, w0: np.ndarray, w1: np.ndarray,
    dw0: np.ndarray, dw1: np.ndarray,
) -> CurveSamples:
    """``w0(t) u0(z) + w1(t) u1(r^2/z)`` with exact derivatives from the inputs."""
    if domain.m != u0.domain.m or domain.m != u1.domain.m:
        raise ValueError("angular resolutions differ")
    L = cfg.L
    sig = domain.sigma
    i0 = _lookup(u0, sig, w0 != 0)
    i1 = _lookup(u1, 2 * L - sig, w1 != 0)
    m = domain.m
    flip = (-np.arange(m)) % m
    v0, d0 = u0.values[i0], u0.derivs[i0]
    v1, d1 = u1.values[i1][:, flip], u1.derivs[i1][:, flip]
    # z -> r^2 / z reverses both sigma and theta
    d1 = -d1
    W0, W1 = w0[:, None, None], w1[:, None, None]
    vals = W0 * v0 + W1 * v1
    ds = W0 * d0[:, :, 0] + dw0[:, None, None] * v0 + W1 * d1[:, :, 0] + dw1[:, None, None] * v1
    dt = W0 * d0[:, :, 1] + W1 * d1[:, :, 1]
    derivs = np.stack([ds, dt], axis=2)
    meta = {"glue": cfg.to_json()}
    return CurveSamples(domain, vals, derivs, target=u0.target, meta=meta)


def build_pair_glue(u0: CurveSamples, u1: CurveSamples, cfg: GlueConfig, domain: DiscreteDomain) -> CurveSamples:
    """The glued curve ``u^r`` sampled on ``domain`` (a lattice sphere chart).

    ``u0`` must be sampled on every level ``sigma >= (2 - gamma') L`` of the
    domain and ``u1`` on the mirrored levels ``2L - sigma`` with
    ``sigma <= gamma' L``.
    """
    _check_origin(u0)
    _check_origin(u1)
    L = cfg.L
    t = domain.sigma
    b0, db0 = neck_cutoff(cfg, 2 * L - t)
    b1, db1 = neck_cutoff(cfg, t)
    return _blend(u0, u1, cfg, domain, b0, b1, -db0, db1)


def build_intermediate(u0: CurveSamples, u1: CurveSamples, cfg: GlueConfig, which: int = 0) -> CurveSamples:
    """``u^{0,r}`` (``which=0``) or ``u^{infinity,r}`` (``which=1``).

    ``u^{0,r} = u0 + beta(2L - t) beta(t) u1(r^2/z)`` lives on the domain of
    ``u0``; ``u^{infinity,r}`` is the mirror image on the domain of ``u1``.
    """
    if which not in (0, 1):
        raise ValueError("which must be 0 or 1")
    _check_origin(u0)
    _check_origin(u1)
    base, other = (u0, u1) if which == 0 else (u1, u0)
    domain = base.domain
    L = cfg.L
    t = domain.sigma
    b0, db0 = neck_cutoff(cfg, 2 * L - t)
    b1, db1 = neck_cutoff(cfg, t)
    w = b0 * b1
    dw = -db0 * b1 + b0 * db1
    return _blend(base, other, cfg, domain, np.ones_like(t), w, np.zeros_like(t), dw)


# ---------------------------------------------------------------------------
# chains in CP^2


@dataclass(frozen=True, eq=False)
class ChartCurve:
    """A rational curve ``z -> [X(z)]`` in ``CP^2`` with ``X`` homogeneous coordinates."""

    homogeneous: Callable[[np.ndarray], np.ndarray]
    at_infinity: np.ndarray
    label: str = ""

    def value(self, z: Any, chart: int) -> np.ndarray:
        return ProjectivePlane.from_homogeneous(self.homogeneous(np.asarray(z, dtype=complex)), chart)

    def point(self, where: str, chart: int) -> np.ndarray:
        big = self.homogeneous(np.zeros(1, dtype=complex))[0] if where == "zero" else np.asarray(self.at_infinity)
        return ProjectivePlane.from_homogeneous(big, chart)


def projective_line(i: int) -> ChartCurve:
    """``z -> [V_i + z V_{i+1}]`` (indices mod 3)."""

    def hom(z):
        out = np.zeros(np.shape(z) + (3,), dtype=complex)
        out[..., i % 3] = 1.0
        out[..., (i + 1) % 3] = z
        return out

    inf = np.zeros(3, dtype=complex)
    inf[(i + 1) % 3] = 1.0
    return ChartCurve(hom, inf, f"line{i % 3}")


@dataclass(frozen=True)
class PolynomialField:
    """Vector field ``X(z) = sum_k c_k z^k`` in the 0-chart of a curve; ``coeffs`` is ``(deg + 1, n)`` complex."""

    coeffs: np.ndarray

    def __call__(self, z: Any) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        out = np.zeros(z.shape + (self.coeffs.shape[1],), dtype=complex)
        for k, c in enumerate(self.coeffs):
            out += z[..., None] ** k * c
        return out


def _curve_value(
    curve: ChartCurve, z: np.ndarray, chart: int, own: int, X: PolynomialField | None, weight: Any = 1.0
) -> np.ndarray:
    """Value of ``curve`` (0-chart ``own``) in ``chart``, displaced by ``weight * X`` along chart addition."""
    base = curve.value(z, chart)
    if X is None:
        return base
    xz = to_real(X(z)) * np.asarray(weight, dtype=float)[..., None, None] if np.ndim(weight) else to_real(X(z)) * weight
    if chart % 3 == own % 3:
        return base + xz
    jac = ProjectivePlane().jacobian(curve.value(z, own), own, chart)
    return base + np.einsum("...ab,...b->...a", jac, xz)


def build_chain_glue(
    chain: Sequence[ChartCurve],
    radii: Sequence[float],
    cfg: GlueConfig,
    deformations: dict[int, PolynomialField] | None = None,
    free_index: int | None = None,
    periods: int = 2,
    per_octave: int = 6,
    m: int = 16,
    mark: tuple[float, int] | None = None,
    tol: float = 1e-9,
) -> CurveSamples:
    """Approximate solution on the glued cylinder of a cyclic chain in ``CP^2``.

    Curve ``i`` is expressed in chart ``i`` on the left half of its segment
    (``|z| < 1``) and in chart ``i+1`` on the right half.  The neck between
    curves ``i-1`` and ``i`` uses the glue formula with ``r = radii[i]`` and
    ``zeta = z_i = r^2 z_{i-1}``.  ``deformations[k]`` displaces the copy of
    curve ``free_index`` in period ``k``; the displacement is switched off
    towards both necks with ``1 - beta`` (the neck cutoff), so that near the
    intersection points the deformed curve is the undeformed one.
    ``mark = (sigma_*, angle index)`` records the nodes ``z_{k;*}`` on the
    free segments.
    """
    N = len(chain)
    if len(radii) != N:
        raise ValueError("need one radius per curve")
    for i in range(N):
        with np.errstate(divide="ignore", invalid="ignore"):
            a = chain[i].point("infinity", i + 1)
            b = chain[(i + 1) % N].point("zero", i + 1)
        # a point off the chart comes back as inf/nan and must count as a mismatch
        if not np.all(np.abs(a - b) <= tol):
            raise ValueError(f"curve {i} at infinity does not meet curve {(i + 1) % N} at zero")
    deformations = dict(deformations or {})
    if deformations and free_index is None:
        raise ValueError("deformations need a free curve index")
    for k in deformations:
        if not 0 <= k < periods:
            raise ValueError(f"deformation supplied for period {k} outside 0..{periods - 1}")
    dom = build_glued_cylinder(N, periods, radii, per_octave=per_octave, m=m)
    nseg = N * periods
    theta = dom.theta
    L, M = dom.L, dom.m
    values = np.zeros((L, M, 4))
    charts = np.zeros(L, dtype=int)

    def field_for(seg: int) -> PolynomialField | None:
        seg %= nseg
        if free_index is not None and seg % N == free_index % N:
            return deformations.get(seg // N)
        return None

    for s in range(nseg):
        i = s % N
        lev = np.nonzero(dom.segment == s)[0]
        sig = dom.local_sigma[lev]
        z = np.exp(sig)[:, None] * np.exp(1j * theta)[None, :]
        left = sig < 0
        right = ~left
        if left.any():
            c = i
            rr = radii[i]
            cl = cfg.with_r(rr)
            beta, _ = neck_cutoff(cl, sig[left])
            zl = z[left]
            v = _curve_value(chain[i], zl, c, i, field_for(s), 1.0 - beta)
            prev = (i - 1) % N
            vp = _curve_value(chain[prev], zl / rr**2, c, prev, None)
            values[lev[left]] = v + beta[:, None, None] * vp
            charts[lev[left]] = c % 3
        if right.any():
            c = i + 1
            rr = radii[(i + 1) % N]
            cl = cfg.with_r(rr)
            beta, _ = neck_cutoff(cl, -sig[right])
            zr = z[right]
            v = _curve_value(chain[i], zr, c, i, field_for(s), 1.0 - beta)
            nxt = (i + 1) % N
            vn = _curve_value(chain[nxt], rr**2 * zr, c, nxt, None)
            values[lev[right]] = v + beta[:, None, None] * vn
            charts[lev[right]] = c % 3

    marks, targets = [], []
    if mark is not None and free_index is not None:
        sig_star, j_star = mark
        for k in range(periods):
            s = free_index % N + N * k
            lev = np.nonzero((dom.segment == s) & (np.abs(dom.local_sigma - sig_star) < 1e-9))[0]
            if len(lev) != 1:
                raise ValueError("marked point is not a node of the free segment")
            l = int(lev[0])
            marks.append((l, int(j_star)))
            zs = np.exp(sig_star + 1j * theta[j_star])
            own_r = radii[free_index % N] if sig_star < 0 else radii[(free_index + 1) % N]
            chi = 1.0 - float(neck_cutoff(cfg.with_r(own_r), np.array([-abs(sig_star)]))[0][0])
            tgt = _curve_value(chain[free_index % N], np.array([zs]), int(charts[l]), free_index, field_for(s), chi)[0]
            targets.append(tgt)
    meta = {
        "glue": cfg.to_json(),
        "radii": [float(x) for x in radii],
        "marks": marks,
        "mark_targets": [t.tolist() for t in targets],
        "free_index": free_index,
        "periods": periods,
    }
    return CurveSamples.from_values(dom, values, charts, ProjectivePlane(), meta)


def reference_chain(
    chain: Sequence[ChartCurve], domain: DiscreteDomain, charts: np.ndarray
) -> np.ndarray:
    """Values of the unglued input curves on every segment of a glued cylinder (segment charts)."""
    N = len(chain)
    out = np.zeros((domain.L, domain.m, 4))
    z = np.exp(domain.local_sigma)[:, None] * np.exp(1j * domain.theta)[None, :]
    for l in range(domain.L):
        i = int(domain.segment[l]) % N
        out[l] = chain[i].value(z[l], int(charts[l]))
    return out


def kernel_field_from_coefficients(tangent: Sequence[complex], normal: Sequence[complex]) -> PolynomialField:
    """Polynomial field with tangent part ``sum p_k z^k`` and normal part ``sum q_k z^k``."""
    deg = max(len(tangent), len(normal))
    c = np.zeros((deg, 2), dtype=complex)
    c[: len(tangent), 0] = tangent
    c[: len(normal), 1] = normal
    return PolynomialField(c)
