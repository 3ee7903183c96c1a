"""Sampled curves, the Cauchy-Riemann residual and image metrics."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.spatial import cKDTree

from .acs import AlmostComplexStructure
from .domain import DiscreteDomain, split_by_mode_sign
from .targets import FlatTarget, to_complex, to_real


@dataclass(frozen=True, eq=False)
class CurveSamples:
    """A map from a domain into ``R^{2n}`` with derivatives ``(u_sigma, u_theta)``.

    ``charts`` (one entry per level) records in which target chart each ring
    is expressed; ``None`` means a single chart.
    """

    domain: DiscreteDomain
    values: np.ndarray
    derivs: np.ndarray
    charts: np.ndarray | None = None
    target: Any = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def u_sigma(self) -> np.ndarray:
        return self.derivs[:, :, 0]

    @property
    def u_theta(self) -> np.ndarray:
        return self.derivs[:, :, 1]

    def chart_of_level(self, level: int) -> int:
        return 0 if self.charts is None else int(self.charts[level])

    @classmethod
    def from_values(
        cls,
        domain: DiscreteDomain,
        values: np.ndarray,
        charts: np.ndarray | None = None,
        target: Any = None,
        meta: dict | None = None,
    ) -> "CurveSamples":
        """Build from node values, differentiating numerically (chart-aware)."""
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != domain.shape:
            raise ValueError("values do not match the domain grid")
        derivs = differentiate_charted(domain, values, charts, target)
        return cls(domain, values, derivs, charts, target, dict(meta or {}))

    def with_values(self, values: np.ndarray) -> "CurveSamples":
        return CurveSamples.from_values(self.domain, values, self.charts, self.target, self.meta)

    def add(self, xi: np.ndarray) -> "CurveSamples":
        """Chart addition ``u + xi``."""
        return self.with_values(self.values + np.asarray(xi).reshape(self.values.shape))

    def embedded(self) -> np.ndarray:
        """Node values mapped to a common ambient space (identity for one chart)."""
        if self.charts is None or self.target is None or not hasattr(self.target, "embed"):
            return self.values
        out = [self.target.embed(self.values[l], int(self.charts[l])) for l in range(self.domain.L)]
        return np.stack(out)

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "values": self.values.tolist(),
            "derivs": self.derivs.tolist(),
            "charts": None if self.charts is None else self.charts.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez_compressed(
            buf,
            domain=np.array(self.domain.domain_id()),
            values=self.values,
            derivs=self.derivs,
            charts=np.array([]) if self.charts is None else self.charts,
        )
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class FormSamples:
    """A (0,1)-form stored as ``w = alpha(d/d sigma)`` at every node."""

    domain: DiscreteDomain
    values: np.ndarray
    charts: np.ndarray | None = None
    is_form: bool = True

    def flat_representation(self, j_at_u: np.ndarray | None = None) -> np.ndarray:
        """``alpha(d/ds)`` in flat coordinates ``z = s + it``.

        Since ``alpha(d/d theta) = -J alpha(d/d sigma)``, this is
        ``rho^-1 (cos theta + sin theta J) w``; ``j_at_u`` defaults to ``J0``.
        """
        z = self.domain.z()
        rho = np.abs(z)[..., None]
        th = np.angle(z)[..., None]
        w = self.values
        if j_at_u is None:
            n = w.shape[-1] // 2
            jw = np.concatenate([-w[..., n:], w[..., :n]], axis=-1)
        else:
            jw = np.einsum("...ab,...b->...a", j_at_u, w)
        return (np.cos(th) * w + np.sin(th) * jw) / rho


# ---------------------------------------------------------------------------
# sampling helpers


def differentiate_charted(
    domain: DiscreteDomain, values: np.ndarray, charts: np.ndarray | None = None, target: Any = None
) -> np.ndarray:
    """``(u_sigma, u_theta)`` with stencil neighbours converted into the centre ring's chart."""
    d_theta = domain.d_theta(values)
    if charts is None or target is None or np.all(charts == charts[0]):
        d_sigma = domain.d_sigma(values)
        return np.stack([d_sigma, d_theta], axis=2)
    back, fwd = domain.one_sided_matrices()
    acc = []
    for mat in (back, fwd):
        out = np.zeros_like(values)
        for l in range(domain.L):
            row = mat.getrow(l)
            c = int(charts[l])
            for k, coef in zip(row.indices, row.data):
                v = values[k]
                if int(charts[k]) != c:
                    v = target.transition(v, int(charts[k]), c)
                out[l] += coef * v
        acc.append(out)
    d_sigma = split_by_mode_sign(acc[0], mirrored=domain.mirrored)[0] + split_by_mode_sign(acc[1], mirrored=domain.mirrored)[1]
    return np.stack([d_sigma, d_theta], axis=2)


def laurent_curve(domain: DiscreteDomain, terms: dict[int, Any]) -> CurveSamples:
    """``u(z) = sum_k a_k z^k`` with ``a_k`` in ``C^n``, with exact derivatives."""
    z = domain.z()
    n = len(np.atleast_1d(next(iter(terms.values()))))
    val = np.zeros(z.shape + (n,), dtype=complex)
    dsig = np.zeros_like(val)
    for k, a in terms.items():
        a = np.asarray(a, dtype=complex).reshape(n)
        zk = z**k
        val += zk[..., None] * a
        dsig += k * zk[..., None] * a
    derivs = np.stack([to_real(dsig), to_real(1j * dsig)], axis=2)
    return CurveSamples(domain, to_real(val), derivs, target=FlatTarget(n))


def curve_from_function(
    domain: DiscreteDomain,
    fn: Callable[[np.ndarray], np.ndarray],
    grad: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
) -> CurveSamples:
    """Sample ``fn(z)`` (real layout output); derivatives from ``grad`` or numerically."""
    z = domain.z()
    values = np.asarray(fn(z), dtype=float)
    if grad is None:
        return CurveSamples.from_values(domain, values)
    ds, dt = grad(z)
    return CurveSamples(domain, values, np.stack([ds, dt], axis=2))


# ---------------------------------------------------------------------------
# residual


def dbar_residual(u: CurveSamples, J: AlmostComplexStructure) -> FormSamples:
    """``du + J(u) du j`` evaluated on ``d/d sigma``: ``u_sigma + J(u) u_theta``."""
    if u.dim != J.dim:
        raise ValueError(f"curve in R^{u.dim} but structure on R^{J.dim}")
    jm = J.eval(u.values)
    w = u.u_sigma + np.einsum("lmab,lmb->lma", jm, u.u_theta)
    return FormSamples(u.domain, w, u.charts)


# ---------------------------------------------------------------------------
# tangents and local expansions


@dataclass(frozen=True)
class LinearFit:
    a: np.ndarray
    residual: float
    relative_residual: float
    nodes: int

    @property
    def flagged(self) -> bool:
        """True when the data are far from C-linear (relative residual above 10%)."""
        return self.relative_residual > 0.1


def extract_linear_coefficient(u: CurveSamples, center: complex, fit_radius: float) -> LinearFit:
    """Least-squares ``a`` in ``u(z) ~ (z - center) a`` over ``|z - center| <= fit_radius``."""
    zeta = (u.domain.z() - center).ravel()
    sel = np.abs(zeta) <= fit_radius * (1 + 1e-12)
    if sel.sum() < 3:
        raise ValueError("too few nodes inside the fit disc")
    zeta = zeta[sel]
    vals = to_complex(u.values.reshape(-1, u.dim))[sel]
    a = (np.conj(zeta) @ vals) / np.sum(np.abs(zeta) ** 2)
    resid = vals - zeta[:, None] * a
    res = float(np.sqrt(np.mean(np.sum(np.abs(resid) ** 2, axis=1))))
    scale = float(np.sqrt(np.mean(np.sum(np.abs(vals) ** 2, axis=1))))
    return LinearFit(to_real(a), res, res / scale if scale > 0 else 0.0, int(sel.sum()))


@dataclass(frozen=True)
class ExpansionReport:
    a0: np.ndarray
    a1: np.ndarray
    residual_sup: float
    annulus: tuple[float, float]
    offset: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "a0": self.a0.tolist(),
            "a1": self.a1.tolist(),
            "residual_sup": self.residual_sup,
            "annulus": list(self.annulus),
            "offset": None if self.offset is None else np.asarray(self.offset).tolist(),
        }


def neck_log_radius(domain: DiscreteDomain, neck: int) -> np.ndarray:
    """Log-radius of the neck coordinate ``zeta`` of a glued cylinder (NaN off the two segments).

    On segment ``neck`` it is the local coordinate; on segment ``neck - 1``
    it is ``sigma_{neck-1} + 2 log r_neck`` (``zeta = r^2 z_{neck-1}``).
    """
    g = domain.glue
    if g is None:
        return domain.sigma.copy()
    segs = g.segments
    i = neck % segs
    prev = (neck - 1) % segs
    two_l = 2 * math.log(g.radius(i))
    out = np.full(domain.L, np.nan)
    out[domain.segment == i] = domain.local_sigma[domain.segment == i]
    out[domain.segment == prev] = domain.local_sigma[domain.segment == prev] + two_l
    return out


def _neck_annulus(u: CurveSamples, r: float, neck: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Levels and ``zeta`` nodes of ``r^{4/3} <= |zeta| <= r^{2/3}``."""
    dom = u.domain
    log_r = math.log(r)
    lo, hi = 4.0 / 3.0 * log_r, 2.0 / 3.0 * log_r
    sig = neck_log_radius(dom, neck) if neck is not None else dom.sigma
    with np.errstate(invalid="ignore"):
        sel = (sig >= lo - 1e-9) & (sig <= hi + 1e-9)
        covered = np.nanmin(sig) <= lo + 0.5 * dom.h and np.nanmax(sig) >= hi - 0.5 * dom.h
    if not covered or not sel.any():
        raise ValueError("annulus r^{4/3} <= |z| <= r^{2/3} is not covered by the domain")
    idx = np.nonzero(sel)[0]
    if neck is not None and u.charts is not None and len(set(u.charts[idx].tolist())) > 1:
        raise ValueError("neck annulus spans several charts")
    return idx, np.exp(sig[idx][:, None] + 1j * dom.theta[None, :])


def expansion_check(
    u: CurveSamples,
    a0: Any,
    a1: Any,
    r: float,
    neck: int | None = None,
    offset: Any = None,
) -> ExpansionReport:
    """Sup over ``r^{4/3} <= |zeta| <= r^{2/3}`` of ``|u - offset - a0 zeta - a1 r^2 / zeta|``."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    idx, zeta = _neck_annulus(u, r, neck)
    model = zeta[..., None] * to_complex(a0) + (r * r / zeta)[..., None] * to_complex(a1)
    vals = to_complex(u.values[idx])
    if offset is not None:
        vals = vals - to_complex(np.asarray(offset, dtype=float))
    res = float(np.sqrt(np.sum(np.abs(vals - model) ** 2, axis=-1)).max())
    return ExpansionReport(a0, a1, res, (r ** (4.0 / 3.0), r ** (2.0 / 3.0)), offset)


def fit_expansion(u: CurveSamples, r: float, neck: int | None = None) -> ExpansionReport:
    """Least-squares ``offset + a0 zeta + a1 r^2 / zeta`` on the neck annulus.

    The report carries the fitted coefficients and the sup of what the
    three-term model leaves over.
    """
    idx, zeta = _neck_annulus(u, r, neck)
    basis = np.stack([np.ones_like(zeta), zeta, r * r / zeta], axis=-1).reshape(-1, 3)
    vals = to_complex(u.values[idx]).reshape(-1, u.dim // 2)
    coef, *_ = np.linalg.lstsq(basis, vals, rcond=None)
    res = float(np.sqrt(np.sum(np.abs(vals - basis @ coef) ** 2, axis=-1)).max())
    return ExpansionReport(to_real(coef[1]), to_real(coef[2]), res, (r ** (4.0 / 3.0), r ** (2.0 / 3.0)), to_real(coef[0]))


# ---------------------------------------------------------------------------
# image metrics


def upsample_angular(values: np.ndarray, factor: int) -> np.ndarray:
    """Trigonometric interpolation of every ring onto ``factor`` times more angles."""
    if factor <= 1:
        return values
    m = values.shape[1]
    spec = np.fft.fft(values, axis=1)
    big = np.zeros((values.shape[0], m * factor) + values.shape[2:], dtype=complex)
    half = m // 2
    big[:, :half] = spec[:, :half]
    big[:, -half + 1 :] = spec[:, -half + 1 :]
    big[:, half] = 0.5 * spec[:, half]
    big[:, -half] = 0.5 * spec[:, half]
    return np.real(np.fft.ifft(big, axis=1)) * factor


def _points(u: Any, refine: int) -> np.ndarray:
    if isinstance(u, CurveSamples):
        vals = u.embedded()
        vals = upsample_angular(vals, refine)
        return vals.reshape(-1, vals.shape[-1])
    pts = np.asarray(u, dtype=float)
    return pts.reshape(-1, pts.shape[-1])


def hausdorff_distance(u1: Any, u2: Any, refine: int = 1) -> float:
    """Symmetric Hausdorff distance between sampled images (k-d tree nearest neighbours)."""
    a = _points(u1, refine)
    b = _points(u2, refine)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample set")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def cylinder_distance(u1: CurveSamples, u2: CurveSamples, metric: Callable | None = None) -> float:
    """``sup_k 2^{-k} sup_{|s| <= k} d(u1, u2)`` on a periodic glued window.

    ``s`` is the window coordinate centred on the window origin; a node with
    ``k - 1 < |s| <= k`` first enters the sup at index ``k``.
    """
    if u1.domain is not u2.domain and (
        u1.domain.domain_id() != u2.domain.domain_id() or not np.array_equal(u1.domain.sigma, u2.domain.sigma)
    ):
        raise ValueError("curves live on different domains")
    dom = u1.domain
    if metric is None:
        dist = np.sqrt(np.sum((u1.values - u2.values) ** 2, axis=-1))
    else:
        dist = metric(u1, u2)
    if dom.window_coord is None:
        return float(dist.max())
    s = dom.window_coord
    if dom.periodic and dom.glue is not None:
        span = dom.glue.segments
        s = (s + span / 2) % span - span / 2
    k = np.maximum(np.ceil(np.abs(s) - 1e-12), 0)
    return float(np.max(dist.max(axis=1) * 2.0 ** (-k)))


def waist(u: CurveSamples, r: float) -> float:
    """Minimum of ``|u|`` on the ring ``|z| = r``.

    A simple proxy for how strongly the neck is pinched; it depends on the
    chart and carries no canonical meaning.
    """
    l = int(np.argmin(np.abs(u.domain.sigma - math.log(r))))
    return float(np.sqrt(np.sum(u.values[l] ** 2, axis=-1)).min())
