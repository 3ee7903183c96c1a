"""Logarithmic cutoff functions and their integral identities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .domain import DiscreteDomain, NormSpec, build_annulus, end_corrected_weights, norm_array


@dataclass(frozen=True)
class LogCutoff:
    """``beta_{delta,eps}``: 1 on ``|z| <= delta``, 0 on ``|z| >= eps``, log-linear between.

    ``orientation="outer_one"`` gives ``1 - beta_{delta,eps}`` instead.
    """

    delta: float
    eps: float
    orientation: str = "inner_one"

    def __post_init__(self) -> None:
        if not 0 < self.delta < self.eps:
            raise ValueError("need 0 < delta < eps")
        if self.orientation not in ("inner_one", "outer_one"):
            raise ValueError(f"unknown orientation {self.orientation!r}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.eps / self.delta)

    def of_sigma(self, sigma: Any) -> np.ndarray:
        """Value as a function of ``sigma = log|z|``."""
        s = np.asarray(sigma, dtype=float)
        b = np.clip((math.log(self.eps) - s) / self.log_ratio, 0.0, 1.0)
        return b if self.orientation == "inner_one" else 1.0 - b

    def dsigma(self, sigma: Any) -> np.ndarray:
        """``d beta / d sigma``; half the slope at the two kinks."""
        s = np.asarray(sigma, dtype=float)
        lo, hi = math.log(self.delta), math.log(self.eps)
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        slope = -1.0 / self.log_ratio
        out = np.where((s > lo + tol) & (s < hi - tol), slope, 0.0)
        kink = (np.abs(s - lo) <= tol) | (np.abs(s - hi) <= tol)
        out = np.where(kink, 0.5 * slope, out)
        return out if self.orientation == "inner_one" else -out

    def gradient_magnitude(self, z: Any) -> np.ndarray:
        """Flat ``|grad beta|`` at ``z`` (``1 / (|z| ln(eps/delta))`` on the ring)."""
        rho = np.abs(np.asarray(z, dtype=complex))
        inside = (rho > self.delta) & (rho < self.eps)
        return np.where(inside, 1.0 / (np.where(rho > 0, rho, 1.0) * self.log_ratio), 0.0)


def beta_eval(c: LogCutoff, z: Any) -> np.ndarray | float:
    z = np.asarray(z, dtype=complex)
    if np.any(z == 0):
        raise ValueError("cutoff is evaluated away from z = 0")
    out = c.of_sigma(np.log(np.abs(z)))
    return float(out) if out.ndim == 0 else out


def dirichlet_energy(c: LogCutoff) -> float:
    """Closed form ``int |grad beta|^2 = 2 pi / ln(eps / delta)``."""
    return 2 * math.pi / c.log_ratio


def dirichlet_energy_quadrature(c: LogCutoff, nr: int = 64, m: int = 16) -> float:
    """Flat quadrature of ``|grad beta|^2`` over the transition annulus."""
    dom = build_annulus(c.delta, c.eps, nr, m, "flat")
    # both boundary circles belong to the ring; pull the end nodes just inside
    z = dom.z()
    rho = np.clip(np.abs(z), c.delta * (1 + 1e-14), c.eps * (1 - 1e-14))
    g = c.gradient_magnitude(rho * np.exp(1j * np.angle(z)))
    return dom.integrate(g**2)


def _sub_weights(domain: DiscreteDomain, lo: float, hi: float) -> np.ndarray:
    idx = domain.levels_between(lo, hi)
    if len(idx) < 2:
        raise ValueError("interval contains fewer than two levels")
    if abs(domain.sigma[idx[0]] - lo) > 1e-9 or abs(domain.sigma[idx[-1]] - hi) > 1e-9:
        raise ValueError("interval ends must be grid levels")
    w = np.zeros(domain.L)
    w[idx] = end_corrected_weights(len(idx), domain.h)
    return w


def spliced_product_bound_check(
    c: LogCutoff, xi: Any, p: float, tol: float = 1e-4
) -> tuple[float, float]:
    """Measured ``||grad beta . xi||_{L^p(A_{delta,eps})}`` and the shape factor.

    ``xi`` is a sampled field (``domain``, ``values``, ``derivs``) on a flat
    annulus approximating ``B_eps``, with ``log delta`` and ``log eps`` on the
    grid.  Returns ``(lhs, (2 pi)^{1/p} ln(eps/delta)^{-(1-1/p)} ||xi||_{W^{1,p}})``.
    """
    dom: DiscreteDomain = xi.domain
    vals = np.asarray(xi.values, dtype=float)
    scale = max(1.0, float(np.abs(vals).max()))
    if np.abs(vals[0]).max() > tol * scale:
        raise ValueError("xi must vanish at the origin")
    if abs(dom.sigma[-1] - math.log(c.eps)) > 1e-9:
        raise ValueError("xi must be sampled on the disc of radius eps")
    w = _sub_weights(dom, math.log(c.delta), math.log(c.eps))
    mag = np.sqrt(np.sum(vals**2, axis=-1))
    # flat |grad beta| = |d beta / d sigma| / rho, area = rho^2 d sigma d theta
    slope = 1.0 / c.log_ratio
    dens = (slope * mag / dom.lam[:, None]) ** p * (dom.lam**2)[:, None]
    lhs = float(np.sum(w[:, None] * (2 * np.pi / dom.m) * dens)) ** (1 / p)
    w1p = norm_array(dom, vals, NormSpec(p=p, flavor="W1p"), derivs=xi.derivs)
    rhs_shape = (2 * math.pi) ** (1 / p) * c.log_ratio ** (-(1 - 1 / p)) * w1p
    return lhs, rhs_shape


def splice_cutoff(r: float, delta: float = 0.5) -> LogCutoff:
    """``1 - beta_{r^{1+delta}, r}``: 0 inside ``r^{1+delta}``, 1 outside ``r``."""
    return LogCutoff(r ** (1 + delta), r, "outer_one")
