"""Almost-complex structures on flat charts of ``R^{2n}``.

Points of ``R^{2n}`` are read as ``C^n`` with the first ``n`` entries the
real parts.  The standard structure is ``J0 = [[0, -I], [I, 0]]``, i.e.
multiplication by ``i``.

All evaluators are vectorized: ``eval(X)`` accepts ``(..., 2n)`` points and
returns ``(..., 2n, 2n)``; ``jac(X)`` returns ``(..., 2n, 2n, 2n)`` with
``jac[..., a, b, k] = d J_ab / d x_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Array = np.ndarray


def standard_matrix(n: int) -> Array:
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


@dataclass(frozen=True, eq=False)
class AlmostComplexStructure:
    dim_half: int
    eval_fn: Callable[[Array], Array]
    jac_fn: Callable[[Array], Array]
    class_bound: float
    spec: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return 2 * self.dim_half

    def _points(self, x: Any) -> Array:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected points in R^{self.dim}, got shape {x.shape}")
        return x

    def eval(self, x: Any) -> Array:
        x = self._points(x)
        flat = x.reshape(-1, self.dim)
        return self.eval_fn(flat).reshape(x.shape[:-1] + (self.dim, self.dim))

    def jac(self, x: Any) -> Array:
        x = self._points(x)
        flat = x.reshape(-1, self.dim)
        return self.jac_fn(flat).reshape(x.shape[:-1] + (self.dim,) * 3)

    def deriv(self, x: Any, v: Any) -> Array:
        """Directional derivative ``(nabla_v J)(x)``."""
        return np.einsum("...abk,...k->...ab", self.jac(x), np.asarray(v, dtype=float))

    def __call__(self, x: Any) -> Array:
        return self.eval(x)

    @property
    def is_constant(self) -> bool:
        return self.spec.get("kind") == "standard"

    def to_json(self) -> dict:
        return dict(self.spec)


def standard_structure(n: int) -> AlmostComplexStructure:
    """The constant structure ``J0`` on ``R^{2n}``."""
    if n < 1:
        raise ValueError("n must be positive")
    j0 = standard_matrix(n)
    d = 2 * n

    def ev(x):
        return np.broadcast_to(j0, (len(x), d, d)).copy()

    def jac(x):
        return np.zeros((len(x), d, d, d))

    return AlmostComplexStructure(n, ev, jac, class_bound=1.0, spec={"kind": "standard", "n": n})


def _bump(x: Array, center: Array, radius: float) -> tuple[Array, Array]:
    """``(1 - s)^3`` with ``s = |x - c|^2 / R^2`` inside the ball, and its gradient."""
    y = x - center
    s = np.sum(y * y, axis=-1) / radius**2
    inside = s < 1
    t = np.where(inside, 1 - s, 0.0)
    phi = t**3
    grad = (-6.0 / radius**2) * (t**2)[:, None] * y
    return phi, grad


def _conjugate(base: AlmostComplexStructure, x: Array, g: Array, dg: Array) -> tuple[Array, Array]:
    """``J = G J_b G^-1`` and its derivative given ``G`` and ``dG`` (last axis = direction)."""
    jb = base.eval(x)
    djb = base.jac(x)
    ginv = np.linalg.inv(g)
    j = g @ jb @ ginv
    # dJ_k = (dG_k J_b + G dJb_k - J dG_k) G^-1
    dgk = np.moveaxis(dg, -1, 1)
    djbk = np.moveaxis(djb, -1, 1)
    num = dgk @ jb[:, None] + g[:, None] @ djbk - j[:, None] @ dgk
    dj = num @ ginv[:, None]
    return j, np.moveaxis(dj, 1, -1)


def bump_perturbation(
    base: AlmostComplexStructure,
    center: Any,
    radius: float,
    amplitude: float,
    seed: int,
    mode: str = "generic",
) -> AlmostComplexStructure:
    """Compactly supported perturbation ``J = G J_base G^-1``.

    ``mode="generic"`` uses ``G = I + amplitude * phi(x) * A`` with ``A`` a
    seeded random matrix of unit spectral norm.

    ``mode="axes"`` (``n >= 2``) uses
    ``G = I + amplitude * phi(x) * ((l2 . x) A1 P1 + (l1 . x) A2 P2)`` where
    ``P1`` projects onto the first complex coordinate, ``P2`` onto the
    others and ``l1, l2`` are linear forms in those coordinates.  The result
    equals ``J0`` on both coordinate planes' tangent spaces along them, so
    the coordinate lines stay holomorphic, ``J(0) = J_base(0)``, and
    ``nabla J(0)`` is nonzero.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = base.dim_half
    d = 2 * n
    center = np.asarray(center, dtype=float).reshape(d)
    rng = np.random.default_rng(seed)
    if mode == "generic":
        a = rng.normal(size=(d, d))
        a /= np.linalg.norm(a, 2)
        gmax = amplitude
        lin1 = lin2 = m1 = m2 = None
    elif mode == "axes":
        if n < 2:
            raise ValueError("axes mode needs n >= 2")
        e1 = np.zeros(d)
        e1[[0, n]] = 1.0
        e2 = 1.0 - e1
        m1 = np.diag(e1)
        m2 = np.diag(e2)
        a1 = rng.normal(size=(d, d))
        a2 = rng.normal(size=(d, d))
        a1 /= np.linalg.norm(a1, 2)
        a2 /= np.linalg.norm(a2, 2)
        lin2 = rng.normal(size=d) * e2
        lin1 = rng.normal(size=d) * e1
        lin1 /= np.linalg.norm(lin1)
        lin2 /= np.linalg.norm(lin2)
        m1 = a1 @ m1
        m2 = a2 @ m2
        gmax = 2 * amplitude * (np.linalg.norm(center) + radius)
        a = None
    else:
        raise ValueError(f"unknown bump mode {mode!r}")
    if abs(gmax) >= 0.5:
        raise ValueError("amplitude too large: conjugating matrix may lose invertibility")

    eye = np.eye(d)

    def g_and_dg(x):
        phi, dphi = _bump(x, center, radius)
        if mode == "generic":
            g = eye + amplitude * phi[:, None, None] * a
            dg = amplitude * a[None, :, :, None] * dphi[:, None, None, :]
            return g, dg
        s1 = x @ lin2
        s2 = x @ lin1
        mx = s1[:, None, None] * m1 + s2[:, None, None] * m2
        g = eye + amplitude * phi[:, None, None] * mx
        dmx = m1[None, :, :, None] * lin2[None, None, None, :] + m2[None, :, :, None] * lin1[None, None, None, :]
        dg = amplitude * (mx[..., None] * dphi[:, None, None, :] + phi[:, None, None, None] * dmx)
        return g, dg

    def ev(x):
        g, dg = g_and_dg(x)
        return _conjugate(base, x, g, dg)[0]

    def jac(x):
        g, dg = g_and_dg(x)
        return _conjugate(base, x, g, dg)[1]

    probe = center + radius * rng.uniform(-1, 1, size=(512, d))
    bound = float(max(np.abs(ev(probe)).max(), 1.0) + np.abs(jac(probe)).max() + base.class_bound)
    spec = {
        "kind": "bump",
        "base": base.to_json(),
        "center": center.tolist(),
        "radius": radius,
        "amplitude": amplitude,
        "seed": seed,
        "mode": mode,
    }
    return AlmostComplexStructure(n, ev, jac, class_bound=bound, spec=spec)


def flatten_near_point(J: AlmostComplexStructure, R: float, kappa: float) -> AlmostComplexStructure:
    """Make ``J`` constant near the chart origin.

    The result is ``J0`` on ``|w| < R (1 - R^kappa)``, ``J`` on ``|w| > R``
    and ``J(beta(|w|) w)`` in between, where ``beta`` is log-linear in ``|w|``
    from 0 to 1 across the ring.
    """
    if not 0 < R < 1:
        raise ValueError("R must lie in (0, 1)")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    n = J.dim_half
    d = 2 * n
    j0 = standard_matrix(n)
    if not np.allclose(J.eval(np.zeros(d)), j0, atol=1e-12):
        raise ValueError("flattening requires J(0) = J0 in the chart")
    r_in = R * (1 - R**kappa)
    span = -np.log1p(-(R**kappa))

    def split(x):
        rho = np.linalg.norm(x, axis=-1)
        inner = rho < r_in
        ring = (rho >= r_in) & (rho <= R)
        return rho, inner, ring

    def ev(x):
        rho, inner, ring = split(x)
        out = J.eval(x)
        out[inner] = j0
        if ring.any():
            b = np.log(rho[ring] / r_in) / span
            out[ring] = J.eval(b[:, None] * x[ring])
        return out

    def jac(x):
        rho, inner, ring = split(x)
        out = J.jac(x)
        out[inner] = 0.0
        if ring.any():
            xr = x[ring]
            rr = rho[ring]
            b = np.log(rr / r_in) / span
            db = 1.0 / (rr * span)
            y = b[:, None] * xr
            dy = b[:, None, None] * np.eye(d) + xr[:, :, None] * (db[:, None] * xr / rr[:, None])[:, None, :]
            out[ring] = np.einsum("nabj,njk->nabk", J.jac(y), dy)
        return out

    spec = {"kind": "flattened", "base": J.to_json(), "R": R, "kappa": kappa}
    bound = J.class_bound * (1 + 1.0 / (R * span))
    return AlmostComplexStructure(n, ev, jac, class_bound=float(bound), spec=spec)


def structure_from_json(spec: dict) -> AlmostComplexStructure:
    kind = spec.get("kind")
    if kind == "standard":
        return standard_structure(int(spec["n"]))
    if kind == "bump":
        return bump_perturbation(
            structure_from_json(spec["base"]),
            spec["center"],
            float(spec["radius"]),
            float(spec["amplitude"]),
            int(spec["seed"]),
            spec.get("mode", "generic"),
        )
    if kind == "flattened":
        return flatten_near_point(structure_from_json(spec["base"]), float(spec["R"]), float(spec["kappa"]))
    raise ValueError(f"unknown structure kind {kind!r}")


def square_defect(J: AlmostComplexStructure, points: Any) -> float:
    """``max ||J(x)^2 + I||_F`` over the given points."""
    j = J.eval(points)
    return float(np.linalg.norm(j @ j + np.eye(J.dim), axis=(-2, -1)).max())


def c0_distance(J1: AlmostComplexStructure, J2: AlmostComplexStructure, points: Any) -> float:
    """``max ||J1(x) - J2(x)||`` (spectral norm) over the given points."""
    return float(np.linalg.norm(J1.eval(points) - J2.eval(points), ord=2, axis=(-2, -1)).max())
