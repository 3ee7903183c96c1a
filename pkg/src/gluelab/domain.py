"""Discretized geometries, quadrature and norms.

Every domain is a product of an axial coordinate ``sigma`` (log of the
radius on an annulus, or the glued coordinate on a cylinder) with ``m``
uniform angles.  The metric is conformal to ``d sigma^2 + d theta^2`` with
factor ``lam(sigma)^2``, so all integrals reduce to
``sum_l w_l * lam_l^2 * sum_j (2 pi / m) * f(l, j)``.

Sampled fields are arrays of shape ``(L, m, d)``; derivatives have shape
``(L, m, 2, d)`` holding ``(d/d sigma, d/d theta)``.  A (0,1)-form is stored
through its value on ``d/d sigma``, i.e. ``w = u_sigma + J(u) u_theta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre
from scipy import optimize

LN2 = math.log(2.0)
WEIGHTS = ("flat", "fubini_study", "theta_r", "glued")
FLAVORS = ("Lp", "W1p", "linf_Lp", "linf_W1p", "C0")


@dataclass(frozen=True)
class NormSpec:
    """Which norm to measure.

    ``strict`` enforces ``p > 2``; it may only be switched off for the
    limit-case diagnostics of the Sobolev embedding.
    """

    p: float = 2.5
    flavor: str = "Lp"
    window_halfwidth: float = 2.0 / 3.0
    strict: bool = True

    def __post_init__(self) -> None:
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown norm flavor {self.flavor!r}")
        if self.strict and not self.p > 2:
            raise ValueError("p must exceed 2")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if not 0.5 <= self.window_halfwidth < 1:
            raise ValueError("windows must overlap and stay local: halfwidth in [1/2, 1)")

    @property
    def needs_derivative(self) -> bool:
        return self.flavor in ("W1p", "linf_W1p")

    @property
    def windowed(self) -> bool:
        return self.flavor.startswith("linf")

    def with_flavor(self, flavor: str) -> "NormSpec":
        return NormSpec(self.p, flavor, self.window_halfwidth, self.strict)


def end_corrected_weights(n: int, h: float, order: int = 5) -> np.ndarray:
    """Trapezoid weights on ``n`` uniform nodes with Gregory-type end corrections.

    The ``order`` nodes at each end are adjusted so the rule is exact for
    Legendre polynomials up to degree ``2 * order - 1`` on the interval.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    k = min(order, (n - 2) // 4)
    if k < 1:
        return w
    x = np.linspace(-1.0, 1.0, n)
    vander = legendre.legvander(x, 2 * k - 1).T
    exact = np.zeros(2 * k)
    exact[0] = 2.0
    scale = 2.0 / ((n - 1) * h)
    idx = np.r_[np.arange(k), np.arange(n - k, n)]
    corr = np.linalg.solve(vander[:, idx], exact - vander @ (w * scale))
    w[idx] += corr / scale
    return w


def conformal_factor(sigma: np.ndarray, weight: str, r: float | None = None) -> np.ndarray:
    """Factor ``lam`` with metric ``lam^2 (d sigma^2 + d theta^2)`` at ``|z| = e^sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if weight == "flat":
        return np.exp(sigma)
    if weight in ("fubini_study", "glued"):
        return 0.5 / np.cosh(sigma)
    if weight == "theta_r":
        if r is None:
            raise ValueError("theta_r weight needs r")
        two_l = 2.0 * math.log(r)
        shifted = np.where(sigma < math.log(r), sigma - two_l, sigma)
        return 0.5 / np.cosh(shifted)
    raise ValueError(f"unknown weight {weight!r}")


def metric_weight_function(weight: str, r: float | None = None) -> Callable[[Any], np.ndarray]:
    """Return ``z -> theta(z)`` with metric ``theta^{-2} |dz|^2``."""

    def theta(z: Any) -> np.ndarray:
        a2 = np.abs(np.asarray(z, dtype=complex)) ** 2
        if weight == "flat":
            return np.ones_like(a2)
        if weight in ("fubini_study", "glued"):
            return 1.0 + a2
        if weight == "theta_r":
            return np.where(a2 < r * r, r * r + a2 / (r * r), 1.0 + a2)
        raise ValueError(f"unknown weight {weight!r}")

    return theta


@dataclass(frozen=True)
class GlueGeometry:
    """Segment bookkeeping of a glued cylinder.

    Segment ``i`` (curve index ``i mod N``) covers ``sigma_i`` in
    ``[log r_i, -log r_{i+1}]``; ``x_start[i]`` is its left end in the glued
    coordinate.  Neck ``i`` sits at ``x_start[i]``.
    """

    N: int
    periods: int
    radii: tuple[float, ...]
    x_start: np.ndarray
    x_end: np.ndarray

    @property
    def segments(self) -> int:
        return self.N * self.periods

    def radius(self, i: int) -> float:
        return self.radii[i % self.N]


@dataclass(frozen=True, eq=False)
class DiscreteDomain:
    kind: str
    sigma: np.ndarray
    m: int
    weight: str
    lam: np.ndarray
    sigma_weights: np.ndarray
    periodic: bool = False
    r: float | None = None
    window_coord: np.ndarray | None = None
    window_centers: tuple[int, ...] = ()
    glue: GlueGeometry | None = None
    segment: np.ndarray | None = None
    local_sigma: np.ndarray | None = None
    period_length: float = 0.0
    label: str = ""
    mirrored: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- geometry -------------------------------------------------------
    @property
    def L(self) -> int:
        return len(self.sigma)

    @property
    def h(self) -> float:
        return float(self.sigma[1] - self.sigma[0])

    @property
    def theta(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.m) / self.m

    @property
    def angular_modes(self) -> int:
        return self.m

    @property
    def radial_knots(self) -> np.ndarray:
        return np.exp(self.sigma)

    @property
    def metric_weight(self) -> Callable[[Any], np.ndarray]:
        return metric_weight_function(self.weight, self.r)

    @property
    def glue_params(self) -> GlueGeometry | None:
        return self.glue

    @property
    def shape(self) -> tuple[int, int]:
        return (self.L, self.m)

    @property
    def n_nodes(self) -> int:
        return self.L * self.m

    def z(self) -> np.ndarray:
        """Complex node positions ``e^{sigma + i theta}`` (local sigma on glued domains)."""
        s = self.sigma if self.local_sigma is None else self.local_sigma
        return np.exp(s[:, None] + 1j * self.theta[None, :])

    def node_weights(self) -> np.ndarray:
        """Quadrature weights for ``d sigma d theta`` (shape ``(L, m)``)."""
        return np.repeat(self.sigma_weights[:, None], self.m, axis=1) * (2 * np.pi / self.m)

    def volume_weights(self) -> np.ndarray:
        """Quadrature weights for the Riemannian area form."""
        return self.node_weights() * (self.lam**2)[:, None]

    def integrate(self, density: np.ndarray) -> float:
        return float(np.sum(self.volume_weights() * density))

    def level_index(self, sigma: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.sigma - sigma)))
        if abs(self.sigma[i] - sigma) > tol * max(1.0, abs(sigma)):
            raise ValueError(f"sigma={sigma} is not a node")
        return i

    def levels_between(self, lo: float, hi: float, tol: float = 1e-9) -> np.ndarray:
        return np.nonzero((self.sigma >= lo - tol) & (self.sigma <= hi + tol))[0]

    # -- differentiation -----------------------------------------------
    def axial_matrix(self) -> sp.csr_matrix:
        if "dsig" not in self._cache:
            self._cache["dsig"] = axial_derivative_matrix(self.L, self.h, self.periodic)
        return self._cache["dsig"]

    def one_sided_matrices(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        if "dsig_pm" not in self._cache:
            self._cache["dsig_pm"] = one_sided_axial_matrices(self.L, self.h, self.periodic)
        return self._cache["dsig_pm"]

    def d_sigma(self, values: np.ndarray) -> np.ndarray:
        """Axial derivative.

        Fields of even dimension (read as ``C^n``) are differentiated mode by
        mode: angular modes ``k > 0`` with forward stencils, ``k < 0`` with
        backward ones, which follows the direction in which the Cauchy-Riemann
        equation propagates each mode stably; mode 0 is backward, or forward
        on mirrored charts.  Other fields use the central stencil.
        """
        values = np.asarray(values, dtype=float)
        if values.ndim != 3 or values.shape[-1] % 2:
            flat = values.reshape(self.L, -1)
            return np.asarray(self.axial_matrix() @ flat).reshape(values.shape)
        back, fwd = self.one_sided_matrices()
        neg, pos = split_by_mode_sign(values, mirrored=self.mirrored)
        return (back @ neg.reshape(self.L, -1) + fwd @ pos.reshape(self.L, -1)).reshape(values.shape)

    def d_theta(self, values: np.ndarray) -> np.ndarray:
        return angular_derivative(values, axis=1, mirrored=self.mirrored)

    def differentiate(self, values: np.ndarray) -> np.ndarray:
        return np.stack([self.d_sigma(values), self.d_theta(values)], axis=2)

    # -- windows -------------------------------------------------------
    def window_level_weights(self, halfwidth: float) -> list[np.ndarray]:
        """Per-window axial weights (zero outside the window)."""
        if self.window_coord is None or not self.window_centers:
            return [self.sigma_weights]
        out = []
        s = self.window_coord
        for c in self.window_centers:
            d = s - c
            if self.periodic:
                span = float(self.glue.segments) if self.glue else self.period_length
                d = (d + span / 2) % span - span / 2
            inside = np.abs(d) <= halfwidth + 1e-12
            w = np.where(inside, self.sigma_weights, 0.0)
            if not self.periodic:
                idx = np.nonzero(inside)[0]
                if len(idx) > 1:
                    w = np.zeros_like(w)
                    w[idx] = end_corrected_weights(len(idx), self.h)
            out.append(w)
        return out

    # -- serialization --------------------------------------------------
    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "kind": self.kind,
            "weight": self.weight,
            "sigma_min": float(self.sigma[0]),
            "sigma_max": float(self.sigma[-1]),
            "levels": self.L,
            "m": self.m,
            "periodic": self.periodic,
            "r": self.r,
            "label": self.label,
        }
        if self.glue is not None:
            out["glue"] = {"N": self.glue.N, "periods": self.glue.periods, "radii": list(self.glue.radii)}
        return out

    def domain_id(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# derivative operators

_CENTRAL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0


def axial_derivative_matrix(n: int, h: float, periodic: bool = False) -> sp.csr_matrix:
    """Fourth-order finite-difference derivative on ``n`` uniform nodes."""
    if n < 5:
        raise ValueError("need at least five axial nodes")
    rows, cols, vals = [], [], []
    for i in range(n):
        if periodic or 2 <= i <= n - 3:
            for k, c in zip(range(-2, 3), _CENTRAL):
                if c != 0.0:
                    rows.append(i)
                    cols.append((i + k) % n)
                    vals.append(c)
        elif i < 2:
            stencil = _EDGE0 if i == 0 else _EDGE1
            for k, c in enumerate(stencil):
                rows.append(i)
                cols.append(k)
                vals.append(c)
        else:
            stencil = _EDGE0 if i == n - 1 else _EDGE1
            for k, c in enumerate(stencil):
                rows.append(i)
                cols.append(n - 1 - k)
                vals.append(-c)
    return sp.csr_matrix((np.array(vals) / h, (rows, cols)), shape=(n, n))


def one_sided_axial_matrices(n: int, h: float, periodic: bool = False) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Fourth-order ``(backward, forward)`` derivatives on ``n`` uniform nodes.

    The forward matrix uses nodes ``i..i+4`` where they exist and falls back
    to the most forward-leaning stencil near the right end; the backward
    matrix is its mirror image.
    """
    if n < 5:
        raise ValueError("need at least five axial nodes")
    # (offset of the first node, stencil) from most forward to most backward
    options = [(0, _EDGE0), (-1, _EDGE1), (-2, _CENTRAL), (-3, -_EDGE1[::-1]), (-4, -_EDGE0[::-1])]

    def build(order):
        rows, cols, vals = [], [], []
        for i in range(n):
            for start, stencil in order:
                if periodic or (0 <= i + start and i + start + 4 <= n - 1):
                    for k, c in enumerate(stencil):
                        if c != 0.0:
                            rows.append(i)
                            cols.append((i + start + k) % n)
                            vals.append(c)
                    break
        return sp.csr_matrix((np.array(vals) / h, (rows, cols)), shape=(n, n))

    return build(options[::-1]), build(options)


def mode_split_projectors(m: int, d: int, mirrored: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Real ``(m d) x (m d)`` projectors of one ring onto its backward- and forward-stencil modes.

    Modes are those of the complex reading ``x[:n] + i x[n:]`` (``d = 2n``).
    """
    if d % 2:
        raise ValueError("mode splitting needs complex components")
    n = d // 2
    eye = np.eye(m * d).reshape(m * d, m, d)
    c = eye[..., :n] + 1j * eye[..., n:]
    spec = np.fft.fft(c, axis=1)
    out = []
    back = backward_modes(m, mirrored)
    for mask in (back, ~back):
        pc = np.fft.ifft(spec * mask[None, :, None], axis=1)
        out.append(np.concatenate([pc.real, pc.imag], axis=-1).reshape(m * d, m * d).T)
    return out[0], out[1]


def backward_modes(m: int, mirrored: bool = False) -> np.ndarray:
    """Mask of angular modes differentiated with backward stencils.

    These are ``k <= 0``; on mirrored charts ``k < 0`` with the Nyquist mode
    counted as ``-m/2``, which is the image of the unmirrored choice under
    ``theta -> -theta`` and ``sigma -> -sigma``.
    """
    k = angular_wavenumbers(m, mirrored)
    return k < 0 if mirrored else k <= 0


def split_by_mode_sign(values: np.ndarray, axis: int = 1, mirrored: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(..., m, ..., 2n)`` samples into their backward-stencil and forward-stencil angular parts."""
    values = np.asarray(values, dtype=float)
    m = values.shape[axis]
    n = values.shape[-1] // 2
    shape = [1] * values.ndim
    shape[axis] = m
    c = values[..., :n] + 1j * values[..., n:]
    spec = np.fft.fft(c, axis=axis)
    parts = []
    back = backward_modes(m, mirrored)
    for mask in (back, ~back):
        pc = np.fft.ifft(spec * mask.reshape(shape), axis=axis)
        parts.append(np.concatenate([pc.real, pc.imag], axis=-1))
    return parts[0], parts[1]


def angular_wavenumbers(m: int, mirrored: bool = False) -> np.ndarray:
    """FFT wavenumbers with the Nyquist mode counted as ``+m/2`` (``-m/2`` on mirrored charts)."""
    k = np.fft.fftfreq(m, d=1.0 / m)
    k[m // 2] = -(m // 2) if mirrored else m // 2
    return k


def angular_derivative(values: np.ndarray, axis: int = 1, mirrored: bool = False) -> np.ndarray:
    """Spectral angular derivative.

    Vectors in ``R^{2n}`` are read as ``C^n`` (first half real part), so the
    derivative of ``e^{ik theta} a`` is exact for ``-m/2 < k <= m/2``.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[axis]
    k = angular_wavenumbers(m, mirrored)
    shape = [1] * values.ndim
    shape[axis] = m
    k = k.reshape(shape)
    d = values.shape[-1]
    if d % 2:
        spec = np.fft.fft(values.astype(complex), axis=axis)
        return np.real(np.fft.ifft(1j * k * spec, axis=axis))
    n = d // 2
    c = values[..., :n] + 1j * values[..., n:]
    dc = np.fft.ifft(1j * k * np.fft.fft(c, axis=axis), axis=axis)
    return np.concatenate([dc.real, dc.imag], axis=-1)


def angular_derivative_matrix(m: int, d: int, mirrored: bool = False) -> np.ndarray:
    """Real ``(m d) x (m d)`` matrix of :func:`angular_derivative` on one ring."""
    eye = np.eye(m * d).reshape(m * d, m, d)
    out = angular_derivative(eye, axis=1, mirrored=mirrored)
    return out.reshape(m * d, m * d).T


# ---------------------------------------------------------------------------
# builders


def _window_coord_pair(sigma: np.ndarray, r: float | None) -> tuple[np.ndarray | None, tuple[int, ...]]:
    if r is None:
        return None, ()
    big_l = abs(math.log(r))
    s = (sigma - math.log(r)) / big_l
    lo, hi = math.ceil(s[0] - 2.0 / 3.0 + 1e-9), math.floor(s[-1] + 2.0 / 3.0 - 1e-9)
    return s, tuple(range(lo, hi + 1))


def _make(kind, sigma, m, weight, r, label="", mirrored=False) -> DiscreteDomain:
    if m < 4 or m % 2:
        raise ValueError("angular sample count must be even")
    h = float(sigma[1] - sigma[0])
    lam = conformal_factor(sigma, weight, r)
    wc, centers = _window_coord_pair(sigma, r) if weight == "theta_r" else (None, ())
    return DiscreteDomain(
        kind=kind,
        sigma=sigma,
        m=m,
        weight=weight,
        lam=lam,
        sigma_weights=end_corrected_weights(len(sigma), h),
        r=r,
        window_coord=wc,
        window_centers=centers,
        label=label,
        mirrored=mirrored,
    )


def build_annulus(
    r_inner: float, r_outer: float, nr: int = 64, m: int = 16, weight: str = "flat", r: float | None = None
) -> DiscreteDomain:
    """Annulus ``r_inner <= |z| <= r_outer`` with ``nr`` log-spaced radii."""
    if not 0 < r_inner < r_outer:
        raise ValueError("need 0 < r_inner < r_outer")
    if nr < 16:
        raise ValueError("need at least 16 radial knots")
    if m < 16 or m % 2:
        raise ValueError("angular sample count must be even and at least 16")
    if weight not in WEIGHTS[:3]:
        raise ValueError(f"unknown weight {weight!r}")
    sigma = np.linspace(math.log(r_inner), math.log(r_outer), nr)
    return _make("annulus", sigma, m, weight, r)


def lattice_sigma(lo: float, hi: float, per_octave: float) -> np.ndarray:
    """Nodes ``i * ln2 / per_octave`` inside ``[lo, hi]``."""
    h = LN2 / per_octave
    i0 = math.ceil(lo / h - 1e-9)
    i1 = math.floor(hi / h + 1e-9)
    if i1 - i0 < 4:
        raise ValueError("lattice interval too short")
    return np.arange(i0, i1 + 1) * h


def lattice_resolution(r: float, per_octave: float = 6) -> float:
    """Nodes per octave closest to ``per_octave`` for which ``ln r`` is a lattice node.

    Powers of two need no adjustment; for other radii the spacing is
    stretched slightly so that ``z -> r^2 / z`` still maps nodes to nodes.
    """
    if not 0 < r < 1:
        raise ValueError("r must lie in (0, 1)")
    steps = max(1, round(-math.log(r) * per_octave / LN2))
    return steps * LN2 / -math.log(r)


def build_lattice_domain(
    sigma_lo: float,
    sigma_hi: float,
    per_octave: float = 6,
    m: int = 16,
    weight: str = "flat",
    r: float | None = None,
    kind: str = "sphere_chart",
    mirrored: bool = False,
) -> DiscreteDomain:
    """Domain on the dyadic lattice ``sigma in (ln 2 / per_octave) Z``.

    When ``r`` is a power of two the radii ``r^a`` for the exponents
    used by the gluing formulas are nodes, and ``z -> r^2 / z`` maps nodes
    to nodes.  ``mirrored=True`` marks a chart read through ``z -> r^2 / z``:
    its angular mode 0 is differentiated with forward instead of backward
    stencils and its Nyquist mode counts as ``-m/2``, so that the
    discretization commutes with the reflection.
    """
    return _make(kind, lattice_sigma(sigma_lo, sigma_hi, per_octave), m, weight, r, mirrored=mirrored)


def build_neck_sphere(r: float, margin: float = 6.0, per_octave: int = 6, m: int = 16) -> DiscreteDomain:
    """The two-sphere domain carrying the ``theta^r`` metric, truncated at ``e^{+-margin}``."""
    two_l = 2.0 * math.log(r)
    return build_lattice_domain(two_l - margin, margin, per_octave, m, "theta_r", r, kind="sphere_chart")


def build_glued_cylinder(
    N: int,
    periods: int,
    radii,
    charts: Any = None,
    per_octave: int = 6,
    m: int = 16,
    c0: float = 1.0,
) -> DiscreteDomain:
    """Periodic cylinder made of ``N * periods`` segments.

    Segment ``i`` is the sphere chart of curve ``i mod N`` with the discs
    ``|z| < r_i`` and ``|z| > 1 / r_{i+1}`` removed, carrying the round
    metric.  ``radii[i]`` is the neck radius between curves ``i-1`` and ``i``.
    ``charts`` is kept only for bookkeeping of the caller's chart maps.
    """
    radii = tuple(float(x) for x in radii)
    if periods < 1:
        raise ValueError("periods must be at least 1")
    if len(radii) != N or N < 1:
        raise ValueError("need one radius per curve")
    if min(radii) <= 0 or max(radii) >= c0 / 3:
        raise ValueError("radii must lie in (0, c0/3)")
    h = LN2 / per_octave
    starts, ends, sig_local, seg_of = [], [], [], []
    x = 0.0
    for i in range(N * periods):
        lo = math.log(radii[i % N])
        hi = -math.log(radii[(i + 1) % N])
        n_lo, n_hi = round(lo / h), round(hi / h)
        if abs(n_lo * h - lo) > 1e-9 or abs(n_hi * h - hi) > 1e-9:
            raise ValueError("radii must be powers of 2^(-1/per_octave)")
        starts.append(x)
        count = n_hi - n_lo
        sig_local.append(np.arange(n_lo, n_hi) * h)
        seg_of.append(np.full(count, i))
        x += count * h
        ends.append(x)
    sigma = np.arange(sum(len(s) for s in sig_local)) * h
    local = np.concatenate(sig_local)
    segment = np.concatenate(seg_of)
    starts_a, ends_a = np.array(starts), np.array(ends)
    s = segment + (sigma - starts_a[segment]) / (ends_a[segment] - starts_a[segment])
    geom = GlueGeometry(N=N, periods=periods, radii=radii, x_start=starts_a, x_end=ends_a)
    return DiscreteDomain(
        kind="glued_cylinder",
        sigma=sigma,
        m=m,
        weight="glued",
        lam=conformal_factor(local, "glued"),
        sigma_weights=np.full(len(sigma), h),
        periodic=True,
        window_coord=s,
        window_centers=tuple(range(N * periods)),
        glue=geom,
        segment=segment,
        local_sigma=local,
        period_length=x,
        label="" if charts is None else str(charts),
    )


# ---------------------------------------------------------------------------
# norms


def _pointwise(values: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(values**2, axis=-1))


def norm_array(
    domain: DiscreteDomain,
    values: np.ndarray,
    spec: NormSpec,
    derivs: np.ndarray | None = None,
    form: bool = False,
) -> float:
    """Norm of a sampled field (``form=True`` for (0,1)-forms)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[..., None]
    p = spec.p
    lam = domain.lam[:, None]
    mag = _pointwise(values)
    if form:
        mag = mag / lam
    if spec.flavor == "C0":
        return float(mag.max()) if mag.size else 0.0
    density = mag**p
    if spec.needs_derivative:
        if form:
            raise ValueError("W1p norms are defined for functions only")
        if derivs is None:
            raise ValueError("W1p norm needs derivative data")
        grad = np.sqrt(np.sum(np.asarray(derivs) ** 2, axis=(-2, -1)))
        density = density + (grad / lam) ** p
    vol = domain.volume_weights()
    if not spec.windowed:
        return float(np.sum(vol * density)) ** (1.0 / p)
    ang = 2 * np.pi / domain.m
    best = 0.0
    for w in domain.window_level_weights(spec.window_halfwidth):
        val = float(np.sum((w * domain.lam**2)[:, None] * ang * density))
        best = max(best, val)
    return best ** (1.0 / p)


def norm(field_obj: Any, spec: NormSpec) -> float:
    """Norm of a sampled field object.

    ``field_obj`` carries ``domain`` and ``values``; ``derivs`` is needed for
    Sobolev flavours, and ``is_form`` marks (0,1)-forms.
    """
    derivs = getattr(field_obj, "derivs", None)
    return norm_array(
        field_obj.domain, field_obj.values, spec, derivs=derivs, form=bool(getattr(field_obj, "is_form", False))
    )


def annulus_power_norm_closed_form(
    r: float, eps_exp: float, delta_exp: float, p: float, l: int, lprime: int | None = None
) -> float:
    """Exact flat ``L^p`` norm of ``z^l`` (or of ``r^lprime / z^l``) on ``A_{r^eps, r^delta}``."""
    if not 0 < r < 1:
        raise ValueError("need 0 < r < 1")
    if not 0 <= delta_exp <= eps_exp:
        raise ValueError("need 0 <= delta_exp <= eps_exp")
    if l < 1:
        raise ValueError("need l >= 1")
    if eps_exp == delta_exp:
        return 0.0
    spread = eps_exp - delta_exp
    if lprime is None:
        a = 2 + l * p
        return (2 * math.pi * (1 - r ** (spread * a)) / a) ** (1 / p) * r ** (delta_exp * (l + 2 / p))
    a = l * p - 2
    if a == 0:
        raise ValueError("degenerate exponent l p = 2")
    return (2 * math.pi * (1 - r ** (spread * a)) / a) ** (1 / p) * r ** (lprime + eps_exp * (-l + 2 / p))


# ---------------------------------------------------------------------------
# Sobolev constant


def _log_cutoff_profile(sigma: np.ndarray, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """1 for sigma <= a, 0 for sigma >= b, linear in between (with derivative)."""
    t = (b - sigma) / (b - a)
    f = np.clip(t, 0.0, 1.0)
    df = np.where((sigma > a) & (sigma < b), -1.0 / (b - a), 0.0)
    return f, df


def _tent_probe(domain: DiscreteDomain, c: float, w1: float, w2: float):
    sig = domain.sigma
    up, dup = _log_cutoff_profile(-sig, -c, -c + w1)
    dn, ddn = _log_cutoff_profile(sig, c, c + w2)
    f = np.repeat((up * dn)[:, None], domain.m, axis=1)
    ds = np.repeat((-dup * dn + up * ddn)[:, None], domain.m, axis=1)
    return f, np.stack([ds, np.zeros_like(f)], axis=2)


def _wave_probe(domain: DiscreteDomain, a: float, b: float, coef: np.ndarray):
    """``exp(a sigma - b sigma^2)`` times a trigonometric polynomial, peak-normalized."""
    sig, th = domain.sigma, domain.theta
    q = a * sig - b * sig**2
    g = np.exp(q - q.max())
    dg = (a - 2 * b * sig) * g
    ang = np.zeros(domain.m)
    dang = np.zeros(domain.m)
    for k, (x, y) in enumerate(coef.reshape(-1, 2)):
        ang += x * np.cos(k * th) + y * np.sin(k * th)
        dang += k * (-x * np.sin(k * th) + y * np.cos(k * th))
    f = g[:, None] * ang[None, :]
    return f, np.stack([dg[:, None] * ang[None, :], g[:, None] * dang[None, :]], axis=2)


def sobolev_probe_ratios(
    domain: DiscreteDomain, p: float, trials: int = 200, seed: int = 0, strict: bool = True
) -> np.ndarray:
    """Ratios ``sup|f| / ||f||_{W^{1,p}}`` over a seeded family of probe functions.

    Half of the budget samples random probes (low angular Fourier modes
    under a log-concave envelope, and piecewise log-linear tents); the other
    half refines the best probes of each family with Nelder-Mead.
    """
    rng = np.random.default_rng(seed)
    spec = NormSpec(p=p, flavor="W1p", strict=strict)
    sig = domain.sigma
    span = sig[-1] - sig[0]
    lo_w = 2 * domain.h

    def ratio(f, derivs):
        denom = norm_array(domain, f[..., None], spec, derivs=derivs[..., None])
        return np.abs(f).max() / denom if denom > 0 else 0.0

    def tent(x):
        c, w1, w2 = x
        return ratio(*_tent_probe(domain, c, max(abs(w1), lo_w), max(abs(w2), lo_w)))

    def wave(x):
        return ratio(*_wave_probe(domain, x[0], x[1] ** 2, x[2:]))

    tents: list[tuple[float, np.ndarray]] = []
    waves: list[tuple[float, np.ndarray]] = []
    n_random = trials // 2
    for t in range(n_random):
        c = rng.uniform(sig[0], sig[-1])
        if t % 2:
            x = np.array([c, span * rng.uniform(0.01, 0.4), span * rng.uniform(0.01, 0.4)])
            tents.append((tent(x), x))
        else:
            w = span * rng.uniform(0.02, 0.3)
            x = np.r_[c / w**2, 1 / (np.sqrt(2) * w), rng.normal(size=6)]
            waves.append((wave(x), x))
    # seed-independent starts: plateaus at both ends and in the middle, pure powers
    for c in (sig[0], 0.5 * (sig[0] + sig[-1]), sig[-1]):
        for frac in (0.05, 0.2):
            x = np.array([c, span * frac, span * frac])
            tents.append((tent(x), x))
    for a in (-3.0, -1.0, 1.0, 3.0):
        for coef in ([1, 0, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0], [1, 0, 1, 0, 0, 0]):
            x = np.r_[a, 0.0, coef]
            waves.append((wave(x), x))
    ratios = [v for v, _ in tents + waves]
    starts = 3
    budget = max(20, (trials - n_random) // starts)
    for fun, pool in ((tent, tents), (wave, waves)):
        for _, x0 in sorted(pool, key=lambda t: -t[0])[:starts]:
            res = optimize.minimize(lambda x: -fun(x), x0, method="Nelder-Mead", options={"maxfev": budget})
            ratios.append(-res.fun)
    return np.array(ratios)


def sobolev_constant_estimate(
    domain: DiscreteDomain, p: float, trials: int = 200, seed: int = 0, strict: bool = True
) -> float:
    """Lower estimate of the embedding constant ``sup |f|_inf / |f|_{W^{1,p}}``."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    return float(sobolev_probe_ratios(domain, p, trials, seed, strict).max())
