from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gluelab.acs import standard_structure
from gluelab.curves import (
    CurveSamples,
    curve_from_function,
    cylinder_distance,
    dbar_residual,
    expansion_check,
    extract_linear_coefficient,
    fit_expansion,
    hausdorff_distance,
    laurent_curve,
    upsample_angular,
)
from gluelab.domain import build_annulus, build_glued_cylinder, build_lattice_domain
from gluelab.targets import to_real


@pytest.fixture(scope="module")
def neck_domain():
    r = 2.0**-6
    return r, build_lattice_domain(2 * math.log(r) - 1, 1, 6, 16)


def test_laurent_curves_are_holomorphic(neck_domain):
    _, dom = neck_domain
    u = laurent_curve(dom, {1: [1, 2j], -1: [0.5, 0], 3: [0, 1]})
    w = dbar_residual(u, standard_structure(2))
    assert np.abs(w.values).max() < 1e-12


def test_conjugate_has_residual_twice_its_modulus():
    dom = build_annulus(0.1, 1.0, 32, 16)

    def grad(z):
        # u = conj z: d/d sigma gives conj z, d/d theta gives -i conj z
        return to_real(np.conj(z)[..., None]), to_real(-1j * np.conj(z)[..., None])

    u = curve_from_function(dom, lambda z: to_real(np.conj(z)[..., None]), grad)
    w = dbar_residual(u, standard_structure(1))
    mag = np.linalg.norm(w.values, axis=-1)
    assert np.allclose(mag, 2 * np.abs(dom.z()), rtol=1e-13)


def test_residual_rejects_dimension_mismatch(neck_domain):
    _, dom = neck_domain
    with pytest.raises(ValueError):
        dbar_residual(laurent_curve(dom, {1: [1]}), standard_structure(2))


def test_linear_coefficient_exact():
    dom = build_annulus(0.01, 0.2, 32, 16)
    u = laurent_curve(dom, {1: [2 - 1j, 0.5]})
    fit = extract_linear_coefficient(u, 0.0, 0.2)
    assert np.allclose(fit.a, [2, 0.5, -1, 0], atol=1e-13)
    assert fit.residual < 1e-13 and not fit.flagged


def test_antilinear_data_is_flagged():
    dom = build_annulus(0.01, 0.2, 32, 16)
    u = curve_from_function(dom, lambda z: to_real(np.conj(z)[..., None]))
    assert extract_linear_coefficient(u, 0.0, 0.2).flagged


def test_expansion_check_exact(neck_domain):
    r, dom = neck_domain
    a0, a1 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0.5])
    u = laurent_curve(dom, {1: [1, 0], -1: [0, r * r * (1 + 0.5j)]})
    assert expansion_check(u, a0, a1, r).residual_sup < 1e-13
    off = expansion_check(u, a0, np.zeros(4), r)
    # r^2 |a1| / |zeta| peaks at the inner edge r^{4/3}
    assert off.residual_sup == pytest.approx(abs(1 + 0.5j) * r ** (2 / 3), rel=1e-12)


def test_fit_expansion_recovers_coefficients(neck_domain):
    r, dom = neck_domain
    u = laurent_curve(dom, {0: [0.3, 0.1j], 1: [1 + 1j, 0], -1: [0, 2 * r * r]})
    rep = fit_expansion(u, r)
    assert np.allclose(rep.a0, [1, 0, 1, 0], atol=1e-10)
    assert np.allclose(rep.a1, [0, 2, 0, 0], atol=1e-10)
    assert np.allclose(rep.offset, [0.3, 0, 0, 0.1], atol=1e-12)
    assert rep.residual_sup < 1e-12


def test_expansion_needs_covering_domain():
    r = 2.0**-6
    dom = build_lattice_domain(-2, 1, 6, 16)
    with pytest.raises(ValueError):
        expansion_check(laurent_curve(dom, {1: [1]}), [1, 0], [0, 0], r)


def test_upsample_reproduces_band_limited_rings():
    m = 16
    th = 2 * np.pi * np.arange(m) / m
    vals = np.cos(3 * th)[None, :, None]
    fine = upsample_angular(vals, 4)
    th4 = 2 * np.pi * np.arange(4 * m) / (4 * m)
    assert np.allclose(fine[0, :, 0], np.cos(3 * th4), atol=1e-13)


def test_hausdorff_trivial_cases():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert hausdorff_distance(a, a) == 0.0
    assert hausdorff_distance(a, a + [0, 0.5]) == pytest.approx(0.5)
    assert hausdorff_distance(a, np.array([[0.0, 0.0]])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        hausdorff_distance(a, np.zeros((0, 2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_hausdorff_is_a_metric_on_point_clouds(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(rng.integers(1, 30), 3)) for _ in range(3))
    dab = hausdorff_distance(a, b)
    assert dab == pytest.approx(hausdorff_distance(b, a))
    assert dab <= hausdorff_distance(a, c) + hausdorff_distance(c, b) + 1e-12


def test_cylinder_distance_weights_far_windows():
    dom = build_glued_cylinder(3, 2, [2.0**-3, 2.0**-4, 2.0**-3])
    vals = np.zeros(dom.shape + (4,))
    u1 = CurveSamples(dom, vals, np.zeros(dom.shape + (2, 4)))
    s = (dom.window_coord + 3) % 6 - 3
    shift = np.where((np.abs(s) > 2.5)[:, None, None], np.array([0.0, 3.0, 0.0, 4.0]), 0.0)
    u2 = u1.with_values(vals + shift)
    # |c| = 5 enters at window index 3
    assert cylinder_distance(u1, u2) == pytest.approx(5 / 8)
    assert cylinder_distance(u1, u1) == 0.0


def test_cylinder_distance_accepts_equal_rebuilt_domains():
    radii = [2.0**-3, 2.0**-4, 2.0**-3]
    d1, d2 = build_glued_cylinder(3, 2, radii), build_glued_cylinder(3, 2, radii)
    u1 = CurveSamples(d1, np.zeros(d1.shape + (4,)), np.zeros(d1.shape + (2, 4)))
    u2 = CurveSamples(d2, np.zeros(d2.shape + (4,)), np.zeros(d2.shape + (2, 4)))
    assert cylinder_distance(u1, u2) == 0.0
    d3 = build_glued_cylinder(3, 1, radii)
    u3 = CurveSamples(d3, np.zeros(d3.shape + (4,)), np.zeros(d3.shape + (2, 4)))
    with pytest.raises(ValueError):
        cylinder_distance(u1, u3)
