from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gluelab.curves import laurent_curve
from gluelab.cutoff import (
    LogCutoff,
    beta_eval,
    dirichlet_energy,
    dirichlet_energy_quadrature,
    splice_cutoff,
    spliced_product_bound_check,
)
from gluelab.domain import build_annulus


def test_cutoff_values():
    c = LogCutoff(0.01, 0.1)
    assert beta_eval(c, 0.005) == 1.0
    assert beta_eval(c, math.sqrt(0.001)) == pytest.approx(0.5, abs=1e-14)
    assert beta_eval(c, 0.2j) == 0.0
    assert beta_eval(LogCutoff(0.01, 0.1, "outer_one"), 0.005) == 0.0


def test_cutoff_rejects_origin_and_bad_radii():
    with pytest.raises(ValueError):
        beta_eval(LogCutoff(0.01, 0.1), 0.0)
    with pytest.raises(ValueError):
        LogCutoff(0.1, 0.1)
    with pytest.raises(ValueError):
        LogCutoff(0.01, 0.1, "sideways")


def test_dirichlet_energy_closed_form():
    assert dirichlet_energy(LogCutoff(0.01, 0.1)) == pytest.approx(2 * math.pi / math.log(10), rel=1e-15)
    assert dirichlet_energy(LogCutoff(0.01, 0.1)) == pytest.approx(2.72875, abs=1e-5)
    assert dirichlet_energy(LogCutoff(1e-4, 0.1)) == pytest.approx(2.72875 / 3, abs=1e-5)


@pytest.mark.parametrize("delta,eps", [(0.01, 0.1), (1e-4, 0.5), (0.2, 0.3)])
def test_dirichlet_quadrature_matches_closed_form(delta, eps):
    c = LogCutoff(delta, eps)
    assert dirichlet_energy_quadrature(c) == pytest.approx(dirichlet_energy(c), rel=1e-5)


def test_splice_cutoff_vanishes_inside_and_is_one_outside():
    r = 2.0**-5
    c = splice_cutoff(r)
    assert beta_eval(c, r**1.6) == 0.0
    assert beta_eval(c, 1.01 * r) == 1.0


def _disc_field(eps: float, terms: dict) -> object:
    # 16 knots per decade from 1e-6 so that log 0.01 is a knot
    return laurent_curve(build_annulus(1e-6, eps, 81, 16), terms)


def test_spliced_product_of_zero_field_is_zero():
    xi = _disc_field(0.1, {1: [0.0]})
    lhs, _ = spliced_product_bound_check(LogCutoff(0.01, 0.1), xi, 2.5)
    assert lhs == 0.0


def test_spliced_product_of_identity_matches_closed_form():
    c = LogCutoff(0.01, 0.1)
    lhs, shape = spliced_product_bound_check(c, _disc_field(0.1, {1: [1.0]}), 2.5)
    # |grad beta| |z| = 1 / ln 10 on a ring of area pi (eps^2 - delta^2)
    exact = (math.pi * (0.1**2 - 0.01**2)) ** (1 / 2.5) / c.log_ratio
    assert lhs == pytest.approx(exact, rel=1e-4)
    assert lhs <= shape


@pytest.mark.parametrize("terms", [{1: [1.0]}, {2: [3.0]}, {1: [0.5j], 3: [2.0]}])
def test_spliced_product_ratio_bounded(terms):
    lhs, shape = spliced_product_bound_check(LogCutoff(0.01, 0.1), _disc_field(0.1, terms), 3.0)
    assert 0 < lhs / shape < 1


def test_spliced_product_requires_vanishing_at_origin():
    with pytest.raises(ValueError):
        spliced_product_bound_check(LogCutoff(0.01, 0.1), _disc_field(0.1, {0: [1.0]}), 2.5)


@settings(max_examples=50, deadline=None)
@given(
    delta=st.floats(1e-4, 0.1),
    ratio=st.floats(1.01, 100.0),
    a=st.floats(0.0, 1.0),
    da=st.floats(0.0, 1.0),
)
def test_cutoff_is_monotone_and_bounded(delta, ratio, a, da):
    c = LogCutoff(delta, delta * ratio)
    s0 = math.log(delta) - 1 + a * (math.log(ratio) + 2)
    b0, b1 = c.of_sigma(s0), c.of_sigma(s0 + da)
    assert 0.0 <= b1 <= b0 <= 1.0
    # Lipschitz in sigma with constant 1 / ln(eps / delta)
    assert b0 - b1 <= da / c.log_ratio + 1e-12
