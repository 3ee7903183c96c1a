from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gluelab.glue import (
    REGIONS,
    GlueConfig,
    PolynomialField,
    build_chain_glue,
    build_intermediate,
    neck_cutoff,
    projective_line,
    region_labels,
)
from gluelab.targets import to_complex

from conftest import make_pair


def test_middle_annulus_is_both_curves(pair16):
    cfg, _, _, ur = pair16
    L = cfg.L
    sig = ur.domain.sigma
    mid = (sig >= (2 - cfg.alpha) * L - 1e-9) & (sig <= cfg.alpha * L + 1e-9)
    assert mid.sum() > 3
    z = ur.domain.z()[mid]
    w = to_complex(ur.values[mid])
    assert np.allclose(w[..., 0], z, atol=1e-14)
    assert np.allclose(w[..., 1], cfg.r**2 / z, atol=1e-14)


def test_outer_region_is_first_curve(pair16):
    cfg, _, _, ur = pair16
    sig = ur.domain.sigma
    outer = sig >= cfg.gamma_out * cfg.L + 1e-9
    w = to_complex(ur.values[outer])
    assert np.array_equal(w[..., 1], np.zeros_like(w[..., 1]))
    assert np.allclose(w[..., 0], ur.domain.z()[outer], atol=1e-15)


def test_glued_derivative_is_exact_in_middle(pair16):
    cfg, _, _, ur = pair16
    sig = ur.domain.sigma
    mid = (sig > (2 - cfg.alpha) * cfg.L + 1e-9) & (sig < cfg.alpha * cfg.L - 1e-9)
    z = ur.domain.z()[mid]
    ds = to_complex(ur.derivs[mid][:, :, 0])
    assert np.allclose(ds[..., 0], z, atol=1e-14)
    assert np.allclose(ds[..., 1], -(cfg.r**2) / z, atol=1e-14)


def test_intermediate_curve_agrees_with_glue_near_first_curve(pair16):
    cfg, u0, u1, ur = pair16
    u0r = build_intermediate(u0, u1, cfg, 0)
    sig = u0.domain.sigma
    keep = sig >= (2 - cfg.alpha) * cfg.L - 1e-9
    idx = np.rint((sig[keep] - ur.domain.sigma[0]) / ur.domain.h).astype(int)
    assert np.allclose(u0r.values[keep], ur.values[idx], atol=1e-14)


def test_deviation_from_first_curve_is_small_in_c0():
    # |u^r - u0| is at most r^2 / |z| on the gluing region, i.e. r^{2 - gamma'}
    for k in (4, 6):
        cfg, u0, _, ur = make_pair(2.0**-k)
        sig = ur.domain.sigma
        outer = sig >= cfg.alpha * cfg.L - 1e-9
        idx = np.rint((sig[outer] - u0.domain.sigma[0]) / u0.domain.h).astype(int)
        dev = np.abs(ur.values[outer] - u0.values[idx]).max()
        assert dev <= cfg.r ** (2 - cfg.alpha) * (1 + 1e-12)


def test_regions_partition_the_line():
    cfg = GlueConfig(r=2.0**-5)
    sig = np.linspace(3 * cfg.L, -3 * cfg.L, 2001)
    lab = region_labels(sig, cfg)
    assert set(np.unique(lab)) == set(range(len(REGIONS)))
    assert np.all(np.diff(lab) >= 0)
    assert region_labels(np.array([cfg.L]), cfg)[0] == REGIONS.index("middle")


def test_neck_cutoff_profile():
    cfg = GlueConfig(r=2.0**-5)
    b, db = neck_cutoff(cfg, np.array([0.0, cfg.alpha * cfg.L, cfg.gamma_out * cfg.L, 2 * cfg.L]))
    assert np.allclose(b, [0.0, 1.0, 0.0, 1.0])
    assert db[0] == 0.0 and db[3] == 0.0


@pytest.mark.parametrize(
    "kw",
    [
        {"alpha": 0.9, "gamma": 0.8},
        {"p": 4.5},
        {"alpha": 0.5},
        {"eps_target": 0.5},
        {"r": 0.2},
        {"r": -1.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        GlueConfig(**kw)


def test_default_config_exponents():
    cfg = GlueConfig()
    assert cfg.gamma_out == pytest.approx(0.5)
    assert cfg.eps_bound == pytest.approx(min(2 / 3 * 1.8 - 1, 1 - 2 / 3 * 1.2, 1 / 3))
    assert cfg.with_r(0.01).r == 0.01


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.6, 0.8), frac=st.floats(0.05, 0.95), k=st.integers(3, 12))
def test_valid_configs_order_the_cuts(alpha, frac, k):
    gamma = alpha + frac * (1 - alpha)
    try:
        cfg = GlueConfig(alpha=alpha, gamma=gamma, r=2.0**-k, eps_target=1e-3)
    except ValueError:
        return
    L = cfg.L
    cuts = [(2 - cfg.gamma_out) * L, (2 - cfg.alpha) * L, cfg.alpha * L, cfg.gamma_out * L]
    assert all(a < b for a, b in zip(cuts, cuts[1:]))


CHAIN = [projective_line(i) for i in range(3)]


def test_chain_rejects_mismatched_ends():
    with pytest.raises(ValueError):
        build_chain_glue([CHAIN[0], CHAIN[0], CHAIN[2]], [2.0**-4] * 3, GlueConfig(r=2.0**-4))


def test_chain_mark_targets_follow_deformation():
    r = 2.0**-4
    sig_star = -math.log(2) / 2
    shift = PolynomialField(np.array([[0.01 + 0.02j, -0.03j]]))
    u = build_chain_glue(
        CHAIN, [r] * 3, GlueConfig(r=r), {0: shift}, free_index=0, mark=(sig_star, 0)
    )
    plain = build_chain_glue(CHAIN, [r] * 3, GlueConfig(r=r), free_index=0, mark=(sig_star, 0))
    marks = u.meta["marks"]
    assert len(marks) == 2 and marks == plain.meta["marks"]
    (l0, j0), (l1, j1) = marks
    t0, t1 = (np.array(t) for t in u.meta["mark_targets"])
    # period 0 is displaced along the field, period 1 is not
    assert np.allclose(t0 - np.array(plain.meta["mark_targets"][0]), [0.01, 0, 0.02, -0.03], atol=1e-14)
    assert np.allclose(t1, plain.meta["mark_targets"][1], atol=1e-15)
    assert np.allclose(u.values[l0, j0], t0, atol=1e-14)


def test_chain_deformation_needs_free_index():
    with pytest.raises(ValueError):
        build_chain_glue(CHAIN, [2.0**-4] * 3, GlueConfig(r=2.0**-4), {0: PolynomialField(np.ones((1, 2)))})


def _sup_du(u) -> float:
    # |du| in the metric the domain carries: |u_sigma|^2 + |u_theta|^2 over 2 lam^2
    return float((np.sqrt(np.sum(u.derivs**2, axis=(-2, -1)) / 2) / u.domain.lam[:, None]).max())


@pytest.mark.parametrize("k", [3, 5, 8])
def test_glued_differential_bounded_by_twice_inputs(k):
    _, u0, u1, ur = make_pair(2.0**-k)
    assert _sup_du(ur) <= 2 * max(_sup_du(u0), _sup_du(u1))
