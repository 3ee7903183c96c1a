from __future__ import annotations

import math

import numpy as np
import pytest

from gluelab import linop as lo
from gluelab import solver as so
from gluelab.acs import bump_perturbation, standard_structure
from gluelab.curves import laurent_curve
from gluelab.domain import build_lattice_domain

FREE_BC = lo.TransparentBC((0, 0), (2, 1))


@pytest.fixture(scope="module")
def free_line():
    dom = build_lattice_domain(-3.0, 3.0, 6, 16, "fubini_study")
    u = laurent_curve(dom, {1: [1.0, 0.0]})
    D = lo.assemble_Du(u, standard_structure(2), bc=FREE_BC)
    return u, D


def test_discrete_solution_is_a_fixed_point(pair16, J0):
    *_, ur = pair16
    line = laurent_curve(ur.domain, {1: [1.0, 0.5]})
    D = lo.assemble_Du(line.with_values(line.values), J0)
    Q = lo.right_inverse_direct(D)
    # the sampled line carries an O(h) truncation residual; one step removes it
    sol, rep = so.newton_correct(line, J0, Q, D=D, c0=1.0)
    assert rep.iterations == 1 and rep.bound_check
    again, rep2 = so.newton_correct(sol, J0, Q, D=D, tol=1e-10)
    assert rep2.iterations == 0 and rep2.converged
    assert np.array_equal(again.values, sol.values)


def test_newton_corrects_perturbed_pair(pair16):
    *_, ur = pair16
    J = bump_perturbation(standard_structure(2), [0.3, 0, 0.2, 0], 0.6, 0.05, 7, "axes")
    D = lo.assemble_Du(ur.with_values(ur.values), J)
    Q = lo.right_inverse_direct(D)
    vec = lo.nonlinear_residual(D, ur.with_values(ur.values))
    c0 = so.inverse_norm_estimate(Q, D, probes=20, extra=[vec])
    _, rep = so.newton_correct(ur, J, Q, D=D, c0=c0)
    assert rep.converged and rep.residual_history[-1] < 1e-10
    assert rep.residual_history[1] < 0.1 * rep.residual_history[0]
    assert rep.bound_check


def test_entry_gate_rejects_large_residual(pair16):
    *_, ur = pair16
    J = bump_perturbation(standard_structure(2), [0.3, 0, 0.2, 0], 0.6, 0.05, 7, "axes")
    D = lo.assemble_Du(ur.with_values(ur.values), J)
    Q = lo.right_inverse_direct(D)
    with pytest.raises(so.SmallnessGateError) as info:
        so.newton_correct(ur, J, Q, D=D, gate=1e-12)
    assert info.value.report.iterations == 0


def test_entry_gate_formula():
    assert so.entry_gate(2.0, 1.0) == pytest.approx(0.1 / 8)
    assert so.entry_gate(2.0, 100.0) == pytest.approx((1 / 400) / 8)


def test_kernel_evaluation_inverse_is_a_right_inverse(free_line, rng):
    u, D = free_line
    node = (u.domain.level_index(-math.log(2) / 2), 0)
    q = so.kernel_evaluation_inverse(D, node)
    assert q.margin > 1e-3
    for _ in range(5):
        w = rng.normal(size=4)
        xi = q(w)
        assert np.allclose(q.evaluate(xi), w, atol=1e-10)
        assert np.linalg.norm(D(xi)) < 1e-6 * np.linalg.norm(xi)


def test_kernel_evaluation_rejects_off_grid_node(free_line):
    _, D = free_line
    with pytest.raises(ValueError):
        so.kernel_evaluation_inverse(D, (10_000, 0))


def test_polynomial_coefficients_of_exact_polynomial(free_line):
    u, D = free_line
    xi = laurent_curve(u.domain, {0: [0.1, 0.2j], 1: [1.0, 0.0], 2: [0.5j, 0.0]}).values
    c = so.polynomial_coefficients(D, xi, degree=2)
    assert np.allclose(c, [[0.1, 0.2j], [1.0, 0.0], [0.5j, 0.0]], atol=1e-12)


def test_constrained_newton_fixed_point(free_line):
    u, D = free_line
    node = (u.domain.level_index(-math.log(2) / 2), 3)
    A = lo.augment_with_evaluation(D, [node])
    T = lo.right_inverse_direct(A)
    J = standard_structure(2)
    target = u.values[node]
    sol, rep = so.constrained_newton(u, J, T, [target], [node], D=A)
    assert rep.converged and rep.constraint_residual < 1e-10
    again, rep2 = so.constrained_newton(sol, J, T, [target], [node], D=A)
    assert rep2.iterations == 0
    assert np.array_equal(again.values, sol.values)


def test_constrained_newton_hits_target(free_line):
    u, D = free_line
    node = (u.domain.level_index(-math.log(2) / 2), 3)
    A = lo.augment_with_evaluation(D, [node])
    T = lo.right_inverse_direct(A)
    target = u.values[node] + np.array([1e-3, -2e-3, 0.0, 1e-3])
    out, rep = so.constrained_newton(u, standard_structure(2), T, [target], [node], D=A)
    assert rep.converged and rep.constraint_residual < 1e-10
    assert np.allclose(out.values[node], target, atol=1e-10)


def test_constrained_newton_argument_checks(free_line):
    u, D = free_line
    with pytest.raises(ValueError):
        so.constrained_newton(u, standard_structure(2), None, [np.zeros(4)], [], D=D)
    with pytest.raises(ValueError):
        so.constrained_newton(u, standard_structure(2), None, [np.zeros(4)], [(0, 0)], D=D)
