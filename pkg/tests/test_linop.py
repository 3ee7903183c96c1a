from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from gluelab import linop as lo
from gluelab.acs import bump_perturbation, standard_structure
from gluelab.curves import laurent_curve
from gluelab.domain import build_lattice_domain
from gluelab.glue import GlueConfig, build_chain_glue, projective_line

FREE_BC = lo.TransparentBC((0, 0), (2, 1))


def _line(per_octave: int = 6):
    dom = build_lattice_domain(-3.0, 3.0, per_octave, 16, "fubini_study")
    return laurent_curve(dom, {1: [1.0, 0.0]})


@pytest.fixture(scope="module")
def line_op():
    u = _line()
    return u, lo.assemble_Du(u, standard_structure(2), bc=FREE_BC)


def test_operator_is_linear(line_op, rng):
    _, D = line_op
    x, y = rng.normal(size=(2, D.domain_dim))
    assert np.allclose(D(2.5 * x - 0.5 * y), 2.5 * D(x) - 0.5 * D(y), atol=1e-9)


def test_constant_fields_are_in_the_kernel(line_op):
    u, D = line_op
    xi = laurent_curve(u.domain, {0: [1.0, 2j]}).values.ravel()
    assert np.abs(D(xi)).max() < 1e-12


def test_linear_fields_are_in_the_kernel_up_to_truncation():
    errs = []
    for po in (6, 12):
        u = _line(po)
        D = lo.assemble_Du(u, standard_structure(2), bc=FREE_BC)
        xi = laurent_curve(u.domain, {1: [1.0, 0.5]}).values.ravel()
        errs.append(np.abs(D(xi)).max() / np.abs(xi).max())
    assert errs[0] < 1e-4
    assert errs[1] < errs[0] / 4


def test_rejects_dimension_mismatch():
    u = laurent_curve(build_lattice_domain(-3.0, 3.0, 6, 16), {1: [1.0]})
    with pytest.raises(ValueError):
        lo.assemble_Du(u, standard_structure(2))


def test_direct_right_inverse_on_glued_pair(pair16, J0, rng):
    *_, ur = pair16
    D = lo.assemble_Du(ur.with_values(ur.values), J0)
    Q = lo.right_inverse_direct(D)
    assert Q.meta["probe_residual"] < 1e-8
    eta = rng.normal(size=D.codomain_dim)
    assert np.linalg.norm(D(Q(eta)) - eta) / np.linalg.norm(eta) < 1e-8


def test_zero_row_is_detected_as_rank_deficiency(line_op):
    _, D = line_op
    A = D.matrix.tolil()
    A[5, :] = 0
    A = A.tocsr()
    bad = lo.LinearOperatorHandle(lambda x: A @ x, D.domain_dim, D.codomain_dim, matrix=A)
    with pytest.raises(lo.RankDeficiencyError):
        lo.right_inverse_direct(bad)


def test_neumann_refuses_non_contracting_defect(line_op):
    _, D = line_op
    Q = lo.right_inverse_direct(D)
    with pytest.raises(lo.ContractionError):
        lo.neumann_invert(Q, D, contraction=1.2)
    with pytest.raises(ValueError):
        lo.neumann_invert(Q, D, kmax=0, contraction=0.1)


def test_neumann_with_exact_inverse_is_that_inverse(line_op, rng):
    _, D = line_op
    Q = lo.right_inverse_direct(D)
    N = lo.neumann_invert(Q, D, contraction=0.0)
    eta = rng.normal(size=D.codomain_dim)
    assert np.allclose(N(eta), Q(eta), atol=1e-8 * np.abs(Q(eta)).max())
    assert len(N.meta["history"][-1]) == 1


def test_neumann_corrects_a_scaled_inverse(line_op, rng):
    _, D = line_op
    Q = lo.right_inverse_direct(D)
    T = lo.LinearOperatorHandle(lambda e: 0.7 * Q(e), Q.domain_dim, Q.codomain_dim, Q.norm_context)
    N = lo.neumann_invert(T, D, contraction=0.3)
    eta = rng.normal(size=D.codomain_dim)
    assert np.linalg.norm(D(N(eta)) - eta) / np.linalg.norm(eta) < 1e-9


def test_chain_operator_drops_interface_rows_and_stays_surjective():
    r = 2.0**-4
    u = build_chain_glue([projective_line(i) for i in range(3)], [r] * 3, GlueConfig(r=r))
    J = standard_structure(2)
    D = lo.assemble_Du(u.with_values(u.values), J)
    assert D.domain_dim - D.codomain_dim == 36
    assert lo.right_inverse_direct(D).meta["probe_residual"] < 1e-8


def test_block_diagonal_layout():
    blocks = np.arange(8.0).reshape(2, 2, 2)
    M = lo.block_diagonal(blocks)
    assert isinstance(M, sp.csr_matrix)
    assert np.array_equal(M.toarray(), [[0, 1, 0, 0], [2, 3, 0, 0], [0, 0, 4, 5], [0, 0, 6, 7]])


def test_linearization_matches_finite_differences_to_first_order():
    u = _line()
    J = bump_perturbation(standard_structure(2), [0.8, 0, 0.3, 0], 0.5, 0.05, 7, "generic")
    D = lo.assemble_Du(u, J)
    err = lo.finite_difference_check(D, u, probes=6)
    worst = err.max(axis=0)
    slope = np.log(worst[0] / worst[-1]) / np.log(4.0)
    assert worst[0] < 1e-3
    assert 0.9 < slope < 1.1
