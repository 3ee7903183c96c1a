from __future__ import annotations

import math

import numpy as np
import pytest

from gluelab.acs import standard_structure
from gluelab.curves import laurent_curve
from gluelab.domain import build_lattice_domain
from gluelab.glue import GlueConfig, build_pair_glue


def make_pair(r: float, per_octave: float = 6, m: int = 16, margin: float = 3.0, pad: float = 1.0):
    """Lines ``(z, 0)`` and ``(0, z)`` in ``C^2`` glued at ``r``."""
    cfg = GlueConfig(r=r)
    L = math.log(r)
    G = build_lattice_domain(2 * L - margin, margin, per_octave, m, "theta_r", r)
    d0 = build_lattice_domain(1.5 * L - pad, margin, per_octave, m, "fubini_study")
    d1 = build_lattice_domain(1.5 * L - pad, margin, per_octave, m, "fubini_study", mirrored=True)
    u0 = laurent_curve(d0, {1: [1, 0]})
    u1 = laurent_curve(d1, {1: [0, 1]})
    return cfg, u0, u1, build_pair_glue(u0, u1, cfg, G)


@pytest.fixture(scope="session")
def J0():
    return standard_structure(2)


@pytest.fixture(scope="session")
def pair16():
    return make_pair(2.0**-4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)
    print(f"{key}: {'pass' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'pass' if passed else 'FAIL'}  {detail}")
