"""Shared fixtures.

The expensive objects (ergodic extractions, long time-average runs) are
session-scoped so the module suites and the acceptance gate reuse one
computation. Budgets are deliberately modest; the acceptance tests that
need tighter numbers request their own runs.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from ergolab import ebsde, model


def trace_surface_gap(erg, points, kind):
    """Disagreement between the two smallest-alpha extraction surfaces.

    The stationary value and gradient carry the regression's own fit
    error; tolerances that compare against them must include this term
    on top of the Monte Carlo floor.
    """
    lo, hi = sorted(erg.trace, key=lambda a: a.alpha)[:2]
    if kind == "value":
        va = np.asarray(lo.u.eval_node(0, points)) - lo.anchor_value
        vb = np.asarray(hi.u.eval_node(0, points)) - hi.anchor_value
        return float(np.max(np.abs(va - vb)))
    ga = np.asarray(lo.u.gradient(0.0, points))
    gb = np.asarray(hi.u.gradient(0.0, points))
    return float(np.max(np.abs(ga - gb)))


@pytest.fixture(scope="session")
def ou_spec():
    return model.preset("ou-attract")


@pytest.fixture(scope="session")
def repel_spec():
    return model.preset("ou-repel")


@pytest.fixture(scope="session")
def sine_spec():
    return model.preset("sine-weak")


@pytest.fixture(scope="session")
def lq_spec():
    return model.preset("control-lq")


@pytest.fixture(scope="session")
def erg_ou(ou_spec):
    # ~12 s; reused by the ebsde, ltb and acceptance suites
    return ebsde.extract_ergodic(ou_spec, n_particles=3000, dt=0.02, seed=42)


@pytest.fixture(scope="session")
def erg_lq(lq_spec):
    return ebsde.extract_ergodic(lq_spec, n_particles=3000, dt=0.02, seed=42)


@pytest.fixture(scope="session")
def lam_ou_dt002(ou_spec):
    # matched-step reference for residual tests run at dt = 0.02
    return ebsde.lambda_by_time_average(
        ou_spec, t_long=300.0, dt=0.02, n_particles=20_000, seed=5)


@pytest.fixture(scope="session")
def lam_ou_dt001(ou_spec):
    return ebsde.lambda_by_time_average(
        ou_spec, t_long=300.0, dt=0.01, n_particles=20_000, seed=5)
