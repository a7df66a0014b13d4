"""Discounted solves and the vanishing-discount ergodic extraction."""

import math

import numpy as np
import pytest

import oracle_reference as oracle
from ergolab import model
from ergolab.ebsde import (HorizonBudgetError, discount_horizon,
                           extract_ergodic, lambda_by_time_average,
                           solve_alpha_bsde)


@pytest.mark.parametrize("alpha", [0.4, 0.1])
def test_constant_driver_discounted_value(ou_spec, erg_ou, alpha):
    c = 0.8
    spec = ou_spec.replace(driver=lambda x, mu, z: np.full(x.shape[0], c))
    sol = solve_alpha_bsde(spec, erg_ou.mu_star, alpha, dt=0.02,
                           n_particles=1000, seed=0)
    want = (c / alpha) * (1.0 - math.exp(-alpha * sol.t_alpha))
    assert sol.anchor_value == pytest.approx(want, abs=1e-3 * c / alpha)
    assert sol.lambda_candidate == pytest.approx(c, abs=2e-3 * c)
    assert sol.truncation_bound <= 1e-3 * (sol.c_hat / alpha) * 1.01


def test_candidate_sequence_squeezes_toward_limit(erg_ou):
    cand = {a.alpha: a.lambda_candidate for a in erg_ou.trace}
    assert cand[0.1] == pytest.approx(oracle.LAMBDA_QUADRATIC, abs=0.05)
    # successive candidates sit closer to each other than to the limit
    for hi, lo in ((0.4, 0.2), (0.2, 0.1)):
        assert abs(cand[hi] - cand[lo]) < \
            abs(cand[hi] - oracle.LAMBDA_QUADRATIC)


def test_extraction_on_quadratic_example(erg_ou):
    assert erg_ou.stable
    assert erg_ou.lambda_ == pytest.approx(oracle.LAMBDA_QUADRATIC, abs=0.05)
    assert float(erg_ou.u_bar.eval_node(0, np.array([0.0]))[0]) == 0.0
    for x in (1.0, 2.0, -1.5):
        assert float(erg_ou.u_bar.eval_node(0, np.array([x]))[0]) == \
            pytest.approx(oracle.u_bar_quadratic(x), abs=0.1 * (1 + x * x))
        assert float(erg_ou.zeta_bar.eval_node(0, np.array([x]))[0]) == \
            pytest.approx(oracle.zeta_bar_quadratic(x), abs=0.15 * (1 + abs(x)))
    assert erg_ou.mu_star.m2() == pytest.approx(0.5, abs=0.05)


def test_stationary_driver_average_self_consistent(ou_spec, erg_ou, lq_spec,
                                                   erg_lq):
    # integrating the stationary equation over one step forces lambda to
    # equal the driver's mean under mu* at the stationary z-field
    for spec, erg in ((ou_spec, erg_ou), (lq_spec, erg_lq)):
        atoms = erg.mu_star.points
        z = np.asarray(erg.zeta_bar.eval_node(0, atoms)).reshape(len(atoms), -1)
        mean_f = float(np.mean(spec.driver(atoms, erg.mu_star, z)))
        assert mean_f == pytest.approx(erg.lambda_, abs=0.05)


def test_extraction_on_lq_example(erg_lq):
    assert erg_lq.stable
    assert erg_lq.lambda_ == pytest.approx(oracle.LAMBDA_LQ, abs=0.05)
    for x in (1.0, 2.0):
        assert float(erg_lq.u_bar.eval_node(0, np.array([x]))[0]) == \
            pytest.approx(oracle.u_bar_lq(x), abs=0.1 * (1 + x * x))
        assert float(erg_lq.zeta_bar.eval_node(0, np.array([x]))[0]) == \
            pytest.approx(oracle.zeta_bar_lq(x), abs=0.15 * (1 + abs(x)))


def test_growth_constant_stable_across_discounts(ou_spec, erg_ou):
    # fitted C in |u^alpha| <= (C/alpha)(1 + |x|^(q+1) + ||theta||^(q+1))
    q = ou_spec.constants.q
    atoms = erg_ou.mu_star.points
    theta_term = float(np.mean(np.abs(atoms) ** (2 * q + 2))) \
        ** ((q + 1) / (2 * q + 2))
    envelope = 1.0 + np.abs(atoms[:, 0]) ** (q + 1) + theta_term
    c_hat = {}
    for a in erg_ou.trace:
        vals = np.abs(np.asarray(a.u.eval_node(0, atoms)))
        c_hat[a.alpha] = a.alpha * float(np.max(vals / envelope))
    picked = [c_hat[a] for a in (0.4, 0.2, 0.1)]
    assert max(picked) <= 2.0 * min(picked)


def test_centered_surfaces_equicontinuous(erg_ou):
    grid = np.linspace(-2.0, 2.0, 41)
    centered = []
    for a in erg_ou.trace:  # alphas sorted descending
        vals = a.u.eval_node(0, grid) - a.anchor_value
        centered.append(np.asarray(vals))
    gaps = [float(np.max(np.abs(u - v)))
            for u, v in zip(centered, centered[1:])]
    assert gaps[-1] < gaps[0]


def test_lambda_agrees_across_anchors(ou_spec):
    # uniqueness proxy: the extracted average must not depend on where the
    # value function is pinned to zero
    kwargs = dict(n_particles=2000, dt=0.02, seed=6, alphas=(0.4, 0.1))
    at_zero = extract_ergodic(ou_spec, anchor=np.array([0.0]), **kwargs)
    at_one = extract_ergodic(ou_spec, anchor=np.array([1.0]), **kwargs)
    assert abs(at_zero.lambda_ - at_one.lambda_) <= 0.05
    # each surface is zero at its own anchor
    assert float(at_zero.u_bar.eval_node(0, np.array([0.0]))[0]) == 0.0
    assert float(at_one.u_bar.eval_node(0, np.array([1.0]))[0]) == 0.0


def test_time_average_quadratic(ou_spec):
    est = lambda_by_time_average(ou_spec, t_long=60.0, dt=0.02,
                                 n_particles=4000, seed=3)
    assert est.value == pytest.approx(oracle.LAMBDA_QUADRATIC, abs=0.02)
    assert est.se > 0.0
    assert est.t_burn < est.t_long


def test_time_average_constant_driver_is_exact(ou_spec):
    spec = ou_spec.replace(driver=lambda x, mu, z: np.full(x.shape[0], 0.37))
    est = lambda_by_time_average(spec, t_long=40.0, dt=0.02,
                                 n_particles=200, seed=0)
    assert est.value == pytest.approx(0.37, abs=1e-12)


def test_time_average_agrees_with_extraction_on_lq(lq_spec, erg_lq):
    est = lambda_by_time_average(lq_spec, t_long=40.0, dt=0.02,
                                 n_particles=3000, seed=8,
                                 zeta=erg_lq.zeta_bar)
    assert abs(est.value - erg_lq.lambda_) <= 0.05


def test_horizon_guards(ou_spec):
    with pytest.raises(ValueError, match="transient bias"):
        lambda_by_time_average(ou_spec, t_long=5.0, dt=0.02,
                               n_particles=100, seed=0)
    with pytest.raises(HorizonBudgetError, match="budget"):
        discount_horizon(alpha=1e-6, c_hat=1.0, dt=0.01)
    with pytest.raises(ValueError, match="positive"):
        discount_horizon(alpha=0.0, c_hat=1.0, dt=0.01)
