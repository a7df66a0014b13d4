"""Particle simulation: determinism, moment stability, contraction, blow-up."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

import oracle_reference as oracle
from ergolab import model
from ergolab.measure import EmpiricalMeasure, MeasureFlow, moment, wasserstein
from ergolab.sde import (INIT_DRAW_STEP, BlowUpError, DriftShift, PathBundle,
                         contraction_rate, derive_seed, draw_initial,
                         flow_property_check, gaussian_increments,
                         simulate_decoupled, simulate_mv)


def _quiet_spec(drift, sigma0=1.0, name="quiet"):
    sig = np.array([[sigma0]])
    return model.ProblemSpec(
        dim=1,
        drift=drift,
        diffusion=lambda x, mu: sig,
        driver=lambda x, mu, z: np.zeros(x.shape[0]),
        terminal=lambda x, mu: np.zeros(x.shape[0]),
        constants=model.Constants(nu=1.0, eta=1.0, k_b_x=1.0, k_b_l=0.0,
                                  k_s_x=0.0, k_s_l=0.0, sigma0=sigma0,
                                  r_ball=0.0, q=2.0, eps=1.0),
        name=name)


def test_increment_stream_contract():
    a = gaussian_increments(5, 3, 4, 2)
    assert a.shape == (4, 2)
    np.testing.assert_array_equal(a, gaussian_increments(5, 3, 4, 2))
    assert not np.array_equal(a, gaussian_increments(5, 4, 4, 2))
    assert not np.array_equal(a, gaussian_increments(6, 3, 4, 2))
    # the initial-condition stream never collides with a step stream
    init = gaussian_increments(5, INIT_DRAW_STEP, 4, 2)
    assert not np.array_equal(a, init)


def test_derive_seed_spreads():
    seeds = {derive_seed(42, tag) for tag in range(64)}
    assert len(seeds) == 64
    assert derive_seed(42, 7) == derive_seed(42, 7)
    assert derive_seed(42, 7) != derive_seed(43, 7)


def test_simulation_reproducible(ou_spec):
    theta = EmpiricalMeasure.dirac(1.0)
    a = simulate_mv(ou_spec, theta, dt=0.01, T=0.5, n_particles=300, seed=9)
    b = simulate_mv(ou_spec, theta, dt=0.01, T=0.5, n_particles=300, seed=9)
    np.testing.assert_array_equal(a.bundle.states, b.bundle.states)
    c = simulate_mv(ou_spec, theta, dt=0.01, T=0.5, n_particles=300, seed=10)
    assert not np.array_equal(a.bundle.states, c.bundle.states)


def test_thread_count_never_changes_bits(tmp_path):
    script = tmp_path / "hash_run.py"
    script.write_text(
        "import hashlib\n"
        "from ergolab import model, sde\n"
        "from ergolab.measure import EmpiricalMeasure\n"
        "spec = model.preset('ou-attract')\n"
        "r = sde.simulate_mv(spec, EmpiricalMeasure.dirac(1.0), dt=0.01,\n"
        "                    T=0.5, n_particles=400, seed=9)\n"
        "print(hashlib.sha256(r.bundle.states.tobytes()).hexdigest())\n")
    digests = set()
    for threads in ("1", "4"):
        env = dict(os.environ,
                   OMP_NUM_THREADS=threads, MKL_NUM_THREADS=threads,
                   OPENBLAS_NUM_THREADS=threads)
        proc = subprocess.run([sys.executable, str(script)], env=env,
                              capture_output=True, text=True, check=True)
        digests.add(proc.stdout.strip())
    assert len(digests) == 1


def test_zero_dynamics_freeze_paths():
    spec = _quiet_spec(lambda t, x, mu: np.zeros_like(x), sigma0=0.0)
    theta = EmpiricalMeasure([0.0, 1.0, -2.0])
    res = simulate_mv(spec, theta, dt=0.1, T=1.0, n_particles=32, seed=0)
    assert set(np.unique(res.bundle.states[0])) <= {-2.0, 0.0, 1.0}
    for snap in res.bundle.states[1:]:
        np.testing.assert_array_equal(snap, res.bundle.states[0])


def test_ou_mean_and_variance(ou_spec):
    res = simulate_mv(ou_spec, EmpiricalMeasure.dirac(1.0), dt=0.01, T=2.0,
                      n_particles=10_000, seed=2)
    m_t1 = res.bundle.states_at(1.0).mean()
    assert m_t1 == pytest.approx(oracle.mv_mean(1.0, 1.0, attract=True),
                                 abs=0.02)
    v_t2 = res.bundle.states_at(2.0)[:, 0].var()
    assert v_t2 == pytest.approx(oracle.ou_variance(2.0), abs=0.03)


@pytest.mark.parametrize("name", model.PRESET_NAMES)
@pytest.mark.parametrize("p", [2, 4])
def test_moment_boundedness_sweep(name, p):
    spec = model.preset(name)
    rate = spec.contraction_rate_bound()
    T = 50.0 / rate
    res = simulate_mv(spec, EmpiricalMeasure.dirac(2.0), dt=0.02, T=T,
                      n_particles=500, seed=1, record_every=20)
    times = res.flow.times
    vals = np.array([moment(m, p) for m in res.flow.measures])
    early_max = vals[times <= 5.0 / rate].max()
    assert vals.max() <= 1.5 * early_max


def test_shifted_drift_keeps_moments_bounded(ou_spec):
    shift = DriftShift(lambda t, x, mu: np.full_like(x, 0.5), bound=0.5)
    flow = MeasureFlow.constant(EmpiricalMeasure.dirac(0.0), 0.0, 50.0)
    bundle = simulate_decoupled(ou_spec, 0.0, flow, dt=0.02, T=50.0,
                                n_particles=500, seed=3, shift=shift,
                                record_every=20)
    vals = np.array([moment(EmpiricalMeasure(s), 2) for s in bundle.states])
    early_max = vals[bundle.times <= 5.0].max()
    assert vals.max() <= 1.5 * early_max


def test_shift_bound_is_enforced():
    shift = DriftShift(lambda t, x, mu: np.full_like(x, 0.5), bound=0.2)
    with pytest.raises(ValueError, match="declared bound"):
        shift(0.0, np.zeros((2, 1)), EmpiricalMeasure.dirac(0.0))


def test_constant_shift_moves_the_mean():
    sigma0, c, T, n = 0.7, 0.5, 2.0, 20_000
    spec = _quiet_spec(lambda t, x, mu: np.zeros_like(x), sigma0=sigma0)
    shift = DriftShift(lambda t, x, mu: np.full_like(x, c), bound=c)
    flow = MeasureFlow.constant(EmpiricalMeasure.dirac(0.0), 0.0, T)
    bundle = simulate_decoupled(spec, 0.0, flow, dt=0.01, T=T, n_particles=n,
                                seed=4, shift=shift,
                                record_every=int(T / 0.01))
    se = sigma0 * math.sqrt(T / n)
    assert bundle.states[-1].mean() == pytest.approx(
        oracle.shifted_bm_mean(sigma0, c, T), abs=3 * se)


def test_noise_free_decay_is_euler_exact():
    spec = _quiet_spec(lambda t, x, mu: -x, sigma0=0.0)
    res = simulate_mv(spec, EmpiricalMeasure.dirac(1.0), dt=0.01, T=1.0,
                      n_particles=1, seed=0)
    x_T = float(res.bundle.states[-1, 0, 0])
    assert x_T == pytest.approx((1.0 - 0.01) ** 100, abs=1e-12)
    assert x_T == pytest.approx(math.exp(-1.0), abs=2 * 0.01)


def test_decoupled_marginal_matches_interacting(ou_spec):
    theta = EmpiricalMeasure.dirac(0.5)
    n = 8000
    mv = simulate_mv(ou_spec, theta, dt=0.01, T=1.0, n_particles=n, seed=6)
    dec = simulate_decoupled(ou_spec, draw_initial(theta, n, seed=7),
                             mv.flow, dt=0.01, T=1.0, n_particles=n, seed=7,
                             record_every=100)
    # Monte Carlo scale from two fully independent interacting runs
    ref = simulate_mv(ou_spec, theta, dt=0.01, T=1.0, n_particles=n, seed=8)
    mc = max(wasserstein(mv.bundle.measure_at(1.0),
                         ref.bundle.measure_at(1.0), 2), 5e-3)
    gap = wasserstein(dec.measure_at(1.0), mv.bundle.measure_at(1.0), 2)
    assert gap <= 2.0 * mc


def test_flow_restart_consistency(ou_spec):
    gap = flow_property_check(ou_spec, EmpiricalMeasure.dirac(1.0),
                              s=0.5, T=1.0, dt=0.01, n=4000, seed=5)
    assert gap <= 3.0 * 0.02
    # near-terminal restarts leave almost no room to drift apart
    late = flow_property_check(ou_spec, EmpiricalMeasure.dirac(1.0),
                               s=0.98, T=1.0, dt=0.01, n=4000, seed=5)
    assert late <= 0.05
    frozen = _quiet_spec(lambda t, x, mu: -x, sigma0=0.0)
    assert flow_property_check(frozen, EmpiricalMeasure.dirac(1.0),
                               s=0.5, T=1.0, dt=0.01, n=50, seed=5) <= 1e-10


def test_synchronous_w2_decay_dominated(ou_spec):
    fit = contraction_rate(ou_spec, EmpiricalMeasure.dirac(0.0),
                           EmpiricalMeasure.dirac(1.0), dt=0.01, T=2.0,
                           n=2000, seed=12)
    lam = ou_spec.contraction_rate_bound()
    w0 = fit.w_values[0]
    for t, w in zip(fit.times, fit.w_values):
        assert w <= math.exp(-lam * t) * w0 + 0.05
    # the fitted rate reflects the true 1.5 decay, not just the certified 1.0
    assert fit.rate == pytest.approx(1.5, abs=0.1)


def test_repelling_interaction_still_contracts(repel_spec):
    fit = contraction_rate(repel_spec, EmpiricalMeasure.dirac(0.0),
                           EmpiricalMeasure.dirac(1.0), dt=0.01, T=3.0,
                           n=2000, seed=13)
    assert fit.rate >= repel_spec.contraction_rate_bound() - 0.05


def test_equal_initial_laws_truncate_fit(ou_spec):
    theta = EmpiricalMeasure.dirac(1.0)
    fit = contraction_rate(ou_spec, theta, theta, dt=0.05, T=0.5,
                           n=100, seed=0)
    assert np.all(fit.w_values <= 1e-8)
    assert math.isnan(fit.rate)
    assert fit.truncated_at == 0.0
    assert fit.note


def test_blow_up_reports_rather_than_nan():
    spec = _quiet_spec(lambda t, x, mu: x ** 3)
    with np.errstate(over="ignore"), pytest.raises(BlowUpError):
        simulate_mv(spec, EmpiricalMeasure.dirac(2.0), dt=0.5, T=10.0,
                    n_particles=8, seed=0)


def test_flow_coverage_guard(ou_spec):
    flow = MeasureFlow.constant(EmpiricalMeasure.dirac(0.0), 0.0, 1.0)
    with pytest.raises(ValueError, match="covers"):
        simulate_decoupled(ou_spec, 0.0, flow, dt=0.01, T=2.0,
                           n_particles=10, seed=0)


def test_bundle_accessors(tmp_path, ou_spec):
    res = simulate_mv(ou_spec, EmpiricalMeasure.dirac(0.0), dt=0.1, T=1.0,
                      n_particles=5, seed=0, record_every=2)
    b = res.bundle
    assert b.states.shape == (len(b.times), 5, 1)
    assert b.index_of(b.times[-1]) == len(b.times) - 1
    assert b.terminal.n_particles == 5
    path = tmp_path / "paths.csv"
    b.to_csv(path)
    assert path.read_text().startswith("step,time,particle,x0")
    with pytest.raises(ValueError):
        PathBundle(np.array([0.0, 1.0]), np.zeros((3, 2, 1)), seed=0)
