"""Long-horizon convergence experiments.

Three studies of how the finite-horizon value approaches the ergodic
triple as the horizon grows: the value slope against the long-run
average (inverse-time residual), the centered value against the
stationary value function (exponential residual with an offset), and the
z-readout against the stationary z-field (exponential decay to zero).

All horizon solves share one seed, so Monte Carlo noise is common random
numbers across the grid; orderings between horizons are then far more
stable than under independent runs. Each exponential fit carries a noise
floor from re-solving the largest horizon under three fresh seeds.
Residuals below twice that floor are not trusted by the log-linear pass;
when too few points clear it, or the pass fits poorly, the offset is
freed and the raw series is refit nonlinearly, with the decay then pinned
by the points that do carry signal. A fit with no signal anywhere reports
the rate as indeterminate instead of fitting noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from ergolab.bsde import BsdeSolution, solve_finite_bsde, z_from_gradient
from ergolab.ebsde import ErgodicSolution
from ergolab.measure import EmpiricalMeasure, MeasureFlow
from ergolab.sde import derive_seed, simulate_mv

__all__ = [
    "DecayFit",
    "ltb1_experiment",
    "ltb2_experiment",
    "ltb3_experiment",
]


@dataclass(frozen=True, eq=False)
class DecayFit:
    """Fitted residual model over a horizon grid.

    model "inverse-time": residual = c / T (rate and ell unused).
    model "exponential": residual = ell + c exp(-rate T); a pass needs a
    positive rate. Confidence intervals are 95% from the fit's own
    spread; ``indeterminate`` means the series carries no signal above
    twice the noise floor and the rate is not meaningful.
    """

    model: str
    t_grid: np.ndarray
    observed: np.ndarray
    c: float
    ell: float
    rate: float
    c_ci: tuple[float, float]
    rate_ci: tuple[float, float]
    r_squared: float
    noise_floor: float
    n_usable: int
    indeterminate: bool
    note: str = ""

    def predicted(self) -> np.ndarray:
        if self.model == "inverse-time":
            return self.c / self.t_grid
        return self.ell + self.c * np.exp(-self.rate * self.t_grid)

    def passes(self) -> bool:
        if self.indeterminate:
            return False
        return True if self.model == "inverse-time" else self.rate > 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("T,observed,fitted\n")
            np.savetxt(fh, np.column_stack([self.t_grid, self.observed,
                                            self.predicted()]),
                       delimiter=",", fmt="%.17g")

    def report(self) -> dict:
        return {"model": self.model, "c": self.c, "ell": self.ell,
                "rate": self.rate, "c_ci_lo": self.c_ci[0],
                "c_ci_hi": self.c_ci[1], "rate_ci_lo": self.rate_ci[0],
                "rate_ci_hi": self.rate_ci[1],
                "r_squared": self.r_squared,
                "noise_floor": self.noise_floor, "n_usable": self.n_usable,
                "indeterminate": int(self.indeterminate), "note": self.note}


def _ci_from_se(value: float, se: float, dof: int) -> tuple[float, float]:
    if dof < 1 or not np.isfinite(se):
        return (-math.inf, math.inf)
    q = stats.t.ppf(0.975, dof)
    return (value - q * se, value + q * se)


def _fit_inverse_time(t: np.ndarray, resid: np.ndarray) -> DecayFit:
    """Single-parameter c/T law, fitted in log space."""
    safe = np.maximum(resid, 1e-300)
    logs = np.log(safe) + np.log(t)
    log_c = float(logs.mean())
    dof = len(t) - 1
    se = float(logs.std(ddof=1) / math.sqrt(len(t))) if dof >= 1 else math.inf
    lo, hi = _ci_from_se(log_c, se, dof)
    pred = np.exp(log_c) / t
    ss_res = float(np.sum((np.log(safe) - np.log(pred)) ** 2))
    ss_tot = float(np.sum((np.log(safe) - np.log(safe).mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(model="inverse-time", t_grid=t, observed=resid,
                    c=math.exp(log_c), ell=0.0, rate=math.nan,
                    c_ci=(math.exp(lo), math.exp(hi)),
                    rate_ci=(math.nan, math.nan), r_squared=r2,
                    noise_floor=0.0, n_usable=len(t), indeterminate=False)


def _refit_free_offset(t: np.ndarray, values: np.ndarray, floor: float,
                       p0: tuple[float, float, float],
                       note: str) -> DecayFit | None:
    """Nonlinear ell + c exp(-rate T) fit on the raw series. Returns None
    when the optimizer fails or the fitted decay never clears the floor
    (a rate fitted to pure noise is worthless)."""

    def law(tt, ell_f, c_f, rate_f):
        return ell_f + c_f * np.exp(-rate_f * tt)

    try:
        popt, pcov = optimize.curve_fit(law, t, values, p0=p0, maxfev=20_000)
    except (RuntimeError, optimize.OptimizeWarning):
        return None
    ell, c, rate = (float(popt[0]), float(popt[1]), float(popt[2]))
    # a noise fit can split a flat level between ell and c with rate ~ 0;
    # demand that the fitted decay itself falls through the noise band
    decay = c * np.exp(-rate * t)
    drop = float(np.max(np.abs(decay)) - np.min(np.abs(decay)))
    if not (np.isfinite(drop) and drop > 2.0 * floor):
        return None
    above = np.abs(decay) > 2.0 * floor
    sd = np.sqrt(np.maximum(np.diag(pcov), 0.0))
    dof = len(t) - 3
    fitted = law(t, *popt)
    ss_res = float(np.sum((values - fitted) ** 2))
    ss_tot = float(np.sum((values - values.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(model="exponential", t_grid=t, observed=values, c=c,
                    ell=ell, rate=rate,
                    c_ci=_ci_from_se(c, float(sd[1]), dof),
                    rate_ci=_ci_from_se(rate, float(sd[2]), dof),
                    r_squared=r2, noise_floor=floor,
                    n_usable=int(above.sum()), indeterminate=False,
                    note=note)


def _fit_exponential(t: np.ndarray, values: np.ndarray, floor: float,
                     ell: float, anchored: np.ndarray | None = None,
                     anchored_t: np.ndarray | None = None) -> DecayFit:
    """Exponential fit of ``values`` (the full residual series over t).

    The first pass is log-linear on |anchored| (deviations from the
    fixed offset ``ell``, by default the series itself minus ell) using
    only points above twice the noise floor; a noisy or poorly fitting
    pass falls back to the free-offset nonlinear refit on the raw series.
    """
    if anchored is None:
        anchored = values - ell
        anchored_t = t
    mag = np.abs(anchored)
    usable = mag > max(2.0 * floor, 1e-300)
    n_usable = int(usable.sum())
    need = max(2, (len(anchored) + 1) // 2)

    if n_usable < need:
        refit = _refit_free_offset(
            t, values, floor,
            p0=(float(values[-1]),
                float(values[0] - values[-1]) * math.exp(float(t[0])), 1.0),
            note="offset refit (too few points above the noise floor "
                 "for a log-linear pass)")
        if refit is not None:
            return refit
        return DecayFit(model="exponential", t_grid=t, observed=values,
                        c=math.nan, ell=ell, rate=math.nan,
                        c_ci=(math.nan, math.nan),
                        rate_ci=(math.nan, math.nan), r_squared=math.nan,
                        noise_floor=floor, n_usable=n_usable,
                        indeterminate=True,
                        note="residuals sit below twice the noise floor; "
                             "rate not identifiable at this budget")

    ts, ys = anchored_t[usable], np.log(mag[usable])
    slope, intercept = np.polyfit(ts, ys, 1)
    rate, c = -float(slope), math.exp(float(intercept))
    pred = intercept + slope * ts
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = n_usable - 2
    if dof >= 1:
        s2 = ss_res / dof
        sxx = float(np.sum((ts - ts.mean()) ** 2))
        se_slope = math.sqrt(s2 / sxx)
        se_int = math.sqrt(s2 * (1.0 / n_usable + ts.mean() ** 2 / sxx))
    else:
        se_slope = se_int = math.inf
    lo, hi = _ci_from_se(float(intercept), se_int, dof)

    if r2 < 0.9:
        refit = _refit_free_offset(
            t, values, floor,
            p0=(ell, c if math.isfinite(c) else 1.0,
                rate if math.isfinite(rate) and rate > 0 else 1.0),
            note="offset refit (log-linear pass fit poorly)")
        if refit is not None:
            return refit

    return DecayFit(model="exponential", t_grid=t, observed=values, c=c,
                    ell=ell, rate=rate, c_ci=(math.exp(lo), math.exp(hi)),
                    rate_ci=_ci_from_se(rate, se_slope, dof),
                    r_squared=r2, noise_floor=floor, n_usable=n_usable,
                    indeterminate=False)


def _theta_flow(spec, theta: EmpiricalMeasure | None,
                mu_star: EmpiricalMeasure | None, t_max: float, dt: float,
                n_particles: int, seed: int) -> MeasureFlow:
    """Forward law on [0, t_max]: the interacting-particle flow from
    theta, or the stationary law held constant when theta is None."""
    if theta is None:
        if mu_star is None:
            raise ValueError("need either theta or a stationary law")
        return MeasureFlow.constant(mu_star, 0.0, t_max)
    res = simulate_mv(spec, theta, dt=dt, T=t_max, n_particles=n_particles,
                      seed=seed)
    return res.flow


def _horizon_solves(spec, flow: MeasureFlow, x0, t_grid, dt, n_particles,
                    degree, solve_seed) -> list[BsdeSolution]:
    return [solve_finite_bsde(spec, flow, x0, T=float(T), dt=dt,
                              n_particles=n_particles, degree=degree,
                              seed=solve_seed)
            for T in t_grid]


def _noise_floor(spec, flow, x0, t_max, dt, n_particles, degree, seed,
                 readout) -> float:
    """Spread of the largest-horizon readout under three fresh seeds."""
    vals = [readout(solve_finite_bsde(spec, flow, x0, T=t_max, dt=dt,
                                      n_particles=n_particles, degree=degree,
                                      seed=derive_seed(seed, 900 + j)))
            for j in range(3)]
    return float(np.std(vals, ddof=1))


def ltb1_experiment(spec, lam: float, t_grid=(5.0, 10.0, 20.0), x0=0.0,
                    theta: EmpiricalMeasure | None = None, dt: float = 0.01,
                    n_particles: int = 10_000, degree: int | None = None,
                    seed: int = 0) -> DecayFit:
    """Value slope vs the long-run average: fit |Y0/T - lam| to c/T.

    ``lam`` should come from an estimate at the same step size, so the
    discretization bias cancels in the residual. theta=None starts the
    forward law from a point mass at the origin.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    if theta is None:
        theta = EmpiricalMeasure.dirac(np.zeros(spec.dim))
    flow = _theta_flow(spec, theta, None, float(t_grid[-1]), dt, n_particles,
                       derive_seed(seed, 7))
    sols = _horizon_solves(spec, flow, x0, t_grid, dt, n_particles, degree,
                           derive_seed(seed, 3))
    y0 = np.array([s.y0 for s in sols])
    resid = np.abs(y0 / t_grid - lam)
    return _fit_inverse_time(t_grid, resid)


def ltb2_experiment(spec, erg: ErgodicSolution, lam: float | None = None,
                    t_grid=(2.0, 4.0, 6.0, 8.0), x0=0.0,
                    theta: EmpiricalMeasure | None = None, dt: float = 0.01,
                    n_particles: int = 10_000, degree: int | None = None,
                    seed: int = 0) -> DecayFit:
    """Centered value offset: v_T = Y0 - lam T - u_bar(x0) over the grid.

    The log-linear pass anchors the offset at the largest horizon's value
    and fits the remaining deviations; when those sit in the noise, the
    offset is freed instead. theta=None freezes the forward law at the
    stationary one.
    """
    if lam is None:
        lam = erg.lambda_
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    x0v = np.asarray(x0, dtype=float).reshape(-1)
    flow = _theta_flow(spec, theta, erg.mu_star, float(t_grid[-1]), dt,
                       n_particles, derive_seed(seed, 7))
    sols = _horizon_solves(spec, flow, x0v, t_grid, dt, n_particles, degree,
                           derive_seed(seed, 3))
    ubar_x0 = float(erg.u_bar(0.0, x0v)[0])
    y0 = np.array([s.y0 for s in sols])
    v = y0 - lam * t_grid - ubar_x0
    floor = _noise_floor(spec, flow, x0v, float(t_grid[-1]), dt, n_particles,
                         degree, seed, readout=lambda s: s.y0)
    return _fit_exponential(t_grid, v, floor, ell=float(v[-1]),
                            anchored=v[:-1] - v[-1], anchored_t=t_grid[:-1])


def ltb3_experiment(spec, erg: ErgodicSolution, t_grid=(1.0, 2.0, 3.0, 4.0),
                    x0=1.0, theta: EmpiricalMeasure | None = None,
                    dt: float = 0.01, n_particles: int = 10_000,
                    degree: int | None = None, seed: int = 0) -> DecayFit:
    """Z-readout convergence: the finite-horizon z at (0, x0) against the
    stationary z-field, both through the gradient representation, fit to
    c exp(-rate T)."""
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    x0v = np.asarray(x0, dtype=float).reshape(-1)
    flow = _theta_flow(spec, theta, erg.mu_star, float(t_grid[-1]), dt,
                       n_particles, derive_seed(seed, 7))
    sols = _horizon_solves(spec, flow, x0v, t_grid, dt, n_particles, degree,
                           derive_seed(seed, 3))

    mu0 = flow.at_time(0.0)
    sig = spec.diffusion_at(x0v[None, :], mu0)
    grad_bar = erg.u_bar.gradient(0.0, x0v)
    z_bar = np.einsum("nj,njk->nk", grad_bar, sig)[0]

    gap = np.array([np.linalg.norm(
        z_from_gradient(s, spec, flow, 0.0, x0v)[0] - z_bar) for s in sols])

    def z_readout(s):
        return float(np.linalg.norm(
            z_from_gradient(s, spec, flow, 0.0, x0v)[0] - z_bar))

    floor = _noise_floor(spec, flow, x0v, float(t_grid[-1]), dt, n_particles,
                         degree, seed, readout=z_readout)
    return _fit_exponential(t_grid, gap, floor, ell=0.0)
