"""Forward simulation by Euler-Maruyama: the interacting-particle system
with the empirical measure fed back into the coefficients, the decoupled
equation against a frozen measure flow, and bounded drift shifts of
Girsanov type.

Noise contract: the Gaussian increment block of time step k is a pure
function of (seed, k) through a counter-based generator, with one row per
particle. Any consumer can regenerate any step's increments without
storing them, and results are independent of how particles are scheduled
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ergolab.measure import (ASSIGNMENT_LIMIT, EmpiricalMeasure, MeasureFlow,
                             wasserstein)

__all__ = [
    "INIT_DRAW_STEP",
    "BlowUpError",
    "DriftShift",
    "Ensemble",
    "PathBundle",
    "MVResult",
    "ContractionFit",
    "gaussian_increments",
    "derive_seed",
    "simulate_mv",
    "simulate_decoupled",
    "flow_property_check",
    "contraction_rate",
]

# Counter position reserved for time-zero draws; step indices stay well
# below this (the node-budget guard elsewhere caps them at 1e7).
INIT_DRAW_STEP = 2 ** 64 - 1


class BlowUpError(RuntimeError):
    """A state coordinate left the floats. Carries the offending step."""

    def __init__(self, step: int, time: float, detail: str = ""):
        self.step = step
        self.time = time
        msg = f"non-finite state at step {step} (t = {time:.6g})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def gaussian_increments(seed: int, step: int, n: int, dim: int,
                        channels: int = 1) -> np.ndarray:
    """Standard-normal block for one time step: shape (n, dim), or
    (n, channels, dim) when several independent noise sources are needed
    per step. Deterministic in (seed, step): row i is particle i's draw."""
    if seed < 0 or step < 0:
        raise ValueError("seed and step must be nonnegative")
    rng = np.random.Generator(np.random.Philox(key=_philox_key(seed, step)))
    block = rng.standard_normal((n, channels, dim))
    return block[:, 0, :] if channels == 1 else block


def _philox_key(seed: int, step: int) -> np.ndarray:
    return np.array([seed, step], dtype=np.uint64)


def derive_seed(seed: int, tag: int) -> int:
    """Independent child stream seed for (seed, tag), stable across runs."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0]
               >> np.uint64(1))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """A particle cloud at one instant, with the RNG cursor needed to
    continue its noise streams."""

    time: float
    states: np.ndarray
    rng_cursor: tuple[int, int]  # (seed, next step index)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"states must be (N, d) with N >= 1, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite states in ensemble")
        object.__setattr__(self, "states", s)

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """States of N particles on a recorded time grid. Together with the
    seed this reproduces every Brownian increment, so nothing else about
    the noise is stored."""

    times: np.ndarray
    states: np.ndarray  # (M+1, N, d)
    seed: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 3 or s.shape[0] != t.shape[0]:
            raise ValueError("states must be (len(times), N, d)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def index_of(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def states_at(self, t: float) -> np.ndarray:
        return self.states[self.index_of(t)]

    def ensemble_at(self, t: float) -> Ensemble:
        i = self.index_of(t)
        return Ensemble(float(self.times[i]), self.states[i],
                        (self.seed, i))

    @property
    def terminal(self) -> Ensemble:
        return self.ensemble_at(float(self.times[-1]))

    def measure_at(self, t: float) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states_at(t))

    def to_csv(self, path) -> None:
        m, n, d = self.states.shape
        step = np.repeat(np.arange(m), n)
        time = np.repeat(self.times, n)
        part = np.tile(np.arange(n), m)
        flat = self.states.reshape(m * n, d)
        out = np.column_stack([step, time, part, flat])
        header = "step,time,particle," + ",".join(f"x{j}" for j in range(d))
        np.savetxt(path, out, delimiter=",", header=header, comments="",
                   fmt=["%d", "%.17g", "%d"] + ["%.17g"] * d)


@dataclass(frozen=True, eq=False)
class DriftShift:
    """Bounded measurable drift shift beta(t, x, mu), entering the dynamics
    as sigma(x, mu)(beta dt + dW). The declared sup bound is enforced on
    every evaluation."""

    fn: Callable[[float, np.ndarray, EmpiricalMeasure], np.ndarray]
    bound: float

    def __call__(self, t: float, x: np.ndarray,
                 mu: EmpiricalMeasure) -> np.ndarray:
        out = np.asarray(self.fn(t, x, mu), dtype=float)
        out = np.broadcast_to(out, x.shape)
        worst = float(np.max(np.linalg.norm(out, axis=1)))
        if worst > self.bound + 1e-9:
            raise ValueError(
                f"drift shift reached |beta| = {worst:.6g}, above its "
                f"declared bound {self.bound:.6g}")
        return out


@dataclass(frozen=True, eq=False)
class MVResult:
    bundle: PathBundle
    flow: MeasureFlow


@dataclass(frozen=True, eq=False)
class ContractionFit:
    """Synchronous-coupling Wasserstein decay and its fitted exponential
    rate. ``note`` records truncation or degeneracy; ``rate`` is NaN when
    fewer than two usable nodes remain."""

    rate: float
    times: np.ndarray
    w_values: np.ndarray
    p: int
    truncated_at: float | None = None
    note: str = ""


def _steps_for(T: float, dt: float) -> int:
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if T < dt:
        raise ValueError(f"horizon {T} shorter than one step {dt}")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon {T} is not a whole number of steps of {dt}")
    return n


def _sigma_dot(sig: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """sigma @ v per particle; sig is (d, d) or (N, d, d), vec is (N, d)."""
    if sig.ndim == 2:
        return vec @ sig.T
    return np.einsum("nij,nj->ni", sig, vec)


def _check_finite(x: np.ndarray, step: int, t: float) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.sum(~np.isfinite(x).all(axis=1)))
        raise BlowUpError(step, t, f"{bad} particle(s) non-finite")


def draw_initial(theta: EmpiricalMeasure, n_particles: int,
                 seed: int) -> np.ndarray:
    """n_particles i.i.d. draws from an empirical measure, from the
    reserved time-zero counter position."""
    rng = np.random.Generator(np.random.Philox(key=_philox_key(seed, INIT_DRAW_STEP)))
    if theta.n_atoms == 1:
        return np.tile(theta.points[0], (n_particles, 1))
    idx = rng.choice(theta.n_atoms, size=n_particles,
                     p=None if theta.is_uniform else theta.weights)
    return theta.points[idx].copy()


def iter_mv(spec, states: np.ndarray, dt: float, n_steps: int, seed: int,
            t0: float = 0.0) -> Iterator[tuple[int, float, np.ndarray, EmpiricalMeasure]]:
    """Advance the interacting-particle system in place, yielding
    (step, time, states, measure) before the first step and after each
    one. The yielded array is the live buffer: copy before storing."""
    x = np.array(states, dtype=float)
    n, d = x.shape
    mu = EmpiricalMeasure(x.copy())
    yield 0, t0, x, mu
    for k in range(n_steps):
        t = t0 + k * dt
        b = spec.drift(t, x, mu)
        sig = np.asarray(spec.diffusion(x, mu), dtype=float)
        dw = math.sqrt(dt) * gaussian_increments(seed, k, n, d)
        x += b * dt + _sigma_dot(sig, dw)
        _check_finite(x, k + 1, t + dt)
        mu = EmpiricalMeasure(x.copy())
        yield k + 1, t + dt, x, mu


def simulate_mv(spec, theta: EmpiricalMeasure, dt: float, T: float,
                n_particles: int, seed: int,
                record_every: int = 1) -> MVResult:
    """Interacting-particle Euler scheme: the ensemble's own empirical
    measure replaces the law in drift and diffusion. Initial states are
    i.i.d. draws from theta. Records every ``record_every``-th node (the
    terminal node always included) into the bundle and the measure flow."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if theta.dim != spec.dim:
        raise ValueError(f"theta is {theta.dim}-dimensional, model wants {spec.dim}")
    n_steps = _steps_for(T, dt)
    record_every = max(int(record_every), 1)
    x0 = draw_initial(theta, n_particles, seed)

    rec_times, rec_states = [], []
    for k, t, x, _mu in iter_mv(spec, x0, dt, n_steps, seed):
        if k % record_every == 0 or k == n_steps:
            rec_times.append(t)
            rec_states.append(x.copy())
    bundle = PathBundle(np.array(rec_times), np.stack(rec_states), seed)
    # flow nodes view the bundle's storage rather than holding copies
    flow = MeasureFlow(bundle.times,
                       [EmpiricalMeasure(bundle.states[i])
                        for i in range(bundle.times.shape[0])])
    return MVResult(bundle=bundle, flow=flow)


def _as_states(x0, n_particles: int, dim: int) -> np.ndarray:
    if isinstance(x0, Ensemble):
        x0 = x0.states
    arr = np.asarray(x0, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"x0 has dimension {arr.shape[0]}, model wants {dim}")
        return np.tile(arr, (n_particles, 1))
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ValueError(f"x0 states are {arr.shape[1]}-dimensional, "
                             f"model wants {dim}")
        return arr.copy()
    raise ValueError(f"x0 must be a point or an (N, d) cloud, got shape {arr.shape}")


def _check_flow_alignment(flow: MeasureFlow, dt: float) -> None:
    gaps = np.diff(flow.times)
    ratio = gaps / dt
    if np.any(np.abs(ratio - np.round(ratio)) > 1e-6):
        raise ValueError("flow grid spacing is not a whole multiple of dt")


def iter_decoupled(spec, states: np.ndarray, flow: MeasureFlow, dt: float,
                   n_steps: int, seed: int, shift: DriftShift | None = None,
                   t0: float = 0.0) -> Iterator[tuple[int, float, np.ndarray]]:
    """Advance the decoupled system: coefficients read the frozen flow,
    never the simulated cloud. Step k consumes the (seed, k0+k) noise
    block where k0 aligns t0 to the global step grid, so restarted
    segments keep disjoint, reproducible streams."""
    x = np.array(states, dtype=float)
    n, d = x.shape
    k0 = int(round(t0 / dt))
    yield 0, t0, x
    for k in range(n_steps):
        t = t0 + k * dt
        mu = flow.at_time(t)
        b = spec.drift(t, x, mu)
        sig = np.asarray(spec.diffusion(x, mu), dtype=float)
        dw = math.sqrt(dt) * gaussian_increments(seed, k0 + k, n, d)
        if shift is not None:
            dw = dw + shift(t, x, mu) * dt
        x += b * dt + _sigma_dot(sig, dw)
        _check_finite(x, k + 1, t + dt)
        yield k + 1, t + dt, x


def simulate_decoupled(spec, x0, flow: MeasureFlow, dt: float, T: float,
                       n_particles: int, seed: int,
                       shift: DriftShift | None = None, t0: float = 0.0,
                       record_every: int = 1) -> PathBundle:
    """Euler scheme for the decoupled equation on [t0, t0+T] with the
    measure argument frozen to ``flow`` (piecewise constant in time).
    ``x0`` is a single state (replicated), an (N, d) cloud, or an
    Ensemble; with ``shift`` present the drift gains sigma*beta."""
    n_steps = _steps_for(T, dt)
    states = _as_states(x0, n_particles, spec.dim)
    if not flow.covers(t0, t0 + T):
        raise ValueError(
            f"flow covers [{flow.t0:.6g}, {flow.t1:.6g}] but the run needs "
            f"[{t0:.6g}, {t0 + T:.6g}]")
    _check_flow_alignment(flow, dt)
    record_every = max(int(record_every), 1)

    rec_times, rec_states = [], []
    for k, t, x in iter_decoupled(spec, states, flow, dt, n_steps, seed,
                                  shift=shift, t0=t0):
        if k % record_every == 0 or k == n_steps:
            rec_times.append(t)
            rec_states.append(x.copy())
    return PathBundle(np.array(rec_times), np.stack(rec_states), seed)


def _w_capped(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: int) -> float:
    if mu.dim == 1:
        return wasserstein(mu, nu, p)
    take = min(mu.n_atoms, nu.n_atoms, ASSIGNMENT_LIMIT)
    return wasserstein(EmpiricalMeasure(mu.points[:take]),
                       EmpiricalMeasure(nu.points[:take]), p)


def flow_property_check(spec, theta: EmpiricalMeasure, s: float, T: float,
                        dt: float, n: int, seed: int) -> float:
    """Restart consistency of the decoupled equation: run the interacting
    system to T, restart the decoupled equation at time s from the
    ensemble X_s against the same flow with fresh noise, and return the
    W2 distance between the two time-T clouds. Zero in law; the sampled
    value sits at Monte Carlo scale."""
    if not 0.0 < s < T:
        raise ValueError(f"need 0 < s < T, got s={s}, T={T}")
    mv = simulate_mv(spec, theta, dt, T, n, seed)
    x_s = mv.bundle.states_at(s)
    restart = simulate_decoupled(spec, x_s, mv.flow, dt, T - s, n,
                                 derive_seed(seed, 101), t0=s,
                                 record_every=max(int(round((T - s) / dt)), 1))
    return _w_capped(mv.bundle.measure_at(T), restart.measure_at(T), 2)


def contraction_rate(spec, theta: EmpiricalMeasure,
                     theta_prime: EmpiricalMeasure, dt: float, T: float,
                     n: int, seed: int, p: int = 2) -> ContractionFit:
    """Wasserstein contraction between two interacting systems driven by
    the same increments (synchronous coupling), from two initial laws.
    Fits log W_p against time by least squares and returns the decay rate
    as a positive number. Nodes where W_p falls below 1e-8 are dropped
    and the fit is marked truncated."""
    n_steps = _steps_for(T, dt)
    xa = draw_initial(theta, n, seed)
    xb = draw_initial(theta_prime, n, seed)
    gen_a = iter_mv(spec, xa, dt, n_steps, seed)
    gen_b = iter_mv(spec, xb, dt, n_steps, seed)

    times = np.empty(n_steps + 1)
    w = np.empty(n_steps + 1)
    for (k, t, _x, mu_a), (_k, _t, _xb, mu_b) in zip(gen_a, gen_b):
        times[k] = t
        w[k] = _w_capped(mu_a, mu_b, p)

    floor = 1e-8
    alive = w >= floor
    truncated_at = None
    note = ""
    if not np.all(alive):
        first_dead = int(np.argmax(~alive))
        truncated_at = float(times[first_dead])
        alive[first_dead:] = False
        note = (f"W_{p} fell below {floor:g} at t = {truncated_at:.6g}; "
                "fit truncated there")
    if int(alive.sum()) < 2:
        return ContractionFit(rate=math.nan, times=times, w_values=w, p=p,
                              truncated_at=truncated_at,
                              note=note or "degenerate: too few usable nodes")
    slope = np.polyfit(times[alive], np.log(w[alive]), 1)[0]
    return ContractionFit(rate=float(-slope), times=times, w_values=w, p=p,
                          truncated_at=truncated_at, note=note)
