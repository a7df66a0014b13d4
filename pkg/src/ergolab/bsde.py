"""Finite-horizon BSDE solver: backward least-squares Monte Carlo on a
cloud of decoupled forward paths, with the driver's z-argument handled by
control-variate regression and Picard iteration at each node.

The conditional expectations are projected onto monomials in standardized
coordinates, refreshed node by node; the Brownian increments are never
stored — each node regenerates its block from (seed, step).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ergolab.measure import EmpiricalMeasure, MeasureFlow
from ergolab.sde import (INIT_DRAW_STEP, gaussian_increments, simulate_decoupled,
                         _steps_for)

__all__ = [
    "BasisDegeneracyError",
    "OffGridWarning",
    "RegressionFunction",
    "BsdeSolution",
    "monomial_exponents",
    "solve_finite_bsde",
    "backward_lsmc",
    "z_from_gradient",
]

_RIDGE = 1e-10
_COND_LIMIT = 1e12


class BasisDegeneracyError(RuntimeError):
    """Regression design matrix effectively singular at some node."""

    def __init__(self, node: int, cond: float):
        self.node = node
        self.cond = cond
        super().__init__(
            f"regression basis degenerate at node {node} "
            f"(condition estimate {cond:.3g})")


class OffGridWarning(UserWarning):
    """A time query landed between nodes; the nearest one was used."""


def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponent rows of all monomials with total degree <= degree,
    graded lexicographic."""
    rows = [[]]
    for _ in range(dim):
        rows = [r + [k] for r in rows for k in range(degree + 1)]
    arr = np.array([r for r in rows if sum(r) <= degree], dtype=int)
    return arr[np.argsort(arr.sum(axis=1), kind="stable")]


def _design(u: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """(N, n_basis) monomial matrix at standardized points u of shape (N, d)."""
    n, d = u.shape
    # per-dimension power tables keep this at O(N d degree) multiplies
    deg = int(exponents.max()) if exponents.size else 0
    pows = np.ones((d, deg + 1, n))
    for j in range(d):
        for k in range(1, deg + 1):
            pows[j, k] = pows[j, k - 1] * u[:, j]
    cols = [np.prod([pows[j, e[j]] for j in range(d)], axis=0)
            for e in exponents]
    return np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class RegressionFunction:
    """Piecewise-in-time polynomial regression surface.

    Per node: coefficients over monomials of the standardized state
    u = (x - center) / scale. Evaluation picks the nearest time node.
    ``offset`` is subtracted after evaluation (scalar fields only), so an
    anchor value can be zeroed exactly in floating point.
    """

    times: np.ndarray
    coeffs: np.ndarray  # (M+1, n_basis, out_dim)
    exponents: np.ndarray
    centers: np.ndarray  # (M+1, dim)
    scales: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        if self.coeffs.shape[1] != self.exponents.shape[0]:
            raise ValueError("coefficient rows do not match the basis size")
        if self.coeffs.shape[0] != self.times.shape[0]:
            raise ValueError("one coefficient block per time node required")

    @property
    def dim(self) -> int:
        return self.exponents.shape[1]

    @property
    def out_dim(self) -> int:
        return self.coeffs.shape[2]

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max())

    def node_index(self, t: float, warn: bool = False) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if warn:
            step = float(np.min(np.diff(self.times))) if len(self.times) > 1 else 0.0
            if abs(self.times[k] - t) > 0.5 * step + 1e-12:
                warnings.warn(
                    f"time {t:.6g} is off the node grid; using node "
                    f"{k} (t = {self.times[k]:.6g})", OffGridWarning,
                    stacklevel=3)
        return k

    def _pts(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1) if arr.shape[0] == self.dim else arr[:, None]
        return arr

    def eval_node(self, k: int, x) -> np.ndarray:
        pts = self._pts(x)
        u = (pts - self.centers[k]) / self.scales[k]
        out = _design(u, self.exponents) @ self.coeffs[k]
        out = out - self.offset
        return out[:, 0] if self.out_dim == 1 else out

    def __call__(self, t: float, x, warn: bool = False) -> np.ndarray:
        return self.eval_node(self.node_index(t, warn=warn), x)

    def gradient(self, t: float, x, warn: bool = False) -> np.ndarray:
        """Analytic spatial gradient, (N, dim); scalar fields only."""
        if self.out_dim != 1:
            raise ValueError("gradient is defined for scalar fields")
        k = self.node_index(t, warn=warn)
        pts = self._pts(x)
        u = (pts - self.centers[k]) / self.scales[k]
        grad = np.empty_like(pts)
        for j in range(self.dim):
            lowered = self.exponents.copy()
            lowered[:, j] = np.maximum(lowered[:, j] - 1, 0)
            factor = (self.exponents[:, j] / self.scales[k, j])
            grad[:, j] = _design(u, lowered) @ (factor * self.coeffs[k, :, 0])
        return grad

    def with_offset(self, offset: float) -> "RegressionFunction":
        return RegressionFunction(times=self.times, coeffs=self.coeffs,
                                  exponents=self.exponents,
                                  centers=self.centers, scales=self.scales,
                                  offset=offset)

    def to_csv(self, path) -> None:
        m, nb, od = self.coeffs.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# degree={self.degree} dim={self.dim} out_dim={od} "
                     f"offset={self.offset:.17g}\n")
            fh.write("node,time," + ",".join(
                f"c{i}_{j}" for i in range(nb) for j in range(od))
                + "," + ",".join(f"center{j}" for j in range(self.dim))
                + "," + ",".join(f"scale{j}" for j in range(self.dim)) + "\n")
            flat = self.coeffs.reshape(m, nb * od)
            out = np.column_stack([np.arange(m), self.times, flat,
                                   self.centers, self.scales])
            np.savetxt(fh, out, delimiter=",",
                       fmt=["%d"] + ["%.17g"] * (out.shape[1] - 1))


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """LSMC solution: scalar readouts at the queried start point plus the
    full regression surfaces and per-node diagnostics."""

    y0: float
    z0: np.ndarray
    u: RegressionFunction
    zeta: RegressionFunction
    x0: np.ndarray
    dt: float
    seed: int
    residuals: np.ndarray        # per-node RMS of Y_{k+1} around its projection
    picard_gaps: np.ndarray      # (M, picard-1) successive iterate distances
    picard_warning: bool

    def report(self) -> dict:
        out = {"y0": self.y0, "dt": self.dt, "seed": self.seed,
               "picard_warning": int(self.picard_warning),
               "max_residual": float(self.residuals.max(initial=0.0))}
        for j, v in enumerate(np.atleast_1d(self.z0)):
            out[f"z0_{j}"] = float(v)
        return out


class _NodeRegressor:
    """One node's ridge-QR factorization, reused across all its fits."""

    def __init__(self, states: np.ndarray, exponents: np.ndarray, node: int):
        self.center = states.mean(axis=0)
        self.scale = np.maximum(states.std(axis=0), 1e-8)
        u = (states - self.center) / self.scale
        self.basis = _design(u, exponents)
        nb = self.basis.shape[1]
        # degeneracy is judged on the raw design: the ridge would mask it
        # by flooring every pivot at sqrt(_RIDGE)
        raw = np.abs(np.diag(np.linalg.qr(self.basis, mode="r")))
        cond = float(raw.max() / max(raw.min(), 1e-300))
        if cond > _COND_LIMIT:
            raise BasisDegeneracyError(node, cond)
        aug = np.vstack([self.basis, math.sqrt(_RIDGE) * np.eye(nb)])
        self.q, self.r = np.linalg.qr(aug)

    def fit(self, y: np.ndarray) -> np.ndarray:
        """Coefficients for targets y of shape (N,) or (N, m)."""
        rhs = y if y.ndim == 2 else y[:, None]
        pad = np.zeros((self.r.shape[0], rhs.shape[1]))
        qt = self.q.T @ np.vstack([rhs, pad])
        return np.linalg.solve(self.r, qt)

    def predict(self, coeffs: np.ndarray) -> np.ndarray:
        return self.basis @ coeffs


def _spread_cloud(x0: np.ndarray, flow: MeasureFlow, T: float,
                  n_particles: int, seed: int) -> np.ndarray:
    """Regression starts: x0 plus a Gaussian cloud at the scale of the
    flow's terminal spread (pointwise starts make node-0 regressions
    singular)."""
    ref = flow.at_time(T).points
    sd = np.maximum(ref.std(axis=0), 0.1)
    xi = gaussian_increments(seed, INIT_DRAW_STEP, n_particles, x0.shape[0])
    return x0 + sd * xi


def backward_lsmc(spec, bundle_states: np.ndarray, flow: MeasureFlow,
                  dt: float, degree: int, picard: int, seed: int,
                  terminal: Callable | None = None,
                  discount: float = 0.0) -> BsdeSolution:
    """Backward induction over a simulated forward cloud.

    Per node k: project Y_{k+1} onto the basis; estimate Z by regressing
    the control-variate increment (Y_{k+1} - Y_k-candidate) dW / dt;
    update Y_k = (proj + dt f(X_k, mu_k, Z_k)) / (1 + discount dt),
    iterating the Z/Y pair ``picard`` times. Measure arguments always
    come from the frozen flow.
    """
    m_plus_1, n, d = bundle_states.shape
    m = m_plus_1 - 1
    if picard < 1:
        raise ValueError("picard must be >= 1")
    exponents = monomial_exponents(d, degree)
    times = np.arange(m_plus_1) * dt

    g = terminal if terminal is not None else spec.terminal
    mu_T = flow.at_time(times[-1])
    y = np.asarray(g(bundle_states[-1], mu_T), dtype=float)

    nb = exponents.shape[0]
    u_coeffs = np.zeros((m_plus_1, nb, 1))
    z_coeffs = np.zeros((m_plus_1, nb, d))
    centers = np.zeros((m_plus_1, d))
    scales = np.ones((m_plus_1, d))
    residuals = np.zeros(m_plus_1)
    gaps = np.zeros((max(m, 1), max(picard - 1, 0)))
    sqrt_n = math.sqrt(n)

    # terminal node: fit g itself so the surface covers [0, T]
    reg_T = _NodeRegressor(bundle_states[-1], exponents, m)
    u_coeffs[m] = reg_T.fit(y)
    centers[m], scales[m] = reg_T.center, reg_T.scale

    for k in range(m - 1, -1, -1):
        x_k = bundle_states[k]
        mu_k = flow.at_time(times[k])
        reg = _NodeRegressor(x_k, exponents, k)
        centers[k], scales[k] = reg.center, reg.scale

        e_coef = reg.fit(y)
        e_val = reg.predict(e_coef)[:, 0]
        residuals[k] = float(np.linalg.norm(y - e_val) / sqrt_n)

        dw = gaussian_increments(seed, k, n, d) * math.sqrt(dt)
        y_cand = e_val
        z_val = np.zeros((n, d))
        zc = np.zeros((nb, d))
        for j in range(picard):
            zc = reg.fit((y - y_cand)[:, None] * dw / dt)
            z_val = reg.predict(zc)
            f_val = np.asarray(spec.driver(x_k, mu_k, z_val), dtype=float)
            y_new = (e_val + dt * f_val) / (1.0 + discount * dt)
            if j > 0:
                gaps[k, j - 1] = float(np.linalg.norm(y_new - y_cand) / sqrt_n)
            y_cand = y_new
        y = y_cand
        z_coeffs[k] = zc
        u_coeffs[k] = reg.fit(y)

    picard_warning = False
    if picard > 2:
        g0 = gaps[:, :-1]
        g1 = gaps[:, 1:]
        picard_warning = bool(np.any(g1 > 1.1 * g0 + 1e-14))

    u = RegressionFunction(times=times, coeffs=u_coeffs, exponents=exponents,
                           centers=centers, scales=scales)
    zeta = RegressionFunction(times=times, coeffs=z_coeffs,
                              exponents=exponents, centers=centers,
                              scales=scales)
    return BsdeSolution(y0=math.nan, z0=np.full(d, math.nan), u=u, zeta=zeta,
                        x0=np.zeros(d), dt=dt, seed=seed,
                        residuals=residuals, picard_gaps=gaps,
                        picard_warning=picard_warning)


def _with_readout(sol: BsdeSolution, x0: np.ndarray) -> BsdeSolution:
    y0 = float(sol.u.eval_node(0, x0)[0])
    z0 = np.atleast_2d(sol.zeta.eval_node(0, x0))[0]
    return BsdeSolution(y0=y0, z0=z0, u=sol.u, zeta=sol.zeta, x0=x0,
                        dt=sol.dt, seed=sol.seed, residuals=sol.residuals,
                        picard_gaps=sol.picard_gaps,
                        picard_warning=sol.picard_warning)


def solve_finite_bsde(spec, flow: MeasureFlow, x0, T: float, dt: float,
                      n_particles: int, degree: int | None = None,
                      picard: int = 3, seed: int = 0) -> BsdeSolution:
    """Solve the decoupled BSDE on [0, T] and read (Y0, Z0) at x0.

    The forward regression cloud starts from a spread law centered at x0;
    Y0 and Z0 come from the node-0 regressions evaluated at x0 itself.
    """
    c = spec.constants
    if degree is None:
        degree = max(int(c.q) + 1, 3)
    if degree < c.q + 1:
        raise ValueError(
            f"basis degree {degree} cannot represent terminal growth "
            f"q + 1 = {c.q + 1}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != spec.dim:
        raise ValueError(f"x0 has dimension {x0.shape[0]}, model wants {spec.dim}")
    _steps_for(T, dt)
    cloud = _spread_cloud(x0, flow, T, n_particles, seed)
    bundle = simulate_decoupled(spec, cloud, flow, dt=dt, T=T,
                                n_particles=n_particles, seed=seed)
    sol = backward_lsmc(spec, bundle.states, flow, dt, degree, picard, seed)
    return _with_readout(sol, x0)


def z_from_gradient(sol: BsdeSolution, spec, flow: MeasureFlow, t: float,
                    x) -> np.ndarray:
    """Z via the gradient representation: grad_x u(t, x) times the
    diffusion at (x, mu_t). Off-grid times fall to the nearest node with
    an OffGridWarning."""
    pts = sol.u._pts(x)
    grad = sol.u.gradient(t, pts, warn=True)
    sig = spec.diffusion_at(pts, flow.at_time(t))
    return np.einsum("nj,njk->nk", grad, sig)
