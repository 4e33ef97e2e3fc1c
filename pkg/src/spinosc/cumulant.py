"""Gaussian moment closure for the monitored spin-oscillator.

Closing the conditional dynamics at second order in x = (z, p, Jz) gives
stochastic mean equations driven by the measurement noise,

    d<z>  = <p>/m dt               + sqrt(8k) C_zz  dW
    d<p>  = (-m w^2 <z> - b <Jz>) dt + sqrt(8k) C_zp  dW
    d<Jz> =                          sqrt(8k) C_zJz dW

and a deterministic matrix Riccati flow for the symmetrized covariance:

    dC/dt = A C + C A^T + D - 8k c c^T,
    A = [[0, 1/m, 0], [-m w^2, 0, -b], [0, 0, 0]],
    D = diag(0, 2 hbar^2 k, 0),   c = first column of C.

D is the measurement back-action: the z^2 term in the dynamics feeds
momentum diffusion only ([z, [z, p^2]] = -2 hbar^2).  The covariance flow is
noise-independent: for b = 0 the state stays Gaussian and the closure is
exact, so conditional covariances of the full quantum trajectory must match
it to integrator error regardless of the noise path.

Means advance by Euler-Maruyama with the step-entry covariance; the
covariance advances by classic fourth-order Runge-Kutta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hilbert import ModelParams

__all__ = [
    "PsdViolationError",
    "MomentState",
    "CumulantSeries",
    "initial_moments",
    "covariance_rhs",
    "mean_step",
    "run_cumulant",
]

# Relative (to trace) eigenvalue floor: more negative than the first is
# repaired by clipping, more negative than the second aborts.
_PSD_CLIP = -1e-10
_PSD_ABORT = -1e-6

_SYMMETRY_TOL = 1e-12


class PsdViolationError(RuntimeError):
    """Covariance lost positive semidefiniteness beyond the repair floor."""


@dataclass
class MomentState:
    """First and second moments of (z, p, Jz), physical units.

    ``cov`` is the symmetrized covariance matrix; it must be symmetric and
    positive semidefinite up to the documented floors.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (3,):
            raise ValueError(f"mean must be a 3-vector, got {mean.shape}")
        if cov.shape != (3, 3):
            raise ValueError(f"cov must be 3x3, got {cov.shape}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > _SYMMETRY_TOL * scale:
            raise ValueError("cov must be symmetric")
        self.mean = mean
        self.cov = 0.5 * (cov + cov.T)

    def copy(self) -> "MomentState":
        return MomentState(self.mean.copy(), self.cov.copy())


def initial_moments(
    params: ModelParams, z0: float = 0.0, p0: float = 0.0
) -> MomentState:
    """Moments of the standard initial product state (coherent x spin along +x)."""
    mean = np.array([z0, p0, 0.0])
    cov = np.diag(
        [params.z_g**2, params.p_g**2, params.J * params.hbar**2 / 2.0]
    )
    return MomentState(mean, cov)


def _drift_matrix(params: ModelParams) -> np.ndarray:
    return np.array(
        [
            [0.0, 1.0 / params.m, 0.0],
            [-params.m * params.omega**2, 0.0, -params.b],
            [0.0, 0.0, 0.0],
        ]
    )


def covariance_rhs(cov: np.ndarray, params: ModelParams) -> np.ndarray:
    """Riccati right-hand side dC/dt at covariance ``cov``."""
    a = _drift_matrix(params)
    d = np.diag([0.0, 2.0 * params.hbar**2 * params.k, 0.0])
    c = cov[:, 0]
    return a @ cov + cov @ a.T + d - 8.0 * params.k * np.outer(c, c)


def mean_step(
    state: MomentState, params: ModelParams, dt: float, dw: float
) -> np.ndarray:
    """Euler-Maruyama update of the means using the entry covariance."""
    z, p, jz = state.mean
    czz, czp, czjz = state.cov[0, 0], state.cov[0, 1], state.cov[0, 2]
    root = math.sqrt(8.0 * params.k)
    return np.array(
        [
            z + p / params.m * dt + root * czz * dw,
            p + (-params.m * params.omega**2 * z - params.b * jz) * dt + root * czp * dw,
            jz + root * czjz * dw,
        ]
    )


def _rk4_cov(cov: np.ndarray, params: ModelParams, dt: float) -> np.ndarray:
    k1 = covariance_rhs(cov, params)
    k2 = covariance_rhs(cov + 0.5 * dt * k1, params)
    k3 = covariance_rhs(cov + 0.5 * dt * k2, params)
    k4 = covariance_rhs(cov + dt * k3, params)
    return cov + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _enforce_psd(cov: np.ndarray, t: float, clip_count: list[int]) -> np.ndarray:
    scale = max(float(np.abs(cov).max()), 1e-300)
    asym = np.abs(cov - cov.T).max()
    if asym > _SYMMETRY_TOL * scale:
        raise PsdViolationError(f"covariance asymmetry {asym:.3e} at t = {t:.6g}")
    cov = 0.5 * (cov + cov.T)
    evals, vecs = np.linalg.eigh(cov)
    trace = max(float(np.trace(cov)), 1e-300)
    floor = evals.min() / trace
    if floor < _PSD_ABORT:
        raise PsdViolationError(
            f"covariance eigenvalue {evals.min():.3e} (relative {floor:.2e}) at t = {t:.6g}"
        )
    if floor < _PSD_CLIP:
        clip_count[0] += 1
        cov = (vecs * np.clip(evals, 0.0, None)) @ vecs.T
    return cov


@dataclass
class CumulantSeries:
    """Sampled closure trajectory in display units (z_g, p_g, hbar); times in simulation units.

    Rows sit at step boundaries j * sample_stride * dt including t = 0, the
    same convention as the explicit-scheme quantum records; ``dy_rate`` pairs
    with the step-entry mean like theirs.  ``psd_clips`` counts covariance
    eigenvalue repairs (clips to 0 within the floor).
    """

    times: np.ndarray
    dy_rate: np.ndarray
    z_mean: np.ndarray
    p_mean: np.ndarray
    jz_mean: np.ndarray
    czz: np.ndarray
    czp: np.ndarray
    cpp: np.ndarray
    czjz: np.ndarray
    cpjz: np.ndarray
    cjzjz: np.ndarray
    dt: float = 0.0
    sample_stride: int = 1
    seed: int | None = None
    params: ModelParams | None = None
    psd_clips: int = 0
    final: MomentState | None = None


def run_cumulant(
    initial: MomentState,
    params: ModelParams,
    dt: float,
    t_final: float,
    noise,
    sample_stride: int = 1,
) -> CumulantSeries:
    """Integrate the closure and sample it on the boundary grid.

    ``noise`` is a :class:`spinosc.sse.NoiseStream` or an array of standard
    normals, exactly as for the quantum integrators, so a shared Brownian
    path can drive both for pathwise comparison.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if sample_stride < 1:
        raise ValueError("sample_stride must be >= 1")
    n_steps = max(1, int(round(t_final / dt)))

    if hasattr(noise, "normals"):
        xi = noise.normals(n_steps)
        seed = noise.seed
    else:
        xi = np.asarray(noise, dtype=float)
        seed = None
        if xi.ndim != 1 or len(xi) < n_steps:
            raise ValueError(f"need at least {n_steps} standard normals, got {xi.shape}")

    sqrt_dt = math.sqrt(dt)
    sqrt8k = math.sqrt(8.0 * params.k) if params.k > 0 else 0.0

    n_rows = 1 + n_steps // sample_stride
    times = dt * sample_stride * np.arange(n_rows)
    cols = {
        name: np.empty(n_rows)
        for name in (
            "dy_rate", "z_mean", "p_mean", "jz_mean",
            "czz", "czp", "cpp", "czjz", "cpjz", "cjzjz",
        )
    }

    state = initial.copy()
    clip_count = [0]
    window_dy = 0.0

    def write(row: int) -> None:
        p = params
        cols["z_mean"][row] = state.mean[0] / p.z_g
        cols["p_mean"][row] = state.mean[1] / p.p_g
        cols["jz_mean"][row] = state.mean[2] / p.hbar
        cols["czz"][row] = state.cov[0, 0] / p.z_g**2
        cols["czp"][row] = state.cov[0, 1] / (p.z_g * p.p_g)
        cols["cpp"][row] = state.cov[1, 1] / p.p_g**2
        cols["czjz"][row] = state.cov[0, 2] / (p.z_g * p.hbar)
        cols["cpjz"][row] = state.cov[1, 2] / (p.p_g * p.hbar)
        cols["cjzjz"][row] = state.cov[2, 2] / p.hbar**2

    write(0)
    cols["dy_rate"][0] = 0.0 if params.k > 0 else np.nan
    row = 1

    for i in range(1, n_steps + 1):
        dw = xi[i - 1] * sqrt_dt
        if params.k > 0:
            window_dy += state.mean[0] * dt + dw / sqrt8k
        new_mean = mean_step(state, params, dt, dw)
        new_cov = _enforce_psd(_rk4_cov(state.cov, params, dt), i * dt, clip_count)
        state = MomentState(new_mean, new_cov)
        if i % sample_stride == 0:
            write(row)
            width = times[row] - times[row - 1]
            cols["dy_rate"][row] = window_dy / width / params.z_g if params.k > 0 else np.nan
            window_dy = 0.0
            row += 1

    return CumulantSeries(
        times=times,
        dt=dt,
        sample_stride=sample_stride,
        seed=seed,
        params=params,
        psd_clips=clip_count[0],
        final=state,
        **cols,
    )
