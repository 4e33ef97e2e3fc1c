"""Classical reference dynamics for the spin-oscillator.

The classical limit replaces the spin by a fixed-length angular-momentum
vector S (|S| = J hbar) and the motional state by a phase-space point:

    dz/dt = p/m
    dp/dt = -m omega^2 z - b S_z
    dS/dt = b z (zhat x S)

The integrator splits the flow into a kick (p and S at fixed z) and a drift
(z at fixed p), composed symmetrically, so it is symplectic and conserves
|S| exactly (the spin update is a rotation about zhat).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hilbert import ModelParams

__all__ = [
    "ClassicalState",
    "ClassicalRecord",
    "matched_classical_state",
    "classical_step",
    "run_classical",
]


@dataclass
class ClassicalState:
    """Phase-space point: position, momentum, spin vector (physical units)."""

    z: float
    p: float
    S: np.ndarray

    def __post_init__(self) -> None:
        S = np.asarray(self.S, dtype=float)
        if S.shape != (3,):
            raise ValueError(f"S must be a 3-vector, got shape {S.shape}")
        self.S = S

    def copy(self) -> "ClassicalState":
        return ClassicalState(self.z, self.p, self.S.copy())

    def energy(self, params: ModelParams) -> float:
        return (
            self.p**2 / (2 * params.m)
            + 0.5 * params.m * params.omega**2 * self.z**2
            + params.b * self.z * self.S[2]
        )


@dataclass
class ClassicalRecord:
    """Sampled classical trace in display units: z/z_g, p/p_g, S/hbar."""

    times: np.ndarray
    z: np.ndarray
    p: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray


def matched_classical_state(
    params: ModelParams,
    z0: float = 0.0,
    p0: float = 0.0,
    theta: float = math.pi / 2,
    phi: float = 0.0,
) -> ClassicalState:
    """Classical state matching the quantum product state's means."""
    s = params.J * params.hbar
    S = np.array(
        [s * math.sin(theta) * math.cos(phi), s * math.sin(theta) * math.sin(phi), s * math.cos(theta)]
    )
    return ClassicalState(z0, p0, S)


def _kick(state: ClassicalState, params: ModelParams, dt: float) -> None:
    """Advance p and S at fixed z for time dt (exact for this sub-flow).

    S_z is invariant under the rotation about zhat, so the momentum kick and
    the spin rotation commute within the sub-step.
    """
    state.p -= (params.m * params.omega**2 * state.z + params.b * state.S[2]) * dt
    angle = params.b * state.z * dt
    c, s = math.cos(angle), math.sin(angle)
    sx, sy = state.S[0], state.S[1]
    state.S[0] = c * sx - s * sy
    state.S[1] = s * sx + c * sy


def classical_step(state: ClassicalState, params: ModelParams, dt: float) -> ClassicalState:
    """One symmetric kick-drift-kick step of size dt."""
    out = state.copy()
    _kick(out, params, dt / 2)
    out.z += out.p / params.m * dt
    _kick(out, params, dt / 2)
    return out


def run_classical(
    initial: ClassicalState,
    params: ModelParams,
    dt: float,
    n_steps: int | None = None,
    sample_stride: int = 1,
    sample_times: np.ndarray | None = None,
) -> ClassicalRecord:
    """Integrate and sample the classical trajectory.

    Either ``n_steps`` (uniform grid, sampled every ``sample_stride`` steps,
    including t = 0) or explicit ``sample_times`` must be given.  With
    ``sample_times`` the integrator lands on each requested time exactly,
    using uniform sub-steps of size at most ``dt`` between consecutive
    samples; a leading t = 0 sample is honored if present.
    """
    if (n_steps is None) == (sample_times is None):
        raise ValueError("give exactly one of n_steps or sample_times")
    if dt <= 0:
        raise ValueError("dt must be positive")

    if sample_times is None:
        times = dt * sample_stride * np.arange(n_steps // sample_stride + 1)
        state = initial.copy()
        rows = [_row(state, params)]
        for i in range(1, n_steps + 1):
            state = classical_step(state, params, dt)
            if i % sample_stride == 0:
                rows.append(_row(state, params))
        times = times[: len(rows)]
    else:
        times = np.asarray(sample_times, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("sample_times must be a nonempty 1-d array")
        if np.any(np.diff(times) <= 0) or times[0] < 0:
            raise ValueError("sample_times must be strictly increasing and nonnegative")
        state = initial.copy()
        rows = []
        t_now = 0.0
        for t_target in times:
            span = t_target - t_now
            if span > 1e-15 * max(1.0, t_target):
                n_sub = max(1, math.ceil(span / dt - 1e-12))
                h = span / n_sub
                for _ in range(n_sub):
                    state = classical_step(state, params, h)
            t_now = t_target
            rows.append(_row(state, params))

    arr = np.array(rows)
    return ClassicalRecord(
        times=times,
        z=arr[:, 0],
        p=arr[:, 1],
        sx=arr[:, 2],
        sy=arr[:, 3],
        sz=arr[:, 4],
    )


def _row(state: ClassicalState, params: ModelParams) -> list[float]:
    return [
        state.z / params.z_g,
        state.p / params.p_g,
        state.S[0] / params.hbar,
        state.S[1] / params.hbar,
        state.S[2] / params.hbar,
    ]
