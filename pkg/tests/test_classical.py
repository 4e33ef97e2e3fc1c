"""Classical integrator checks: conservation laws and an independent ODE oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from spinosc.classical import (
    ClassicalState,
    classical_step,
    matched_classical_state,
    run_classical,
)
from spinosc.hilbert import ModelParams


PARAMS = ModelParams(J=2.0, k=0.0, delta_z=1.5)
DT = 1e-3 * 2 * math.pi


def test_spin_norm_exactly_conserved():
    state = matched_classical_state(PARAMS, z0=1.0, p0=0.3)
    s0 = np.linalg.norm(state.S)
    for _ in range(5000):
        state = classical_step(state, PARAMS, DT)
    assert np.linalg.norm(state.S) == pytest.approx(s0, rel=1e-14)


def test_energy_bounded_over_many_periods():
    # symplectic scheme: energy error oscillates, no secular drift
    state = matched_classical_state(PARAMS, z0=2.0, p0=0.0)
    e0 = state.energy(PARAMS)
    scale = abs(e0) + PARAMS.hbar * PARAMS.omega
    worst = 0.0
    for i in range(100_000):  # 100 periods
        state = classical_step(state, PARAMS, DT)
        if i % 1000 == 0:
            worst = max(worst, abs(state.energy(PARAMS) - e0) / scale)
    assert worst < 1e-5


def test_uncoupled_oscillator_analytic():
    params = ModelParams(J=0.0, k=0.0, m=1.3, omega=0.8)
    z0, p0 = 0.7, -0.4
    state = ClassicalState(z0, p0, np.zeros(3))
    t_final = 7.0
    n = int(round(t_final / DT))
    t = n * DT
    w = params.omega
    z_exact = z0 * math.cos(w * t) + p0 / (params.m * w) * math.sin(w * t)
    p_exact = p0 * math.cos(w * t) - params.m * w * z0 * math.sin(w * t)

    def end_error(dt, steps):
        rec = run_classical(state, params, dt, n_steps=steps, sample_stride=steps)
        return math.hypot(rec.z[-1] * params.z_g - z_exact, rec.p[-1] * params.p_g - p_exact)

    err_coarse = end_error(DT, n)
    err_fine = end_error(DT / 2, 2 * n)
    assert err_coarse < 2e-5
    # second-order global accuracy: halving dt cuts the error by ~4
    assert err_coarse / err_fine == pytest.approx(4.0, rel=0.15)


def test_matches_high_accuracy_ode_oracle():
    # independent route: adaptive RK on the raw ODEs at tight tolerance
    params = ModelParams(J=1.0, k=0.0, delta_z=1.2, m=1.1, omega=0.9, hbar=0.8)
    init = matched_classical_state(params, z0=0.9, p0=-0.5, theta=1.1, phi=0.4)

    def rhs(_t, y):
        z, p, sx, sy, sz = y
        return [
            p / params.m,
            -params.m * params.omega**2 * z - params.b * sz,
            -params.b * z * sy,
            params.b * z * sx,
            0.0,
        ]

    t_final = 12.0
    sol = solve_ivp(
        rhs,
        (0, t_final),
        [init.z, init.p, *init.S],
        rtol=1e-11,
        atol=1e-13,
        dense_output=True,
    )
    n = int(round(t_final / DT))
    rec = run_classical(init, params, DT, n_steps=n, sample_stride=n // 4)
    for i, t in enumerate(rec.times):
        z_ref, p_ref, sx_ref, sy_ref, sz_ref = sol.sol(t)
        assert rec.z[i] * params.z_g == pytest.approx(z_ref, abs=2e-5)
        assert rec.p[i] * params.p_g == pytest.approx(p_ref, abs=2e-5)
        assert rec.sx[i] * params.hbar == pytest.approx(sx_ref, abs=2e-5)
        assert rec.sy[i] * params.hbar == pytest.approx(sy_ref, abs=2e-5)
        assert rec.sz[i] * params.hbar == pytest.approx(sz_ref, abs=1e-12)


def test_equilibrium_in_lower_well():
    # S along -z puts the well at -delta_z; starting there at rest is stationary
    params = ModelParams(J=1.5, k=0.0, delta_z=2.0)
    state = ClassicalState(-params.delta_z, 0.0, np.array([0.0, 0.0, -params.J * params.hbar]))
    out = state.copy()
    for _ in range(1000):
        out = classical_step(out, params, DT)
    assert out.z == pytest.approx(-params.delta_z, abs=1e-12)
    assert out.p == pytest.approx(0.0, abs=1e-12)


def test_sample_times_alignment():
    init = matched_classical_state(PARAMS, z0=1.0)
    times = np.array([0.0, 0.35 * DT, 5 * DT, 5.5 * DT, 20 * DT])
    rec = run_classical(init, PARAMS, DT, sample_times=times)
    assert np.array_equal(rec.times, times)
    # against a plain uniform run at the shared grid point t = 20 dt
    rec2 = run_classical(init, PARAMS, DT, n_steps=20, sample_stride=20)
    assert rec.z[-1] == pytest.approx(rec2.z[-1], rel=1e-9)


def test_run_classical_argument_validation():
    init = matched_classical_state(PARAMS)
    with pytest.raises(ValueError):
        run_classical(init, PARAMS, DT)
    with pytest.raises(ValueError):
        run_classical(init, PARAMS, DT, n_steps=10, sample_times=np.array([0.0]))
    with pytest.raises(ValueError):
        run_classical(init, PARAMS, -DT, n_steps=10)
    with pytest.raises(ValueError):
        run_classical(init, PARAMS, DT, sample_times=np.array([1.0, 0.5]))
