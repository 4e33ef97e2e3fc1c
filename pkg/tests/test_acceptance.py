"""End-to-end acceptance tier: desk-scale physics and contract checks.

Every test here drives the public surface (config presets, integrators,
ensembles, CLI) the way a user would, with pinned seeds and tolerances.
The long runs share module-scoped fixtures, and the Fock cutoffs for those
runs are trimmed below the auto suggestion (480 for the desk orbit, 300
for the entropy-scaling orbit); the trim is validated on shared noise in
test_sse.py and changes sampled trajectories at the 1e-12 level while
keeping this suite inside a single-core CI budget.
"""
from __future__ import annotations

import filecmp
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import comb

from spinosc.classical import matched_classical_state, run_classical
from spinosc.cli import main
from spinosc.config import RunConfig, parse_config
from spinosc.cumulant import initial_moments, run_cumulant
from spinosc.diagnostics import (
    classicality_metrics,
    jz_histogram,
    normalized_max_entropy,
    von_neumann_entropy,
)
from spinosc.ensemble import EnsembleSpec, run_ensemble
from spinosc.hilbert import (
    BasisSpec,
    ModelParams,
    QuantumState,
    build_operators,
    coherent_state,
    expectation,
    product_state,
)
from spinosc.sse import run_trajectory, sse_step

DESK_N_MAX = 480
ENTROPY_N_MAX = 300

COV_CHANNELS = ("czz", "czp", "cpp", "czjz", "cpjz", "cjzjz")


@pytest.fixture(scope="module")
def desk() -> RunConfig:
    return parse_config("")


@pytest.fixture(scope="module")
def entropy_cfg() -> RunConfig:
    return parse_config("", preset="entropy-scaling")


def _paired_runs(cfg: RunConfig, J: float, n_max: int):
    """One trajectory at the configured dt and one at dt/2 on a shared
    Brownian path (coarse normals are pairwise sums of the fine ones)."""
    params = cfg.params_for(J)
    z0, p0 = cfg.initial_zp()
    basis = BasisSpec(n_max=n_max, J=J)
    n_steps = round(cfg.t_final / cfg.dt)
    xi_fine = np.random.default_rng(42).standard_normal(2 * n_steps)
    xi_coarse = (xi_fine[0::2] + xi_fine[1::2]) / math.sqrt(2.0)
    coarse = run_trajectory(
        product_state(basis, params, z0=z0, p0=p0), params, cfg.sse_config(),
        xi_coarse, cfg.t_final, sample_stride=10,
    )
    fine = run_trajectory(
        product_state(basis, params, z0=z0, p0=p0), params,
        replace(cfg.sse_config(), dt=cfg.dt / 2), xi_fine, cfg.t_final,
        sample_stride=20,
    )
    return coarse, fine, xi_coarse


def _halving_shift(coarse, fine) -> float:
    """Relative RMS change of the sampled <z>(t) under dt -> dt/2.

    The two records sample at times offset by dt/4 (rows sit at measurement
    events), so the fine series is interpolated onto the coarse grid."""
    z_fine = np.interp(coarse.times, fine.times, fine.z_mean)
    num = np.mean((coarse.z_mean - z_fine) ** 2)
    return math.sqrt(num / np.mean(coarse.z_mean**2))


@pytest.fixture(scope="module")
def desk_j10_pair(desk):
    return _paired_runs(desk, 10.0, DESK_N_MAX)


@pytest.fixture(scope="module")
def collapse_ensemble(desk):
    """200 monitored spin-1/2 trajectories of the desk scenario."""
    z0, p0 = desk.initial_zp()
    spec = EnsembleSpec(
        params=desk.params_for(0.5), cfg=desk.sse_config(), n_max=DESK_N_MAX,
        t_final=desk.t_final, n_traj=200, base_seed=desk.seed,
        sample_stride=desk.sample_stride, batch_size=desk.batch_size,
        z0=z0, p0=p0,
    )
    t0 = time.perf_counter()
    result = run_ensemble(spec, n_jobs=2)
    return result, time.perf_counter() - t0


def test_unmonitored_run_conserves_energy(desk):
    # k = 0 with the spin coupling still on: the split-step propagator is an
    # exact sector unitary, so <H> may only move at roundoff level even with
    # a step 5x coarser than the monitored default.
    params = ModelParams(J=0.5, k=0.0, delta_z=1.0)
    assert params.b != 0.0
    basis = BasisSpec(n_max=600, J=0.5)
    assert basis.n_fock * basis.spin_dim <= 2000
    ops = build_operators(params, basis)
    state = product_state(basis, params, z0=3.0, p0=0.0)
    h0 = expectation(state, ops.h)
    dt = 5e-3 * 2.0 * math.pi
    cfg = replace(desk.sse_config(), dt=dt)
    t0 = time.perf_counter()
    drift = 0.0
    n_steps = round(10.0 * 2.0 * math.pi / dt)
    for i in range(n_steps):
        state = sse_step(state, params, cfg, 0.0)
        if (i + 1) % 100 == 0:
            drift = max(drift, abs(expectation(state, ops.h) - h0) / abs(h0))
    wall = time.perf_counter() - t0
    assert drift < 1e-8
    assert wall < 10.0


def test_split_step_and_explicit_schemes_agree_pathwise(desk):
    # 100 random small systems, both schemes fed the same normals; the
    # terminal states must agree far beyond statistical resolution.
    rng = np.random.default_rng(20260816)
    worst = 1.0
    for _ in range(100):
        n_max = int(rng.integers(14, 17))
        J = float(rng.choice([0.0, 0.5, 1.0]))
        k = float(rng.uniform(0.01, 0.06))
        # The scheme gap grows with the motional excursion (well shift and
        # initial displacement), so the random domain keeps both moderate.
        dz = float(rng.uniform(0.2, 0.7)) * math.sqrt(0.5) if J else None
        z0, p0 = (float(v) for v in rng.uniform(-0.2, 0.2, size=2))
        params = ModelParams(J=J, k=k, delta_z=dz)
        basis = BasisSpec(n_max=n_max, J=J)
        init = product_state(basis, params, z0=z0, p0=p0)
        xi = rng.standard_normal(1000)
        finals = []
        for scheme in ("kraus", "milstein"):
            cfg = replace(desk.sse_config(), dt=1e-3, scheme=scheme)
            rec = run_trajectory(
                QuantumState(init.amplitudes.copy(), basis), params, cfg, xi,
                1.0, sample_stride=1000,
            )
            finals.append(rec.final_state.amplitudes)
        a, b = finals
        fid = abs(np.vdot(a, b)) ** 2 / (np.vdot(a, a).real * np.vdot(b, b).real)
        worst = min(worst, fid)
    assert worst > 1.0 - 1e-6


def test_mean_increments_decompose_into_drift_and_noise(desk):
    # Sampled rows sit at measurement events (j - 1/2)dt and the event at
    # row j consumes normal j-1, so the increment row j -> j+1 pairs with
    # xi[j-1] and the Hamiltonian drift is evaluated at the row midpoint.
    J = 10.0
    params = desk.params_for(J)
    z0, p0 = desk.initial_zp()
    basis = BasisSpec(n_max=DESK_N_MAX, J=J)
    dt = desk.dt
    n_steps = round(desk.t_final / dt)
    xi = np.random.default_rng(123).standard_normal(n_steps)
    rec = run_trajectory(
        product_state(basis, params, z0=z0, p0=p0), params, desk.sse_config(),
        xi, desk.t_final, sample_stride=1,
    )
    s8k = math.sqrt(8.0 * desk.k_zg2_over_omega)
    b_disp = params.b * params.hbar / params.p_g
    j = np.arange(1, len(rec.times) - 1)
    dw = xi[j - 1] * math.sqrt(dt)
    z, p, jz = rec.z_mean, rec.p_mean, rec.jz_mean
    gate = 5.0 * dt * dt
    channels = {
        "z": (z, 0.5 * (p[j] + p[j + 1]), rec.czz),
        "p": (p, -(0.5 * (z[j] + z[j + 1]) + b_disp * 0.5 * (jz[j] + jz[j + 1])),
              rec.czp),
        "jz": (jz, None, rec.czjz),
    }
    for name, (series, drift, noise_cov) in channels.items():
        inc = series[j + 1] - series[j]
        cols = [s8k * noise_cov[j] * dw]
        if drift is not None:
            cols.insert(0, drift * dt)
        design = np.column_stack(cols)
        coef, *_ = np.linalg.lstsq(design, inc, rcond=None)
        resid = inc - design @ coef
        assert np.abs(coef - 1.0).max() < 0.05, (name, coef)
        assert math.sqrt(np.mean(resid**2)) < gate, name


def test_spin_half_ensemble_collapses_to_definite_wells(collapse_ensemble):
    result, wall = collapse_ensemble
    records = result.ok_records()
    assert len(records) == 200
    jz_final = np.array([r.jz_mean[-1] for r in records])
    collapsed = np.mean(np.abs(jz_final) > 0.49)
    up_fraction = np.mean(jz_final > 0.0)
    assert collapsed >= 0.95
    assert 0.4 <= up_fraction <= 0.6
    assert wall < 600.0


def test_larger_spins_track_the_classical_orbit_better(desk, collapse_ensemble):
    z0, p0 = desk.initial_zp()
    medians = []
    for J in (0.5, 2.0, 10.0):
        params = desk.params_for(J)
        if J == 0.5:
            records = collapse_ensemble[0].ok_records()[:20]
        else:
            spec = EnsembleSpec(
                params=params, cfg=desk.sse_config(), n_max=DESK_N_MAX,
                t_final=desk.t_final, n_traj=20, base_seed=desk.seed,
                sample_stride=desk.sample_stride, batch_size=10, z0=z0, p0=p0,
            )
            records = run_ensemble(spec).ok_records()
        assert len(records) == 20
        classical = run_classical(
            matched_classical_state(params, z0=z0, p0=p0), params, desk.dt,
            sample_times=records[0].times,
        )
        medians.append(float(np.median([
            classicality_metrics(r, classical).rms_deviation_over_amplitude
            for r in records
        ])))
    assert medians[0] > medians[1] > medians[2], medians


def test_gaussian_closure_reproduces_conditional_covariances(desk, desk_j10_pair):
    coarse, _, xi_coarse = desk_j10_pair
    params = desk.params_for(10.0)
    z0, p0 = desk.initial_zp()
    series = run_cumulant(
        initial_moments(params, z0=z0, p0=p0), params, desk.dt, desk.t_final,
        xi_coarse, sample_stride=10,
    )
    for name in COV_CHANNELS:
        measured = getattr(coarse, name)
        closure = np.interp(coarse.times, series.times, getattr(series, name))
        disc = np.abs(measured - closure).max() / np.abs(closure).max()
        assert disc < 0.20, (name, disc)
    for m3_name, c_name in (("m3_z", "czz"), ("m3_jz", "cjzjz")):
        ratio = (
            np.abs(getattr(coarse, m3_name)).max()
            / getattr(coarse, c_name).max() ** 1.5
        )
        assert ratio < 0.10, (m3_name, ratio)


def test_closure_position_variance_bound_falls_with_spin():
    cfg = replace(RunConfig(), delta_z_over_zg=22.0, action_over_hbar=1000.0)
    z0, p0 = cfg.initial_zp()
    maxima = []
    for J in (5.0, 10.0, 25.0):
        params = cfg.params_for(J)
        series = run_cumulant(
            initial_moments(params, z0=z0, p0=p0), params, cfg.dt, cfg.t_final,
            np.zeros(round(cfg.t_final / cfg.dt)), sample_stride=10,
        )
        maxima.append(float(np.max(series.czz)))
    assert maxima[0] > maxima[1] > maxima[2], maxima


def test_polarized_spin_histogram_is_exactly_binomial():
    for half_steps in range(1, 21):
        J = half_steps / 2.0
        params = ModelParams(J=J, k=0.0, delta_z=0.5)
        basis = BasisSpec(n_max=8, J=J)
        hist = jz_histogram(product_state(basis, params, z0=0.0, p0=0.0))
        M = np.arange(-J, J + 1)
        reference = comb(2 * J, J + M) / 4.0**J
        assert np.abs(hist - reference).max() < 1e-12, J


def test_entanglement_entropy_anchors_and_collapse_peaks(collapse_ensemble):
    params = ModelParams(J=0.5, k=0.05, delta_z=1.0)
    basis = BasisSpec(n_max=80, J=0.5)
    assert von_neumann_entropy(product_state(basis, params, z0=1.0, p0=0.5)) < 1e-10

    # Equal superposition of two opposite coherent branches; the overlap
    # exp(-25) is far below the tolerance, so the entropy must hit ln 2.
    m = np.zeros((basis.n_fock, 2), dtype=complex)
    m[:, 0] = coherent_state(80, params, -5.0, 0.0)
    m[:, 1] = coherent_state(80, params, 5.0, 0.0)
    bell = QuantumState(m.reshape(-1) / math.sqrt(2.0), basis)
    assert abs(von_neumann_entropy(bell) - math.log(2.0)) < 1e-10

    records = collapse_ensemble[0].ok_records()
    peaked = np.mean([
        normalized_max_entropy(r.entropy, 0.5, e0=math.log(2.0)) > 0.9
        for r in records
    ])
    assert peaked >= 0.80


def test_peak_entanglement_falls_as_inverse_sqrt_spin(entropy_cfg):
    z0, p0 = entropy_cfg.initial_zp()
    t0 = time.perf_counter()
    means = []
    for J in entropy_cfg.j_values:
        spec = EnsembleSpec(
            params=entropy_cfg.params_for(J), cfg=entropy_cfg.sse_config(),
            n_max=ENTROPY_N_MAX, t_final=entropy_cfg.t_final,
            n_traj=entropy_cfg.n_traj, base_seed=entropy_cfg.seed,
            sample_stride=entropy_cfg.sample_stride, batch_size=10,
            z0=z0, p0=p0,
        )
        records = run_ensemble(spec).ok_records()
        assert len(records) >= 10
        means.append(float(np.mean(
            [normalized_max_entropy(r.entropy, J) for r in records]
        )))
    wall = time.perf_counter() - t0
    slope = np.polyfit(np.log(entropy_cfg.j_values), np.log(means), 1)[0]
    assert -0.65 <= slope <= -0.35, (slope, means)
    assert wall < 1800.0


def test_ensemble_csv_identical_across_worker_counts(tmp_path):
    cfg_text = "\n".join([
        "mode = ensemble",
        "J = 0.5",
        "n_max = 64",
        "delta_z_over_zg = 1.5",
        "action_over_hbar = 2",
        "dt = 0.002",
        "t_final_periods = 0.5",
        "n_traj = 6",
        "batch_size = 2",
        "sample_stride = 5",
        "seed = 11",
    ]) + "\n"
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(cfg_text)
    outputs = []
    for jobs, sub in (("1", "a"), ("3", "b")):
        out_dir = tmp_path / sub
        out_dir.mkdir()
        code = main([
            "--config", str(cfg_path), "--jobs", jobs,
            "--output-dir", str(out_dir), "ensemble",
        ])
        assert code == 0
        outputs.append(sorted(p for p in out_dir.iterdir() if p.suffix == ".csv"))
    names_a = [p.name for p in outputs[0]]
    names_b = [p.name for p in outputs[1]]
    assert names_a == names_b and names_a
    for a, b in zip(outputs[0], outputs[1]):
        assert filecmp.cmp(a, b, shallow=False), a.name


def test_halving_the_step_leaves_sampled_positions(
    desk, entropy_cfg, desk_j10_pair
):
    shifts = {}
    coarse, fine, _ = desk_j10_pair
    shifts[("desk", 10.0)] = _halving_shift(coarse, fine)
    for J in (0.5, 2.0):
        shifts[("desk", J)] = _halving_shift(
            *_paired_runs(desk, J, DESK_N_MAX)[:2]
        )
    for J in entropy_cfg.j_values:
        shifts[("entropy-scaling", J)] = _halving_shift(
            *_paired_runs(entropy_cfg, J, ENTROPY_N_MAX)[:2]
        )
    for key, value in shifts.items():
        assert value < 0.01, (key, value)
